import json

import numpy as np
import pytest
from scipy.optimize import minimize

from purikit import metrics, protocols, variational as var
from purikit.quantum import DegenerateOutcomeError, bell_projector
from conftest import random_density

CNOT2 = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex)


def test_gell_mann_algebra():
    g = var.GELL_MANN
    assert g.shape == (15, 4, 4)
    assert np.allclose(g, np.conj(np.swapaxes(g, 1, 2)))
    assert np.allclose(np.trace(g, axis1=1, axis2=2), 0)
    gram = np.einsum("aij,bji->ab", g, g)
    assert np.allclose(gram, 2 * np.eye(15))


def test_closed_form_exponentials_match_eigendecomposition(rng):
    for gi in sorted(set(var.EULER_GENERATORS)):
        s = var.GELL_MANN[gi - 1]
        w, q = np.linalg.eigh(s)
        t = rng.uniform(0, 3)
        ref = q @ np.diag(np.exp(1j * t * w)) @ q.conj().T
        assert np.allclose(var._exp_i(gi, t), ref, atol=1e-12)


def test_identity_angles():
    assert np.allclose(var.su4_unitary(np.zeros(15)), np.eye(4))
    assert np.allclose(var.pair_unitary(np.zeros(30)), np.eye(16))


def test_unitarity_and_determinant(rng):
    for _ in range(1000):
        u = var.su4_unitary(rng.uniform(var.ANGLE_LOWER, var.ANGLE_UPPER))
        assert np.max(np.abs(u.conj().T @ u - np.eye(4))) < 1e-10
        assert abs(np.linalg.det(u) - 1) < 1e-9


def test_out_of_box_rejected():
    a = np.zeros(15)
    a[1] = np.pi / 2 + 1e-6
    with pytest.raises(ValueError):
        var.su4_unitary(a)
    with pytest.raises(ValueError):
        var.su4_unitary(np.zeros(14))
    with pytest.raises(ValueError):
        var.pair_unitary(np.zeros(15))
    var.su4_unitary(a, check=False)


def test_jacobian_matches_finite_differences(rng):
    a = rng.uniform(var.ANGLE_LOWER + 0.01, var.ANGLE_UPPER - 0.01)
    u, jac = var.su4_jacobian(a)
    assert np.allclose(u, var.su4_unitary(a))
    h = 1e-6
    for m in range(15):
        e = np.zeros(15)
        e[m] = h
        fd = (var.su4_unitary(a + e) - var.su4_unitary(a - e)) / (2 * h)
        assert np.max(np.abs(fd - jac[m])) < 1e-8


def test_random_angles_in_box(rng):
    for width in (None, 0.1, 10.0):
        a = var.random_angles(rng, width)
        assert a.shape == (30,)
        assert np.all(a >= var.LOWER) and np.all(a <= var.UPPER)
    assert np.all(var.random_angles(rng, 0.1) <= 0.1)


# ---------------------------------------------------------------------------
# policies


@pytest.mark.parametrize("text,expect", [("greedy", "greedy"), ("fixed:3", "fixed:3"), (" Fixed:1 ", "fixed:1")])
def test_policy_parse(text, expect):
    assert str(var.MeasurementPolicy.parse(text)) == expect


@pytest.mark.parametrize("text", ["best", "fixed:0", "fixed:5", "fixed:x", ""])
def test_policy_parse_errors(text):
    with pytest.raises(ValueError):
        var.MeasurementPolicy.parse(text)


def test_greedy_picks_max_lowest_on_ties():
    conc = np.array([[0.1, 0.4, 0.4, 0.2], [0, 0, 0, 0], [0.3, 0.1, 0.0, 0.9]])
    assert list(var.MeasurementPolicy("greedy").choose(conc)) == [1, 0, 3]
    assert list(var.MeasurementPolicy("fixed", 3).choose(conc)) == [2, 2, 2]


# ---------------------------------------------------------------------------
# single rounds


def test_identity_round_on_maximally_mixed():
    res = var.variational_step(np.eye(4) / 4, var.RoundPlan.unitary(np.zeros(30), var.MeasurementPolicy("fixed", 1)))
    assert np.allclose(res.state, np.eye(4) / 4)
    assert res.success_probability == pytest.approx(0.25)


def test_projector_keeps_three_quarters_of_triplet_pair():
    # M2 acts across copies at each node, so |2>|2> is not in its kernel:
    # (M2 (x) M2)|2>|2> = |2>|2> - |2,2>_{(A1A2),(B1B2)} / 2 has norm^2 3/4
    rho = bell_projector(2)
    total = sum(
        var.apply_round(rho[None], var.RoundPlan.projector(var.MeasurementPolicy("fixed", k))).success[0]
        for k in range(1, 5)
    )
    assert total == pytest.approx(0.75, abs=1e-14)


def test_impossible_outcome_is_degenerate():
    rho = np.zeros((4, 4), dtype=complex)
    rho[3, 3] = 1  # |11>: outcome |00> on (A2, B2) has probability 0
    plan = var.RoundPlan.unitary(np.zeros(30), var.MeasurementPolicy("fixed", 1))
    with pytest.raises(DegenerateOutcomeError):
        var.variational_step(rho, plan)
    out = var.apply_round(rho[None], plan)
    assert out.degenerate[0] and out.concurrence[0] == 0 and out.success[0] == 0
    assert np.allclose(out.states[0], np.eye(4) / 4)


def test_projector_round_matches_direct_construction(rng):
    # build M2 (x) M2 on (A1 A2), (B1 B2) by explicit index bookkeeping
    m2 = np.eye(4) - bell_projector(2)
    rho = random_density(rng)
    pair = np.einsum("ab,cd->acbd", rho, rho).reshape(16, 16)  # rows a1 b1 a2 b2
    m = np.einsum("ikjl,mont->imkojnlt", m2.reshape(2, 2, 2, 2), m2.reshape(2, 2, 2, 2)).reshape(16, 16)
    s = m @ pair @ m.conj().T
    acc = np.trace(s).real
    t = s.reshape(4, 4, 4, 4)
    blocks = [t[:, k, :, k] for k in range(4)]
    probs = np.array([np.trace(b).real for b in blocks]) / acc
    conc = [metrics.concurrence(b / np.trace(b)) for b in blocks]
    k = int(np.argmax(conc))
    res = var.variational_step(rho, var.RoundPlan.projector())
    assert np.allclose(res.state, blocks[k] / np.trace(blocks[k]), atol=1e-12)
    assert res.success_probability == pytest.approx(probs[k] * acc, abs=1e-12)
    assert np.allclose(var.outcome_concurrences(rho, var.RoundPlan.projector()), conc, atol=1e-12)


def test_greedy_dominates_every_fixed_outcome(rng):
    states = random_density(rng, 300, rank=2)
    a = var.random_angles(rng)
    greedy = var.apply_round(states, var.RoundPlan.unitary(a)).concurrence
    for k in range(1, 5):
        fixed = var.apply_round(states, var.RoundPlan.unitary(a, var.MeasurementPolicy("fixed", k))).concurrence
        assert np.all(greedy >= fixed - 1e-12)


def test_chunking_does_not_change_results(rng):
    states = random_density(rng, 50)
    plan = var.RoundPlan.unitary(var.random_angles(rng))
    a = var.apply_round(states, plan, chunk=7)
    b = var.apply_round(states, plan)
    assert np.allclose(a.states, b.states) and np.array_equal(a.chosen, b.chosen)


@pytest.fixture(scope="module")
def cnot_angles():
    """Euler angles of a two-qubit CNOT, fitted inside the box up to global phase."""
    rng = np.random.default_rng(3)
    bounds = list(zip(var.ANGLE_LOWER, var.ANGLE_UPPER))

    def loss(a):
        return 1 - abs(np.trace(CNOT2.conj().T @ var.su4_unitary(a, check=False))) / 4

    best = None
    for _ in range(100):
        r = minimize(loss, rng.uniform(var.ANGLE_LOWER, var.ANGLE_UPPER), method="L-BFGS-B",
                     bounds=bounds, options={"ftol": 1e-16, "gtol": 1e-14})
        if best is None or r.fun < best.fun:
            best = r
        if best.fun < 1e-14:
            break
    assert best.fun < 1e-13
    return np.concatenate([best.x, best.x])


def test_fitted_cnot_round_reproduces_cnot_protocol(rng, cnot_angles):
    # the CNOT protocol's pre-rotation u1^dag (x) u1 acts on each copy separately
    w = np.kron(protocols.U1.conj().T, protocols.U1)
    plan = var.RoundPlan.unitary(cnot_angles, var.MeasurementPolicy("fixed", 4))
    for rho in random_density(rng, 30):
        ours = var.variational_step(w @ rho @ w.conj().T, plan)
        ref = protocols.cnot_step(rho)
        assert np.allclose(ours.state, ref.state, atol=1e-6)
        assert ours.success_probability == pytest.approx(ref.success_probability, abs=1e-6)


# ---------------------------------------------------------------------------
# cost and gradient


def test_cost_range_and_permutation_invariance(rng):
    states = random_density(rng, 80, rank=2)
    pol = var.MeasurementPolicy()
    a = var.random_angles(rng)
    c = var.cost(a, states, pol)
    assert 0 <= c <= 1
    assert var.cost(a, states[rng.permutation(80)], pol) == pytest.approx(c, abs=1e-14)


def test_product_state_has_unit_cost_and_zero_gradient(rng):
    prod = np.zeros((4, 4), dtype=complex)
    prod[0, 0] = 1
    pol = var.MeasurementPolicy()
    assert var.cost(np.zeros(30), prod[None], pol) == 1.0
    a = var.random_angles(rng)
    assert var.cost(a, prod[None], pol) == pytest.approx(1.0)
    assert np.all(var.gradient(a, prod[None], pol) == 0)


@pytest.mark.parametrize("policy", ["greedy", "fixed:2"])
def test_gradient_matches_central_differences(rng, policy):
    states = random_density(rng, 40, rank=2)
    pol = var.MeasurementPolicy.parse(policy)
    a = var.random_angles(rng)
    a = np.clip(a, var.LOWER + 1e-3, var.UPPER - 1e-3)
    obj = var.VariationalObjective(states, pol)
    obj.refresh(a)
    f0, g = obj.value_and_grad(a)
    assert f0 == pytest.approx(var.cost(a, states, pol), abs=1e-14)
    h = 1e-6
    fd = np.empty(30)
    for m in range(30):
        e = np.zeros(30)
        e[m] = h
        fd[m] = (obj.value_and_grad(a + e)[0] - obj.value_and_grad(a - e)[0]) / (2 * h)
    assert np.max(np.abs(fd - g)) <= 1e-6 * max(1.0, np.max(np.abs(g)))


def test_objective_refresh_invalidates_cache(rng):
    states = random_density(rng, 20, rank=2)
    obj = var.VariationalObjective(states, var.MeasurementPolicy())
    a = var.random_angles(rng)
    obj.refresh(a)
    f1, g1 = obj.value_and_grad(a)
    g1[:] = 0  # caller mutation must not leak into the cache
    f2, g2 = obj.value_and_grad(a)
    assert f1 == f2 and np.any(g2 != 0)


def test_optimizer_lowers_cost_and_is_thread_invariant(small_sample):
    states = small_sample[:100]
    pol = var.MeasurementPolicy()
    cfg = var.OptimizerConfig(max_iterations=25, restarts=3)
    x0 = var.random_angles(np.random.default_rng(5), 0.1)
    a = var.optimize(states, pol, cfg, x0, np.random.default_rng(1), threads=1)
    b = var.optimize(states, pol, cfg, x0, np.random.default_rng(1), threads=3)
    assert a.cost < a.initial_cost
    assert a.cost == pytest.approx(var.cost(a.angles, states, pol), abs=1e-14)
    assert a.angles.tobytes() == b.angles.tobytes()
    assert np.all(a.angles >= var.LOWER) and np.all(a.angles <= var.UPPER)


def test_converged_point_satisfies_box_kkt(rng):
    states = random_density(rng, 30, rank=2)
    pol = var.MeasurementPolicy("fixed", 1)
    cfg = var.OptimizerConfig(max_iterations=400, gradient_tolerance=1e-7)
    res = var.optimize(states, pol, cfg, var.random_angles(rng, 0.5), rng)
    assert res.converged
    assert np.max(np.abs(var.kkt_residual(res.angles, states, pol))) < 1e-6


def test_zero_iterations_returns_start(rng):
    states = random_density(rng, 10)
    x0 = var.random_angles(rng)
    res = var.optimize(states, var.MeasurementPolicy(), var.OptimizerConfig(max_iterations=0), x0)
    assert np.array_equal(res.angles, x0) and res.cost == res.initial_cost and res.runs == []


@pytest.mark.parametrize("kw", [{"max_iterations": -1}, {"restarts": 0}, {"history_size": 0},
                                {"gradient_tolerance": 0.0}, {"subset_size": 0}])
def test_optimizer_config_validation(kw):
    with pytest.raises(ValueError):
        var.OptimizerConfig(**kw)


# ---------------------------------------------------------------------------
# adaptive protocol


def test_identity_round_is_plain_measurement(small_sample):
    states = small_sample[:300]
    stats0, recs = var.run_adaptive_protocol(
        states, 1, var.MeasurementPolicy("fixed", 1), var.OptimizerConfig(), fixed_angles=np.zeros(30)
    )
    c0 = np.asarray(metrics.concurrence(states))
    alive = c0 > 0
    assert stats0.mean_concurrence == pytest.approx(c0.mean())
    st = recs[0].stats
    # |00> on (A2, B2) leaves rho with probability rho[0, 0]
    assert st.mean_concurrence == pytest.approx(c0.mean(), abs=1e-12)
    p = np.where(alive, np.real(states[:, 0, 0]), 0.0)
    assert st.mean_success == pytest.approx(p.mean(), abs=1e-12)


def test_adaptive_run_is_reproducible_and_freezes_zeros(small_sample):
    states = small_sample[:200]
    cfg = var.OptimizerConfig(max_iterations=5, subset_size=50)
    pol = var.MeasurementPolicy()
    s1, r1 = var.run_adaptive_protocol(states, 3, pol, cfg, projector_first=True, seed=4)
    s2, r2 = var.run_adaptive_protocol(states, 3, pol, cfg, projector_first=True, seed=4)
    assert [r.stats for r in r1] == [r.stats for r in r2]
    assert r1[0].plan.operation == "projector" and r1[0].cost is None
    assert all(r.plan.operation == "unitary" for r in r1[1:])
    counts = [r.stats.n_nonzero for r in r1]
    assert counts == sorted(counts, reverse=True)


def test_rounds_must_be_positive(small_sample):
    with pytest.raises(ValueError):
        var.run_adaptive_protocol(small_sample[:5], 0, var.MeasurementPolicy(), var.OptimizerConfig())


def test_angle_dump_format(tmp_path, small_sample):
    _, recs = var.run_adaptive_protocol(
        small_sample[:50], 2, var.MeasurementPolicy("fixed", 2),
        var.OptimizerConfig(max_iterations=2, subset_size=20), projector_first=True,
    )
    path = tmp_path / "angles.json"
    var.dump_angles(recs, path)
    data = json.loads(path.read_text())
    assert [d["round"] for d in data] == [1, 2]
    assert data[0]["operation"] == "projector" and data[0]["alpha_a"] is None
    assert len(data[1]["alpha_a"]) == 15 and len(data[1]["alpha_b"]) == 15
    assert data[1]["policy"] == "fixed:2"
    back = np.array(data[1]["alpha_a"] + data[1]["alpha_b"])
    assert np.array_equal(back, recs[1].plan.angles)
