import struct

import numpy as np
import pytest

from purikit import metrics, sampler
from conftest import random_density


def test_basis_is_orthonormal():
    b = sampler.basis_matrices()
    assert b.shape == (16, 4, 4)
    gram = np.real(np.einsum("aij,bji->ab", b, b))
    assert np.allclose(gram, np.eye(16))
    assert np.allclose(b[-1], np.eye(4) / 2)
    assert np.allclose(np.trace(b[:15], axis1=1, axis2=2), 0)


def test_bloch_round_trip(rng):
    rho = random_density(rng, 10)
    a = sampler.density_to_bloch(rho)
    assert a.shape == (10, 15)
    assert np.allclose(sampler.bloch_to_density(a), rho)


def test_membership_matches_eigenvalue_oracle(rng):
    x = rng.normal(size=(4000, 15))
    a = x / np.linalg.norm(x, axis=1)[:, None] * rng.uniform(0, 0.6, size=(4000, 1))
    ours = sampler.membership(a)
    ref = np.min(np.linalg.eigvalsh(sampler.bloch_to_density(a)), axis=1) >= 0
    assert np.array_equal(ours, ref)
    assert 0 < np.count_nonzero(ref) < len(ref)
    assert sampler.membership(np.zeros(15)) is True


def test_membership_outside_ball():
    a = np.zeros(15)
    a[0] = 0.9  # beyond sqrt(3)/2
    assert not sampler.membership(a)


def test_pure_states_on_boundary_sphere(rng):
    # pure states sit at the circumscribed radius sqrt(3)/2
    psi = rng.normal(size=4) + 1j * rng.normal(size=4)
    psi /= np.linalg.norm(psi)
    a = sampler.density_to_bloch(np.outer(psi, psi.conj()))
    assert np.linalg.norm(a) == pytest.approx(sampler.RADIUS)


def test_single_step_from_origin_is_inside():
    state = sampler.ChainState.start(3)
    new = sampler.hit_and_run_step(state)
    assert new.accepted_steps == 1
    assert sampler.membership(new.current)
    assert np.all(state.current == 0)  # input untouched
    again = sampler.hit_and_run_step(state)
    assert np.array_equal(again.current, new.current)


def test_chain_stays_inside():
    a = sampler.sample_bloch(sampler.ChainConfig(seed=5, burn_in=0, thinning=1, n_samples=3000))
    assert np.all(sampler.membership(a))
    assert np.all(np.linalg.norm(a, axis=1) <= sampler.RADIUS + 1e-12)


def test_determinism_bit_exact():
    cfg = sampler.ChainConfig(seed=42, burn_in=50, thinning=3, n_samples=200)
    a = sampler.sample_bloch(cfg)
    b = sampler.sample_bloch(cfg)
    assert a.tobytes() == b.tobytes()
    c = sampler.sample_bloch(sampler.ChainConfig(seed=43, burn_in=50, thinning=3, n_samples=200))
    assert not np.array_equal(a, c)


def test_stream_matches_batch():
    cfg = sampler.ChainConfig(seed=9, burn_in=20, thinning=2, n_samples=55)
    streamed = np.array(list(sampler.sample_states(cfg, chunk=7)))
    assert np.array_equal(streamed, sampler.bloch_to_density(sampler.sample_bloch(cfg)))


def test_step_by_step_equals_compiled_chain():
    cfg = sampler.ChainConfig(seed=4, burn_in=0, thinning=1, n_samples=25)
    batch = sampler.sample_bloch(cfg)
    state = sampler.ChainState.start(4)
    for k in range(25):
        state = sampler.hit_and_run_step(state)
        assert np.array_equal(state.current, batch[k])


def test_threads_do_not_change_output():
    a = sampler.sample_chains(300, chains=4, seed=1, burn_in=10, thinning=2, threads=1)
    b = sampler.sample_chains(300, chains=4, seed=1, burn_in=10, thinning=2, threads=4)
    assert a.tobytes() == b.tobytes()
    first = sampler.sample_bloch(sampler.ChainConfig(seed=2, burn_in=10, thinning=2, n_samples=300))
    assert np.array_equal(a[300:600], first)


@pytest.mark.parametrize("kw", [{"n_samples": 0}, {"thinning": 0}, {"burn_in": -1}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        sampler.ChainConfig(**kw)


def test_sample_statistics_rough(small_sample):
    c = np.asarray(metrics.concurrence(small_sample))
    # coarse bounds at N = 2000; the 10^5 checks live in the acceptance suite
    assert 0.11 < c.mean() < 0.14
    assert 0.20 < np.mean(c == 0) < 0.29


def test_dump_round_trip(tmp_path):
    a = sampler.sample_chains(20, seed=3, burn_in=5, thinning=1)
    path = tmp_path / "s.bin"
    sampler.write_dump(path, a, seed=3)
    raw = path.read_bytes()
    assert len(raw) == 32 + 20 * 15 * 8
    magic, version, _, count, seed = struct.unpack_from("<8sIIQQ", raw)
    assert (magic, version, count, seed) == (b"PURIKITA", 1, 20, 3)
    back, header = sampler.read_dump(path)
    assert back.tobytes() == a.tobytes()
    assert header == {"version": 1, "count": 20, "seed": 3}


def test_dump_errors(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"short")
    with pytest.raises(ValueError, match="truncated"):
        sampler.read_dump(p)
    p.write_bytes(b"NOTADUMP" + bytes(24))
    with pytest.raises(ValueError, match="not a purikit"):
        sampler.read_dump(p)
    sampler.write_dump(p, np.zeros((2, 15)), seed=0)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError, match="records"):
        sampler.read_dump(p)
    with pytest.raises(ValueError):
        sampler.write_dump(p, np.zeros((2, 14)), seed=0)
