"""Variational purification with SU(4) x SU(4) node unitaries.

A round applies an operation ``Pi`` to ``rho (x) rho``: either the node unitary
``V = U(alpha_A)^(A1 A2) (x) U(alpha_B)^(B1 B2)`` or the fixed projector
``M2 (x) M2`` with ``M2 = I - |2><2|``. Then it measures (A2, B2) in the
computational basis and keeps one outcome chosen by a measurement policy.
The angles are tuned to maximise the mean output concurrence over a sample.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .lbfgsb import BoxResult, minimize_box, projected_gradient
from .metrics import IterationStats
from .protocols import StepResult
from .quantum import (
    NODE_PERM,
    YY,
    DegenerateOutcomeError,
    bell_projector,
    dagger,
    node_operator,
    outcome_blocks,
    tensor,
)

log = logging.getLogger(__name__)

DEGENERATE = 1e-14
#: gap below which two spin-flip roots are treated as degenerate in the gradient
GAP = 1e-8
CHUNK = 4096


# ---------------------------------------------------------------------------
# SU(4) generators and Euler angles


def gell_mann_su4() -> np.ndarray:
    """The 15 generalised Gell-Mann matrices of su(4), ``Tr{s_i s_j} = 2 delta_ij``.

    Standard ordering: the su(3) set lambda_1..lambda_8 embedded in the upper
    3x3 block, then the (1,4), (2,4), (3,4) symmetric/antisymmetric pairs and
    ``diag(1, 1, 1, -3)/sqrt(6)``.
    """
    mats = []

    def sym(i, j):
        m = np.zeros((4, 4), dtype=complex)
        m[i, j] = m[j, i] = 1
        return m

    def asym(i, j):
        m = np.zeros((4, 4), dtype=complex)
        m[i, j] = -1j
        m[j, i] = 1j
        return m

    mats += [sym(0, 1), asym(0, 1), np.diag([1, -1, 0, 0]).astype(complex)]
    mats += [sym(0, 2), asym(0, 2), sym(1, 2), asym(1, 2)]
    mats += [np.diag([1, 1, -2, 0]).astype(complex) / np.sqrt(3)]
    mats += [sym(0, 3), asym(0, 3), sym(1, 3), asym(1, 3), sym(2, 3), asym(2, 3)]
    mats += [np.diag([1, 1, 1, -3]).astype(complex) / np.sqrt(6)]
    return np.array(mats)


GELL_MANN = gell_mann_su4()
#: 1-based generator index of each Euler factor exp(i sigma_g alpha_m)
EULER_GENERATORS = (3, 2, 3, 5, 3, 10, 3, 2, 3, 5, 3, 2, 3, 8, 15)
ANGLE_UPPER = np.array(
    [np.pi, np.pi / 2] * 6 + [np.pi, np.pi / np.sqrt(3), np.pi / np.sqrt(6)], dtype=float
)
ANGLE_LOWER = np.zeros(15)
LOWER = np.concatenate([ANGLE_LOWER, ANGLE_LOWER])
UPPER = np.concatenate([ANGLE_UPPER, ANGLE_UPPER])


def _exp_i(g: int, angle: float) -> np.ndarray:
    """exp(i angle sigma_g) in closed form (every generator used is diagonal or a 2-level Pauli)."""
    s = GELL_MANN[g - 1]
    diag = np.diag(s)
    if np.count_nonzero(s - np.diag(diag)) == 0:
        return np.diag(np.exp(1j * angle * diag))
    block = (s @ s).real  # projector onto the two levels
    return np.eye(4) - block + np.cos(angle) * block + 1j * np.sin(angle) * s


def _check_bounds(alpha, lower, upper, tol=1e-12):
    if np.any(alpha < lower - tol) or np.any(alpha > upper + tol):
        raise ValueError("Euler angles outside their parameter box")


def su4_factors(alpha) -> list[np.ndarray]:
    return [_exp_i(g, a) for g, a in zip(EULER_GENERATORS, alpha)]


def su4_unitary(alpha, check: bool = True) -> np.ndarray:
    """``U(alpha) = prod_m exp(i sigma_(g_m) alpha_m)`` for 15 Euler angles."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (15,):
        raise ValueError("expected 15 Euler angles")
    if check:
        _check_bounds(alpha, ANGLE_LOWER, ANGLE_UPPER)
    u = np.eye(4, dtype=complex)
    for f in su4_factors(alpha):
        u = u @ f
    return u


def su4_jacobian(alpha) -> tuple[np.ndarray, np.ndarray]:
    """``U(alpha)`` and ``dU/dalpha_m`` (shape ``(15, 4, 4)``)."""
    factors = su4_factors(np.asarray(alpha, dtype=float))
    n = len(factors)
    prefix = [np.eye(4, dtype=complex)]
    for f in factors:
        prefix.append(prefix[-1] @ f)
    suffix = [np.eye(4, dtype=complex)]
    for f in reversed(factors):
        suffix.append(f @ suffix[-1])
    suffix = suffix[::-1]
    jac = np.empty((n, 4, 4), dtype=complex)
    for m, g in enumerate(EULER_GENERATORS):
        jac[m] = prefix[m + 1] @ (1j * GELL_MANN[g - 1]) @ suffix[m + 1]
    return prefix[-1], jac


def pair_unitary(angles, check: bool = True) -> np.ndarray:
    """``V = U(alpha_A)^(A1 A2) (x) U(alpha_B)^(B1 B2)`` in A1, B1, A2, B2 ordering."""
    angles = np.asarray(angles, dtype=float)
    if angles.shape != (30,):
        raise ValueError("expected 30 Euler angles")
    return node_operator(su4_unitary(angles[:15], check), su4_unitary(angles[15:], check))


def clip_angles(angles) -> np.ndarray:
    return np.minimum(np.maximum(np.asarray(angles, dtype=float), LOWER), UPPER)


def random_angles(rng: np.random.Generator, width: float | None = None) -> np.ndarray:
    """Uniform over the box, or ``U(0, width)`` per angle near the identity."""
    if width is None:
        return rng.uniform(LOWER, UPPER)
    return clip_angles(rng.uniform(0.0, width, size=30))


# ---------------------------------------------------------------------------
# plans and policies


@dataclass(frozen=True)
class MeasurementPolicy:
    """``greedy`` keeps the outcome with the largest concurrence; ``fixed`` keeps ``outcome``."""

    kind: str = "greedy"
    outcome: int = 1

    def __post_init__(self):
        if self.kind not in ("greedy", "fixed"):
            raise ValueError(f"unknown policy {self.kind!r}")
        if self.outcome not in (1, 2, 3, 4):
            raise ValueError("fixed outcome must be in 1..4")

    @classmethod
    def parse(cls, text: str) -> "MeasurementPolicy":
        text = text.strip().lower()
        if text == "greedy":
            return cls("greedy")
        if text.startswith("fixed:"):
            return cls("fixed", int(text.split(":", 1)[1]))
        raise ValueError(f"cannot parse policy {text!r} (use 'greedy' or 'fixed:k')")

    def __str__(self):
        return "greedy" if self.kind == "greedy" else f"fixed:{self.outcome}"

    def choose(self, conc: np.ndarray) -> np.ndarray:
        """Selected outcome index (0-based) per row of an ``(N, 4)`` concurrence table."""
        if self.kind == "greedy":
            return np.argmax(conc, axis=-1)
        return np.full(conc.shape[:-1], self.outcome - 1, dtype=int)


M2 = np.eye(4, dtype=complex) - bell_projector(2)
SPECIAL_PROJECTOR = node_operator(M2, M2)


@dataclass(frozen=True)
class RoundPlan:
    operation: str  # "unitary" or "projector"
    angles: np.ndarray | None = None
    policy: MeasurementPolicy = field(default_factory=MeasurementPolicy)

    @classmethod
    def unitary(cls, angles, policy: MeasurementPolicy | None = None) -> "RoundPlan":
        return cls("unitary", clip_angles(angles), policy or MeasurementPolicy())

    @classmethod
    def projector(cls, policy: MeasurementPolicy | None = None) -> "RoundPlan":
        return cls("projector", None, policy or MeasurementPolicy())

    def operator(self) -> np.ndarray:
        if self.operation == "projector":
            return SPECIAL_PROJECTOR
        if self.operation == "unitary":
            return pair_unitary(self.angles)
        raise ValueError(f"unknown operation {self.operation!r}")


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class RoundOutput:
    states: np.ndarray  # (N, 4, 4), maximally mixed where degenerate
    concurrence: np.ndarray  # (N,)
    success: np.ndarray  # (N,) chosen-outcome probability x acceptance
    chosen: np.ndarray  # (N,) 0-based outcome
    degenerate: np.ndarray  # (N,) bool


def _round_chunk(states, op, is_unitary, policy, chosen=None):
    pair = tensor(states, states)
    sigma = op @ pair @ dagger(op)
    n = len(states)
    if is_unitary:
        acceptance = np.ones(n)
    else:
        acceptance = np.real(np.trace(sigma, axis1=1, axis2=2))
    dead = acceptance < DEGENERATE
    acc_safe = np.where(dead, 1.0, acceptance)
    blocks = outcome_blocks(sigma) / acc_safe[:, None, None, None]
    probs = np.real(np.trace(blocks, axis1=2, axis2=3))  # (N, 4)
    valid = (probs >= DEGENERATE) & ~dead[:, None]
    p_safe = np.where(valid, probs, 1.0)
    outs = blocks / p_safe[..., None, None]
    outs = np.where(valid[..., None, None], outs, np.eye(4) / 4)
    outs = 0.5 * (outs + dagger(outs))
    conc = np.asarray(metrics.concurrence(outs), dtype=float).reshape(n, 4)
    conc = np.where(valid, conc, 0.0)
    if chosen is None:
        chosen = policy.choose(conc)
    idx = np.arange(n)
    ok = valid[idx, chosen]
    return RoundOutput(
        states=outs[idx, chosen],
        concurrence=conc[idx, chosen],
        success=np.where(ok, probs[idx, chosen] * acceptance, 0.0),
        chosen=chosen,
        degenerate=~ok,
    )


def apply_round(states: np.ndarray, plan: RoundPlan, chunk: int = CHUNK) -> RoundOutput:
    """Apply one round to every state in a stack (processed in fixed-size chunks)."""
    states = np.asarray(states, dtype=complex).reshape(-1, 4, 4)
    op = plan.operator()
    is_unitary = plan.operation == "unitary"
    parts = [
        _round_chunk(states[i : i + chunk], op, is_unitary, plan.policy)
        for i in range(0, len(states), chunk)
    ]
    return RoundOutput(*(np.concatenate([getattr(p, f) for p in parts]) for f in RoundOutput.__dataclass_fields__))


def variational_step(rho: np.ndarray, plan: RoundPlan) -> StepResult:
    """One variational round on a single state."""
    out = apply_round(np.asarray(rho)[None], plan)
    if out.degenerate[0]:
        raise DegenerateOutcomeError("round annihilates the input or the kept outcome")
    return StepResult(out.states[0], float(out.success[0]))


def outcome_concurrences(rho: np.ndarray, plan: RoundPlan) -> np.ndarray:
    """Concurrence of the four post-measurement states (0 for impossible outcomes)."""
    op = plan.operator()
    states = np.asarray(rho, dtype=complex)[None]
    pair = tensor(states, states)
    sigma = op @ pair @ dagger(op)
    blocks = outcome_blocks(sigma)[0]
    probs = np.real(np.trace(blocks, axis1=1, axis2=2))
    out = np.zeros(4)
    for k in range(4):
        if probs[k] >= DEGENERATE * max(np.real(np.trace(sigma[0])), DEGENERATE):
            b = blocks[k] / probs[k]
            out[k] = metrics.concurrence(0.5 * (b + dagger(b)))
    return out


# ---------------------------------------------------------------------------
# cost and gradient


def cost(alpha, sample: np.ndarray, policy: MeasurementPolicy) -> float:
    """``1 - mean output concurrence`` of the variational round over ``sample``."""
    return evaluate_cost(alpha, sample, policy)[0]


def evaluate_cost(alpha, sample, policy) -> tuple[float, int]:
    """Cost and the number of degenerate (annihilated) states, which count as 0."""
    out = apply_round(sample, RoundPlan.unitary(alpha, policy))
    return 1.0 - float(np.mean(out.concurrence)), int(np.count_nonzero(out.degenerate))


def _concurrence_grad(rho: np.ndarray, conc: np.ndarray) -> np.ndarray:
    """``G`` with ``dC = Re Tr{d rho G}`` for a stack of states (zero where C = 0).

    Uses first-order perturbation of the eigenvalues of ``rho Y rho* Y`` with
    left/right eigenvectors; ordering and the max are held fixed.
    """
    n = len(rho)
    grad = np.zeros((n, 4, 4), dtype=complex)
    live = conc > 0
    if not np.any(live):
        return grad
    r = rho[live]
    flipped = YY @ np.conj(r) @ YY
    mu, vec = np.linalg.eig(r @ flipped)
    inv = np.linalg.inv(vec)
    lam = np.sqrt(np.clip(mu.real, 0.0, None))
    order = np.argsort(-lam, axis=1)
    sign = np.empty_like(lam)
    rows = np.arange(len(r))[:, None]
    signs = np.broadcast_to(np.array([1.0, -1.0, -1.0, -1.0]), lam.shape).copy()
    top = lam[rows[:, 0], order[:, 0]]
    second = lam[rows[:, 0], order[:, 1]]
    signs[top - second < GAP, 0] = 0.0
    signs[top - second < GAP, 1] = 0.0
    sign[rows, order] = signs
    with np.errstate(divide="ignore"):
        coef = np.where(lam > 1e-12, sign / (2 * np.where(lam > 0, lam, 1.0)), 0.0)
    q = (vec * coef[:, None, :]) @ inv
    a = flipped @ q
    b = YY @ q @ r @ YY
    grad[live] = a + np.conj(b)
    return grad


@dataclass
class _Frozen:
    chosen: np.ndarray | None = None
    key: bytes | None = None
    value: tuple | None = None


class VariationalObjective:
    """Cost and analytic gradient on a fixed sample with a frozen outcome choice.

    ``refresh(alpha)`` re-selects outcomes under the policy at ``alpha``;
    subsequent evaluations keep that choice until the next refresh.
    """

    def __init__(self, sample: np.ndarray, policy: MeasurementPolicy):
        self.sample = np.asarray(sample, dtype=complex).reshape(-1, 4, 4)
        self.pair = tensor(self.sample, self.sample)
        self.policy = policy
        self.frozen = _Frozen()

    def refresh(self, alpha) -> None:
        out = apply_round(self.sample, RoundPlan.unitary(alpha, self.policy))
        if self.frozen.chosen is None or not np.array_equal(out.chosen, self.frozen.chosen):
            self.frozen.value = None
        self.frozen.chosen = out.chosen

    def true_cost(self, alpha) -> float:
        return evaluate_cost(alpha, self.sample, self.policy)[0]

    def value_and_grad(self, alpha) -> tuple[float, np.ndarray]:
        alpha = clip_angles(alpha)
        key = alpha.tobytes()
        if self.frozen.value is not None and self.frozen.key == key:
            f, g = self.frozen.value
            return f, g.copy()
        f, g = self._evaluate(alpha)
        if self.frozen.chosen is not None:
            self.frozen.key, self.frozen.value = key, (f, g.copy())
        return f, g

    def _evaluate(self, alpha) -> tuple[float, np.ndarray]:
        ua, dua = su4_jacobian(alpha[:15])
        ub, dub = su4_jacobian(alpha[15:])
        v = node_operator(ua, ub)
        sigma = v @ self.pair @ dagger(v)
        blocks = outcome_blocks(sigma)
        n = len(self.sample)
        probs = np.real(np.trace(blocks, axis1=2, axis2=3))
        if self.frozen.chosen is None:
            valid = probs >= DEGENERATE
            outs = np.where(valid[..., None, None], blocks / np.where(valid, probs, 1.0)[..., None, None], np.eye(4) / 4)
            conc_all = np.where(valid, np.asarray(metrics.concurrence(0.5 * (outs + dagger(outs)))).reshape(n, 4), 0.0)
            chosen = self.policy.choose(conc_all)
        else:
            chosen = self.frozen.chosen
        idx = np.arange(n)
        nk = blocks[idx, chosen]
        p = probs[idx, chosen]
        ok = p >= DEGENERATE
        p_safe = np.where(ok, p, 1.0)
        rho = nk / p_safe[:, None, None]
        rho = 0.5 * (rho + dagger(rho))
        rho = np.where(ok[:, None, None], rho, np.eye(4) / 4)
        conc = np.where(ok, np.asarray(metrics.concurrence(rho), dtype=float).reshape(n), 0.0)
        value = 1.0 - float(np.mean(conc))

        g = _concurrence_grad(rho, conc)
        tr = np.einsum("nij,nji->n", rho, g)
        g = (g - tr[:, None, None] * np.eye(4)) / p_safe[:, None, None]
        g = np.where(ok[:, None, None], g, 0.0)
        h = np.zeros((n, 4, 4, 4, 4), dtype=complex)
        gh = g + dagger(g)
        h[idx, :, chosen, :, chosen] = gh
        h = h.reshape(n, 16, 16)
        j = np.sum(self.pair @ (dagger(v)[None] @ h), axis=0) / n
        # value is 1 - mean C
        j = -j
        jn = (NODE_PERM.T @ j @ NODE_PERM).reshape(4, 4, 4, 4)  # [j, l, i, k]
        ga = np.einsum("kl,jlik->ij", ub, jn)
        gb = np.einsum("ij,jlik->kl", ua, jn)
        grad_a = np.real(np.einsum("mij,ij->m", dua, ga))
        grad_b = np.real(np.einsum("mkl,kl->m", dub, gb))
        return value, np.concatenate([grad_a, grad_b])


def gradient(alpha, sample, policy: MeasurementPolicy) -> np.ndarray:
    """Gradient of :func:`cost` with the policy's choice frozen at ``alpha``."""
    obj = VariationalObjective(sample, policy)
    obj.refresh(alpha)
    return obj.value_and_grad(alpha)[1]


# ---------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 100
    gradient_tolerance: float = 1e-6
    history_size: int = 10
    restarts: int = 1
    subset_size: int = 1000

    def __post_init__(self):
        if self.max_iterations < 0 or self.history_size < 1 or self.restarts < 1 or self.subset_size < 1:
            raise ValueError("optimizer settings must be positive")
        if not self.gradient_tolerance > 0:
            raise ValueError("gradient_tolerance must be positive")


@dataclass
class OptimizeOutcome:
    angles: np.ndarray
    cost: float
    initial_cost: float
    runs: list[BoxResult]

    @property
    def converged(self) -> bool:
        return any(r.converged for r in self.runs)


def optimize(
    sample,
    policy: MeasurementPolicy,
    cfg: OptimizerConfig,
    initial,
    rng: np.random.Generator | None = None,
    threads: int = 1,
) -> OptimizeOutcome:
    """Minimise the cost over the angle box; best of ``cfg.restarts`` starts.

    The first start is ``initial``; later ones are uniform over the box. All
    starts are drawn before any run, so ``threads`` only changes wall time.
    """
    rng = rng or np.random.default_rng(0)
    sample = np.asarray(sample, dtype=complex).reshape(-1, 4, 4)
    initial = clip_angles(initial)
    initial_cost = evaluate_cost(initial, sample, policy)[0]
    if cfg.max_iterations == 0:
        return OptimizeOutcome(initial, initial_cost, initial_cost, [])
    starts = [initial] + [random_angles(rng) for _ in range(cfg.restarts - 1)]

    def run(x0):
        obj = VariationalObjective(sample, policy)
        res = minimize_box(
            obj.value_and_grad,
            x0,
            LOWER,
            UPPER,
            max_iter=cfg.max_iterations,
            gtol=cfg.gradient_tolerance,
            history=cfg.history_size,
            refresh=obj.refresh,
        )
        return res, obj.true_cost(res.x)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(x0) for x0 in starts]

    best_x, best_f = initial, initial_cost
    for r, (res, f) in enumerate(results):
        log.debug("restart %d: cost %.6f (%s, %d iterations)", r, f, res.message, res.n_iter)
        if f < best_f:
            best_x, best_f = res.x, f
    return OptimizeOutcome(best_x, best_f, initial_cost, [res for res, _ in results])


def kkt_residual(alpha, sample, policy) -> np.ndarray:
    """Projected gradient at ``alpha``; zero at a box-constrained stationary point."""
    return projected_gradient(clip_angles(alpha), gradient(alpha, sample, policy), LOWER, UPPER)


# ---------------------------------------------------------------------------
# adaptive multi-round protocol


@dataclass
class RoundRecord:
    round: int
    plan: RoundPlan
    stats: IterationStats
    cost: float | None = None
    converged: bool | None = None

    def angles_json(self) -> dict:
        a = self.plan.angles
        return {
            "round": self.round,
            "operation": self.plan.operation,
            "alpha_a": None if a is None else [float(v) for v in a[:15]],
            "alpha_b": None if a is None else [float(v) for v in a[15:]],
            "cost": self.cost,
            "policy": str(self.plan.policy),
        }


def initial_stats(states: np.ndarray) -> tuple[IterationStats, np.ndarray]:
    conc = np.asarray(metrics.concurrence(states), dtype=float).reshape(-1)
    return IterationStats.from_values(0, conc, (conc > 0).astype(float)), conc


def run_adaptive_protocol(
    sample: np.ndarray,
    rounds: int,
    policy: MeasurementPolicy,
    cfg: OptimizerConfig,
    projector_first: bool = False,
    seed: int = 0,
    start_width: float = 0.1,
    fixed_angles=None,
    threads: int = 1,
) -> tuple[IterationStats, list[RoundRecord]]:
    """Run the adaptive protocol over a sample of density matrices.

    Each unitary round optimises fresh angles on a random subset of the
    still-entangled states, then applies them to the whole population, whose
    states are replaced by the round's outputs. States whose concurrence has
    dropped to zero stay at zero with success probability zero.

    ``fixed_angles`` skips optimisation and uses the given 30 angles each round.
    ``threads`` runs optimizer restarts concurrently without changing results.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    rng = np.random.default_rng(seed)
    states = np.array(sample, dtype=complex).reshape(-1, 4, 4)
    stats0, conc = initial_stats(states)
    alive = conc > 0
    records = []
    for rnd in range(1, rounds + 1):
        cost_value = None
        converged = None
        if rnd == 1 and projector_first:
            plan = RoundPlan.projector(policy)
        elif fixed_angles is not None:
            plan = RoundPlan.unitary(fixed_angles, policy)
        else:
            pool = np.flatnonzero(alive)
            start = random_angles(rng, start_width)
            if len(pool) == 0:
                plan = RoundPlan.unitary(start, policy)
            else:
                take = min(cfg.subset_size, len(pool))
                subset = np.sort(rng.choice(pool, size=take, replace=False))
                res = optimize(states[subset], policy, cfg, start, rng, threads)
                plan = RoundPlan.unitary(res.angles, policy)
                cost_value, converged = res.cost, res.converged
                log.info("round %d: subset cost %.6f -> %.6f", rnd, res.initial_cost, res.cost)
        out = apply_round(states[alive], plan)
        new_conc = np.zeros(len(states))
        new_succ = np.zeros(len(states))
        new_conc[alive] = out.concurrence
        new_succ[alive] = out.success
        states[alive] = out.states
        alive = alive & (new_conc > 0)
        new_succ[~alive] = 0.0
        new_conc[~alive] = 0.0
        states[~alive] = np.eye(4) / 4
        stats = IterationStats.from_values(rnd, new_conc, new_succ)
        records.append(RoundRecord(rnd, plan, stats, cost_value, converged))
    return stats0, records


def dump_angles(records: list[RoundRecord], path) -> None:
    with open(path, "w") as fh:
        json.dump([r.angles_json() for r in records], fh, indent=2)
