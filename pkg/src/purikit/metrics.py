"""Concurrence, conditional fidelities and sample statistics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .quantum import BELL, YY, computational_to_bell, dagger

#: Spin-flip eigenvalues in [-EIG_CLAMP, 0) are round-off and clamped to 0.
EIG_CLAMP = 1e-9
#: Concurrence values below this are reported as exactly zero (round-off at the separable boundary).
ZERO_CONCURRENCE = 1e-12


class NumericalFailure(ArithmeticError):
    """Raised when a quantity that must be non-negative comes out clearly negative."""


def _sqrtm_psd(rho: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(rho)
    if np.min(w, initial=0.0) < -EIG_CLAMP:
        raise NumericalFailure(f"density matrix eigenvalue {np.min(w):.3e} below -{EIG_CLAMP}")
    w = np.sqrt(np.clip(w, 0.0, None))
    return (v * w[..., None, :]) @ np.conj(np.swapaxes(v, -1, -2))


def spin_flip_roots(rho: np.ndarray) -> np.ndarray:
    """Square roots of the eigenvalues of ``rho (Y(x)Y) rho* (Y(x)Y)``, descending.

    They are computed as the singular values of ``sqrt(rho) (Y(x)Y) sqrt(rho)*``,
    which has the same spectrum as the non-Hermitian product but stays
    well-conditioned for rank-deficient states.
    """
    rho = np.asarray(rho, dtype=complex)
    sq = _sqrtm_psd(rho)
    return np.linalg.svd(sq @ YY @ np.conj(sq), compute_uv=False)


def concurrence(rho: np.ndarray) -> np.ndarray | float:
    """Wootters concurrence ``max(0, l1 - l2 - l3 - l4)``; vectorised over stacks."""
    lam = spin_flip_roots(rho)
    c = lam[..., 0] - lam[..., 1] - lam[..., 2] - lam[..., 3]
    c = np.clip(c, 0.0, 1.0)
    c = np.where(c < ZERO_CONCURRENCE, 0.0, c)
    return float(c) if np.ndim(c) == 0 else c


def concurrence_bell_table(r: np.ndarray) -> np.ndarray | float:
    """Concurrence of states given by Bell coefficient tables."""
    return concurrence(BELL @ np.asarray(r) @ dagger(BELL))


# ---------------------------------------------------------------------------
# purifiability predicates, expressed on Bell coefficient tables r (0-based)


def _diag(r):
    return tuple(np.real(r[..., i, i]) for i in range(4))


def bennett_condition(r) -> np.ndarray:
    r1 = np.real(r[..., 0, 0])
    return 2 * r1 - 1 > 0


def deutsch_conditions(r) -> tuple[np.ndarray, np.ndarray]:
    """(branch to |4>, branch to |2>)."""
    r1, r2, r3, r4 = _diag(r)
    return (2 * r1 - 1) * (1 - 2 * r4) > 0, (2 * r2 - 1) * (1 - 2 * r3) > 0


def mfi_conditions(r) -> tuple[np.ndarray, np.ndarray]:
    """(branch to |1>, branch to |2>)."""
    r1, r2, r3, r4 = _diag(r)
    r13, r24 = r[..., 0, 2], r[..., 1, 3]
    c1 = (2 * r1 - 1) * (1 - 2 * r3) > -((2 * r13.imag) ** 2) - (2 * r24.real) ** 2
    c2 = (2 * r2 - 1) * (1 - 2 * r4) > -((2 * r24.imag) ** 2) - (2 * r13.real) ** 2
    return c1, c2


def cnot_conditions(r, keep_zero: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """(branch to |4>, branch to |2>).

    ``keep_zero`` selects the more restrictive conditions that apply when the
    m = n = 0 outcome is kept instead of m = n = 1.
    """
    r1, r2, r3, r4 = _diag(r)
    r14, r23 = r[..., 0, 3], r[..., 1, 2]
    b1 = (2 * r23.imag) ** 2 + (2 * r14.real) ** 2
    b2 = (2 * r14.imag) ** 2 + (2 * r23.real) ** 2
    if keep_zero:
        return (2 * r1 - 1) * (1 - 2 * r4) > b1, (2 * r2 - 1) * (1 - 2 * r3) > b2
    return (2 * r1 - 1) * (1 - 2 * r4) > -b1, (2 * r2 - 1) * (1 - 2 * r3) > -b2


#: Bell-state attractors per protocol, in the order the conditions are returned.
ATTRACTORS = {
    "bennett": (1,),
    "deutsch": (4, 2),
    "mfi": (1, 2),
    "cnot": (4, 2),
}


def attractor_masks(kind: str, r: np.ndarray) -> dict[int, np.ndarray]:
    """Map attractor label -> boolean mask of states whose condition holds."""
    kind = str(kind).lower()
    if kind == "bennett":
        conds = (bennett_condition(r),)
    elif kind == "deutsch":
        conds = deutsch_conditions(r)
    elif kind == "mfi":
        conds = mfi_conditions(r)
    elif kind == "cnot":
        conds = cnot_conditions(r)
    else:
        raise ValueError(f"unknown protocol {kind!r}")
    return dict(zip(ATTRACTORS[kind], conds))


@dataclass(frozen=True)
class FidelityRecord:
    kind: str
    attractor: int
    value: float


def conditional_fidelity(kind: str, rho: np.ndarray) -> list[FidelityRecord]:
    """Overlap with each attractor Bell state, zeroed when its condition fails."""
    r = computational_to_bell(np.asarray(rho, dtype=complex))
    masks = attractor_masks(kind, r)
    out = []
    for k, ok in masks.items():
        value = float(np.real(r[k - 1, k - 1])) if bool(ok) else 0.0
        out.append(FidelityRecord(str(kind).lower(), k, value))
    return out


def conditional_fidelities(kind: str, r: np.ndarray) -> dict[int, np.ndarray]:
    """Vectorised :func:`conditional_fidelity` on a stack of Bell tables."""
    masks = attractor_masks(kind, r)
    return {k: np.where(ok, np.real(r[..., k - 1, k - 1]), 0.0) for k, ok in masks.items()}


# ---------------------------------------------------------------------------
# statistics


def aggregate(values) -> tuple[float, float, float]:
    """Return ``(mean, sample_std, std_error)`` with the unbiased (N-1) variance."""
    v = np.asarray(values, dtype=float).ravel()
    n = v.size
    if n < 2:
        raise ValueError("need at least two values")
    mean = float(np.mean(v))
    std = float(np.sqrt(np.sum((v - mean) ** 2) / (n - 1)))
    return mean, std, std / np.sqrt(n)


@dataclass(frozen=True)
class IterationStats:
    iteration: int
    mean_concurrence: float
    concurrence_std: float
    concurrence_stderr: float
    mean_success: float
    success_std: float
    success_stderr: float
    n_nonzero: int

    @classmethod
    def from_values(cls, iteration: int, concurrences, success) -> "IterationStats":
        c = np.asarray(concurrences, dtype=float)
        mc, sc, ec = aggregate(c)
        mp, sp, ep = aggregate(success)
        return cls(iteration, mc, sc, ec, mp, sp, ep, int(np.count_nonzero(c > 0)))

    def as_dict(self) -> dict:
        return asdict(self)


def asymptotic_limit(kind: str, sample: np.ndarray) -> tuple[float, float]:
    """Infinite-iteration mean concurrence: 1 for purifiable states, 0 otherwise.

    ``kind`` is a protocol name or ``"ultimate"`` (every entangled state
    counts). ``sample`` is a stack of density matrices.
    """
    values = purifiable_indicator(kind, sample).astype(float)
    if values.size == 1:
        return float(values[0]), 0.0
    mean, _, err = aggregate(values)
    return mean, err


def purifiable_indicator(kind: str, sample: np.ndarray) -> np.ndarray:
    sample = np.asarray(sample, dtype=complex).reshape(-1, 4, 4)
    kind = str(kind).lower()
    if kind == "ultimate":
        return np.asarray(concurrence(sample)) > 0
    r = computational_to_bell(sample)
    masks = attractor_masks(kind, r)
    out = np.zeros(len(sample), dtype=bool)
    for m in masks.values():
        out |= m
    return out


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    exclude_zero: bool = True
    bin_count: int = field(init=False)

    def __post_init__(self):
        self.bin_count = len(self.counts)

    def rows(self):
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            yield float(lo), float(hi), int(c)


def histogram(values, bins: int = 50, exclude_zero: bool = True) -> Histogram:
    """Uniform bins on [0, 1]; half-open except the last, which includes 1."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    v = np.asarray(values, dtype=float).ravel()
    if exclude_zero:
        v = v[v > 0]
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(v, bins=edges)
    return Histogram(edges=edges, counts=counts, exclude_zero=exclude_zero)
