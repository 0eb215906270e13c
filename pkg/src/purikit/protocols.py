"""Fixed recurrence purification protocols: Bennett, Deutsch, MFI and CNOT.

Each protocol exists twice: as a closed-form map on Bell coefficients
(vectorised over stacks of 4x4 tables ``r`` with ``r[i-1, j-1] = <i|rho|j>``)
and as an explicit 16x16 circuit in :func:`circuit_oracle`. The circuit is the
reference the closed forms are tested against.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import metrics
from .quantum import (
    BELL,
    BILATERAL_CNOT,
    I2,
    SIGMA_X,
    SIGMA_Y,
    DegenerateOutcomeError,
    bell_projector,
    computational_to_bell,
    dagger,
    node_operator,
    outcome_blocks,
    single_qubit_op,
    tensor,
    werner_state,
)

DEGENERATE = 1e-14


class ProtocolKind(str, enum.Enum):
    BENNETT = "bennett"
    DEUTSCH = "deutsch"
    MFI = "mfi"
    CNOT = "cnot"


class Attractor(enum.IntEnum):
    NONE = 0
    BELL_1 = 1
    BELL_2 = 2
    BELL_4 = 4


@dataclass(frozen=True)
class StepResult:
    state: np.ndarray | None
    success_probability: float


# local unitaries u_1..u_4 and K_j = u_j (x) u_j
U1 = (I2 + 1j * SIGMA_X) / np.sqrt(2)
U2 = (I2 - 1j * SIGMA_Y) / np.sqrt(2)
U3 = np.diag([1j, 1]).astype(complex)
U4 = I2.copy()
LOCAL_U = (U1, U2, U3, U4)
K = tuple(np.kron(u, u) for u in LOCAL_U)


def v_rotation(n: int) -> np.ndarray:
    """``v_n = (i|0><0| + |1><1|) sigma_x^n``."""
    return U3 @ np.linalg.matrix_power(SIGMA_X, n % 2)


def _kind(kind) -> ProtocolKind:
    return kind if isinstance(kind, ProtocolKind) else ProtocolKind(str(kind).lower())


# ---------------------------------------------------------------------------
# preprocessing


def _k_average(rho: np.ndarray) -> np.ndarray:
    return sum(dagger(k) @ dagger(k) @ rho @ k @ k for k in K)


def bell_diagonalize(rho: np.ndarray) -> np.ndarray:
    """``1/4 sum_i K_i^+ K_i^+ rho K_i K_i``: drops all Bell off-diagonals."""
    return _k_average(np.asarray(rho, dtype=complex)) / 4


def twirl_to_werner(rho: np.ndarray) -> np.ndarray:
    """Twirl to Werner form, keeping the |1> weight."""
    inner = _k_average(np.asarray(rho, dtype=complex))
    return sum(dagger(K[j]) @ inner @ K[j] for j in range(3)) / 12


# ---------------------------------------------------------------------------
# closed-form maps


def bennett_step(r1):
    """One Bennett round on a Werner weight ``r1``; returns ``(r1', p_success)``."""
    r1 = np.asarray(r1, dtype=float)
    den = 5 - 4 * r1 + 8 * r1**2
    out = (1 - 2 * r1 + 10 * r1**2) / den, den / 9
    if out[0].ndim == 0:
        return float(out[0]), float(out[1])
    return out


def deutsch_step(r):
    """One Deutsch round on Bell-diagonal weights ``(r1, r2, r3, r4)`` (last axis)."""
    r = np.asarray(r, dtype=float)
    r1, r2, r3, r4 = np.moveaxis(r, -1, 0)
    c = (r1 + r4) ** 2 + (r2 + r3) ** 2
    out = np.stack([2 * r2 * r3, r2**2 + r3**2, 2 * r1 * r4, r1**2 + r4**2], axis=-1) / c[..., None]
    return out, (float(c) if c.ndim == 0 else c)


def _table(r, i, j):
    return r[..., i - 1, j - 1]


def mfi_map(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form MFI map on Bell tables; returns ``(r', D)``, ``P_s = D / 2``.

    Entries where ``D`` vanishes are returned as NaN.
    """
    r = np.asarray(r, dtype=complex)
    t = lambda i, j: _table(r, i, j)  # noqa: E731
    d = np.real(
        (t(1, 1) + t(3, 3)) ** 2
        + (t(2, 2) + t(4, 4)) ** 2
        - (t(1, 3) + t(3, 1)) ** 2
        - (t(2, 4) + t(4, 2)) ** 2
    )
    with np.errstate(invalid="ignore"):
        ok = d > DEGENERATE
        dd = np.where(ok, d, np.nan)
        out = np.zeros_like(r)
        out[..., 0, 0] = np.real(t(1, 1) ** 2 + t(3, 3) ** 2 - t(1, 3) ** 2 - t(3, 1) ** 2) / dd
        out[..., 1, 1] = np.real(t(2, 2) ** 2 + t(4, 4) ** 2 - t(2, 4) ** 2 - t(4, 2) ** 2) / dd
        out[..., 2, 2] = 2 * np.real(t(2, 2) * t(4, 4) - np.abs(t(2, 4)) ** 2) / dd
        out[..., 3, 3] = 2 * np.real(t(1, 1) * t(3, 3) - np.abs(t(1, 3)) ** 2) / dd
        r12 = (t(1, 2) ** 2 + t(3, 4) ** 2 - t(1, 4) ** 2 - t(3, 2) ** 2) / dd
        r34 = 2 * (t(2, 1) * t(4, 3) - t(2, 3) * t(4, 1)) / dd
        out[..., 0, 1], out[..., 1, 0] = r12, np.conj(r12)
        out[..., 2, 3], out[..., 3, 2] = r34, np.conj(r34)
    return out, d


def cnot_map(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form CNOT-protocol map (outcome m = n = 1); returns ``(r', E)``, ``P_s = E / 2``."""
    r = np.asarray(r, dtype=complex)
    t = lambda i, j: _table(r, i, j)  # noqa: E731
    e = np.real(
        (t(1, 1) + t(4, 4)) ** 2
        + (t(2, 2) + t(3, 3)) ** 2
        + (t(1, 4) - t(4, 1)) ** 2
        + (t(2, 3) - t(3, 2)) ** 2
    )
    with np.errstate(invalid="ignore"):
        ok = e > DEGENERATE
        ee = np.where(ok, e, np.nan)
        out = np.zeros_like(r)
        out[..., 0, 0] = 2 * np.real(t(2, 2) * t(3, 3) - np.abs(t(2, 3)) ** 2) / ee
        out[..., 1, 1] = np.real(t(2, 2) ** 2 + t(3, 3) ** 2 + t(2, 3) ** 2 + t(3, 2) ** 2) / ee
        out[..., 2, 2] = 2 * np.real(t(1, 1) * t(4, 4) - np.abs(t(1, 4)) ** 2) / ee
        out[..., 3, 3] = np.real(t(1, 1) ** 2 + t(4, 4) ** 2 + t(1, 4) ** 2 + t(4, 1) ** 2) / ee
        r13 = 2 * (t(2, 4) * t(3, 1) - t(2, 1) * t(3, 4)) / ee
        r24 = (t(2, 1) ** 2 + t(3, 1) ** 2 + t(2, 4) ** 2 + t(3, 4) ** 2) / ee
        out[..., 0, 2], out[..., 2, 0] = r13, np.conj(r13)
        out[..., 1, 3], out[..., 3, 1] = r24, np.conj(r24)
    return out, e


def _to_state(r: np.ndarray) -> np.ndarray:
    return BELL @ r @ dagger(BELL)


def mfi_step(rho: np.ndarray) -> StepResult:
    r_new, d = mfi_map(computational_to_bell(np.asarray(rho, dtype=complex)))
    if not d > DEGENERATE:
        raise DegenerateOutcomeError("MFI projector annihilates the input pair")
    return StepResult(_to_state(r_new), float(d) / 2)


def cnot_step(rho: np.ndarray, keep: int = 1) -> StepResult:
    """One round of the CNOT protocol.

    ``keep=1`` keeps the m = n = 1 outcome (the headline protocol). ``keep=0``
    keeps m = n = 0 instead; it has no closed form and is evaluated on the
    circuit.
    """
    if keep == 0:
        return _cnot_circuit(np.asarray(rho, dtype=complex), keep=0)
    if keep != 1:
        raise ValueError("keep must be 0 or 1")
    r_new, e = cnot_map(computational_to_bell(np.asarray(rho, dtype=complex)))
    if not e > DEGENERATE:
        raise DegenerateOutcomeError("kept CNOT outcome has zero probability")
    return StepResult(_to_state(r_new), float(e) / 2)


# ---------------------------------------------------------------------------
# circuit reference


def _evolve(u: np.ndarray, s: np.ndarray) -> np.ndarray:
    return u @ s @ dagger(u)


def _keep(s: np.ndarray, outcomes) -> tuple[np.ndarray, float]:
    blocks = outcome_blocks(s)
    kept = sum(blocks[k - 1] for k in outcomes)
    return kept, float(np.real(np.trace(kept)))


def _normalise(kept, p, what):
    if p < DEGENERATE:
        raise DegenerateOutcomeError(f"{what}: kept outcomes have zero probability")
    return kept / p


_A_Y = np.kron(SIGMA_Y, I2)
_DEUTSCH_ROT = (
    single_qubit_op(dagger(U1), 0)
    @ single_qubit_op(dagger(U1), 2)
    @ single_qubit_op(U1, 1)
    @ single_qubit_op(U1, 3)
)
_BENNETT_ROT = single_qubit_op(SIGMA_Y, 0) @ single_qubit_op(SIGMA_Y, 2)
_M = bell_projector(1) + bell_projector(3)
MFI_PROJECTOR = node_operator(_M, _M)


def _bennett_circuit(rho):
    w = twirl_to_werner(rho)
    s = _evolve(BILATERAL_CNOT @ _BENNETT_ROT, tensor(w, w))
    kept, p = _keep(s, (1, 4))
    out = _evolve(_A_Y, _normalise(kept, p, "Bennett"))
    # re-twirl so the output is the Werner state the scalar map describes
    return StepResult(twirl_to_werner(out), p)


def _deutsch_circuit(rho):
    b = bell_diagonalize(rho)
    s = _evolve(BILATERAL_CNOT @ _DEUTSCH_ROT, tensor(b, b))
    kept, p = _keep(s, (1, 4))
    return StepResult(_normalise(kept, p, "Deutsch"), p)


def _cnot_circuit(rho, keep=1):
    s = _evolve(BILATERAL_CNOT @ _DEUTSCH_ROT, tensor(rho, rho))
    kept, p = _keep(s, (4,) if keep == 1 else (1,))
    return StepResult(_normalise(kept, p, "CNOT"), p)


def _mfi_circuit(rho):
    s = tensor(rho, rho)
    s = MFI_PROJECTOR @ s @ dagger(MFI_PROJECTOR)
    acceptance = float(np.real(np.trace(s)))
    s = _normalise(s, acceptance, "MFI")
    blocks = outcome_blocks(s)
    total = np.zeros((4, 4), dtype=complex)
    for m in (0, 1):
        for n in (0, 1):
            w = np.kron(v_rotation(m), v_rotation(n + 1))
            total += _evolve(w, blocks[2 * m + n])
    # the four corrected outcomes coincide, each with probability 1/4
    return StepResult(total / np.real(np.trace(total)), acceptance)


def circuit_oracle(kind, rho: np.ndarray) -> StepResult:
    """Apply one protocol round as explicit 16x16 operations on ``rho (x) rho``.

    For Bennett the output is re-twirled to Werner form; for Deutsch the input
    is Bell-diagonalised first. The returned probability is the total weight
    of the kept outcomes (for MFI: the projector acceptance).
    """
    rho = np.asarray(rho, dtype=complex)
    kind = _kind(kind)
    if kind is ProtocolKind.BENNETT:
        return _bennett_circuit(rho)
    if kind is ProtocolKind.DEUTSCH:
        return _deutsch_circuit(rho)
    if kind is ProtocolKind.MFI:
        return _mfi_circuit(rho)
    return _cnot_circuit(rho)


# ---------------------------------------------------------------------------
# classification and iteration


def purifiable(kind, rho: np.ndarray) -> Attractor:
    """Asymptotic attractor implied by the protocol's purification condition."""
    kind = _kind(kind)
    r = computational_to_bell(np.asarray(rho, dtype=complex))
    for k, ok in metrics.attractor_masks(kind.value, r).items():
        if bool(ok):
            return Attractor(k)
    return Attractor.NONE


def closed_form_step(kind, rho: np.ndarray) -> StepResult:
    """One round via the closed-form map, including the protocol's preprocessing."""
    kind = _kind(kind)
    rho = np.asarray(rho, dtype=complex)
    if kind is ProtocolKind.BENNETT:
        r1 = float(np.real(computational_to_bell(rho)[0, 0]))
        r1n, p = bennett_step(r1)
        return StepResult(werner_state(r1n), p)
    if kind is ProtocolKind.DEUTSCH:
        d = np.real(np.diag(computational_to_bell(rho)))
        dn, p = deutsch_step(d)
        return StepResult(_to_state(np.diag(dn).astype(complex)), p)
    if kind is ProtocolKind.MFI:
        return mfi_step(rho)
    return cnot_step(rho)


def iterate_tables(kind, r: np.ndarray, n: int):
    """Iterate a protocol on a stack of Bell tables.

    Returns ``(concurrence, success)`` arrays of shape ``(n + 1, N)``; row 0 is
    the input. Once a trajectory reaches zero concurrence (or a degenerate
    step) it is frozen at concurrence 0 and success probability 0. Row 0
    success is 1 for entangled inputs and 0 otherwise.
    """
    conc, succ, _ = iterate_with_history(kind, r, n, keep_history=False)
    return conc, succ


def iterate_with_history(kind, r: np.ndarray, n: int, keep_history: bool = True):
    """Like :func:`iterate_tables`, also returning the Bell tables after each round.

    Frozen trajectories are reported as the maximally mixed table.
    """
    if n < 0:
        raise ValueError("iteration count must be >= 0")
    kind = _kind(kind)
    r = np.array(r, dtype=complex).reshape(-1, 4, 4)
    alive = np.ones(len(r), dtype=bool)
    c0 = np.asarray(metrics.concurrence_bell_table(r), dtype=float).reshape(-1)
    alive &= c0 > 0
    conc = [np.where(alive, c0, 0.0)]
    succ = [alive.astype(float)]
    history = [r.copy()] if keep_history else None

    if kind is ProtocolKind.BENNETT:
        # Werner closure: twirling keeps only r1
        w1 = np.real(r[:, 0, 0]).copy()
        r = _werner_tables(w1)
    elif kind is ProtocolKind.DEUTSCH:
        r = _diag_tables(np.real(np.diagonal(r, axis1=1, axis2=2)))

    for _ in range(n):
        if kind is ProtocolKind.BENNETT:
            w1, p = bennett_step(np.real(r[:, 0, 0]))
            r = _werner_tables(w1)
        elif kind is ProtocolKind.DEUTSCH:
            dn, p = deutsch_step(np.real(np.diagonal(r, axis1=1, axis2=2)))
            r = _diag_tables(dn)
        elif kind is ProtocolKind.MFI:
            r, d = mfi_map(r)
            p = d / 2
        else:
            r, e = cnot_map(r)
            p = e / 2
        finite = np.all(np.isfinite(r), axis=(1, 2))
        alive &= finite
        r = np.where(alive[:, None, None], r, _MIXED)
        c = np.asarray(metrics.concurrence_bell_table(r), dtype=float).reshape(-1)
        alive &= c > 0
        conc.append(np.where(alive, c, 0.0))
        succ.append(np.where(alive, p, 0.0))
        if keep_history:
            history.append(np.where(alive[:, None, None], r, _MIXED))
    return np.array(conc), np.array(succ), history


_MIXED = np.eye(4, dtype=complex) / 4


def _werner_tables(w1):
    w1 = np.asarray(w1, dtype=float)
    rest = (1 - w1) / 3
    return _diag_tables(np.stack([w1, rest, rest, rest], axis=-1))


def _diag_tables(d):
    d = np.asarray(d, dtype=float)
    out = np.zeros(d.shape[:-1] + (4, 4), dtype=complex)
    idx = np.arange(4)
    out[..., idx, idx] = d
    return out


def iterate(kind, rho: np.ndarray, n: int) -> list[StepResult]:
    """Apply ``n`` protocol rounds to a single state.

    Frozen trajectories report the maximally mixed state with probability 0
    (their concurrence is 0 from then on).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    r = computational_to_bell(np.asarray(rho, dtype=complex))
    conc, succ, hist = iterate_with_history(kind, r[None], n)
    return [StepResult(_to_state(hist[i][0]), float(succ[i, 0])) for i in range(1, n + 1)]
