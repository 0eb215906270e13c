"""Two-qubit state primitives: Bell basis, pair states, measurement.

Matrices are plain complex ``numpy`` arrays. Functions that make sense on
stacks accept a leading batch axis (``(..., 4, 4)``).

Qubit ordering for two-pair (16x16) operators is A1, B1, A2, B2 throughout,
so ``rho_pair = kron(rho_1, rho_2)`` with pair 1 = (A1, B1).
"""
from __future__ import annotations

import numpy as np

HERMITIAN_TOL = 1e-10
TRACE_TOL = 1e-10
PSD_TOL = 1e-10
DEGENERATE_PROB = 1e-14

_S = 1 / np.sqrt(2)

#: Columns are the Bell states |1>..|4> in the computational basis
#: |00>, |01>, |10>, |11> (first qubit = A).
BELL = np.array(
    [
        [0, 0, _S, _S],
        [_S, _S, 0, 0],
        [-_S, _S, 0, 0],
        [0, 0, -_S, _S],
    ],
    dtype=complex,
)

I2 = np.eye(2, dtype=complex)
I4 = np.eye(4, dtype=complex)
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
#: sigma_y (x) sigma_y, the spin-flip used by the concurrence.
YY = np.kron(SIGMA_Y, SIGMA_Y)


class InvalidStateError(ValueError):
    """Input matrix violates a density-matrix or Hermiticity requirement."""


class DegenerateOutcomeError(ArithmeticError):
    """A measurement outcome or projection has (numerically) zero probability."""


def dagger(m: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(m, -1, -2))


def bell_projector(k: int) -> np.ndarray:
    """|k><k| for the Bell state k in {1, 2, 3, 4}."""
    v = BELL[:, k - 1]
    return np.outer(v, v.conj())


def is_hermitian(m: np.ndarray, tol: float = HERMITIAN_TOL) -> bool:
    return bool(np.max(np.abs(m - dagger(m)), initial=0.0) <= tol)


def check_density_matrix(rho: np.ndarray, tol: float = HERMITIAN_TOL) -> np.ndarray:
    """Validate a (stack of) 4x4 density matrices and return it as complex.

    Raises
    ------
    InvalidStateError
        If any matrix is not Hermitian, not unit-trace or has an eigenvalue
        below ``-tol``.
    """
    rho = np.asarray(rho, dtype=complex)
    if rho.shape[-2:] != (4, 4):
        raise InvalidStateError(f"expected 4x4 matrices, got shape {rho.shape}")
    if not is_hermitian(rho, tol):
        raise InvalidStateError("matrix is not Hermitian")
    tr = np.trace(rho, axis1=-2, axis2=-1)
    if np.max(np.abs(tr - 1), initial=0.0) > TRACE_TOL:
        raise InvalidStateError("trace differs from 1")
    if np.min(np.linalg.eigvalsh(rho)) < -tol:
        raise InvalidStateError("matrix is not positive semidefinite")
    return rho


def computational_to_bell(rho: np.ndarray) -> np.ndarray:
    """Bell-basis coefficient table ``r[i-1, j-1] = <i|rho|j>``."""
    return dagger(BELL) @ rho @ BELL


def bell_to_computational(r: np.ndarray, validate: bool = True) -> np.ndarray:
    """Density matrix ``sum_ij r_ij |i><j|`` in the computational basis.

    ``r`` is the 4x4 table of Bell coefficients (1-based in the physics,
    0-based here). With ``validate`` the table must be Hermitian with unit
    trace.
    """
    r = np.asarray(r, dtype=complex)
    if validate:
        if not is_hermitian(r):
            raise InvalidStateError("Bell coefficient table is not Hermitian")
        tr = np.trace(r, axis1=-2, axis2=-1)
        if np.max(np.abs(tr - 1), initial=0.0) > TRACE_TOL:
            raise InvalidStateError("Bell coefficients do not sum to 1")
    return BELL @ r @ dagger(BELL)


def bell_diagonal_state(weights) -> np.ndarray:
    """``sum_i r_i |i><i|`` in the computational basis."""
    return bell_to_computational(np.diag(np.asarray(weights, dtype=complex)))


def werner_state(r1: float) -> np.ndarray:
    """``r1 |1><1| + (1 - r1)/3 (I - |1><1|)``."""
    rest = (1 - r1) / 3
    return bell_diagonal_state([r1, rest, rest, rest])


def tensor(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Two-pair state ``a (x) b`` with ordering A1, B1, A2, B2.

    Works on stacks: shapes ``(..., 4, 4)`` broadcast together.
    """
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    out = a[..., :, None, :, None] * b[..., None, :, None, :]
    return out.reshape(out.shape[:-4] + (16, 16))


def partial_trace_second_pair(s: np.ndarray) -> np.ndarray:
    """Trace out (A2, B2) from a (stack of) 16x16 operators."""
    s = np.asarray(s)
    t = s.reshape(s.shape[:-2] + (4, 4, 4, 4))
    return np.einsum("...iaja->...ij", t)


def outcome_projector(k: int) -> np.ndarray:
    """P_k = I_(A1B1) (x) |mn><mn|_(A2B2) for outcome k = 2m + n + 1."""
    e = np.zeros((4, 4), dtype=complex)
    e[k - 1, k - 1] = 1
    return np.kron(I4, e)


def outcome_blocks(s: np.ndarray) -> np.ndarray:
    """Unnormalised pair-1 states ``Tr_2{P_k s P_k}`` for all four outcomes.

    Returns shape ``(..., 4, 4, 4)`` with the outcome index first after the
    batch axes. Their traces are the outcome probabilities.
    """
    s = np.asarray(s)
    t = s.reshape(s.shape[:-2] + (4, 4, 4, 4))
    # t[..., a, k, b, l]; keep k == l
    return np.moveaxis(np.diagonal(t, axis1=-3, axis2=-1), -1, -3)


def measure_and_collapse(s: np.ndarray, k: int) -> tuple[np.ndarray | None, float]:
    """Measure (A2, B2) in the computational basis and keep outcome ``k``.

    Returns ``(state, probability)``. When the probability is below
    ``DEGENERATE_PROB`` the state is undefined and ``None`` is returned;
    callers decide how to treat that outcome.
    """
    if k not in (1, 2, 3, 4):
        raise ValueError(f"outcome index must be in 1..4, got {k}")
    block = outcome_blocks(s)[k - 1]
    p = float(np.real(np.trace(block)))
    if p < DEGENERATE_PROB:
        return None, p
    return block / p, p


def hermitian_eigenvalues(m: np.ndarray) -> np.ndarray:
    """Eigenvalues of a Hermitian matrix, sorted in descending order."""
    m = np.asarray(m, dtype=complex)
    if not is_hermitian(m, 1e-10 * max(1.0, float(np.max(np.abs(m), initial=0.0)))):
        raise InvalidStateError("matrix is not Hermitian")
    return np.linalg.eigvalsh(m)[..., ::-1]


def general_eigenvalues_4x4(m: np.ndarray) -> np.ndarray:
    """All four eigenvalues of a general complex 4x4 matrix (unsorted)."""
    m = np.asarray(m, dtype=complex)
    if m.shape[-2:] != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got shape {m.shape}")
    return np.linalg.eigvals(m)


def local_unitary(ua: np.ndarray, ub: np.ndarray) -> np.ndarray:
    """``ua (x) ub`` acting on a single pair (A, B)."""
    return np.kron(ua, ub)


def single_qubit_op(u: np.ndarray, qubit: int) -> np.ndarray:
    """Embed a one-qubit gate on ``qubit`` (0=A1, 1=B1, 2=A2, 3=B2) into 16x16."""
    ops = [I2] * 4
    ops[qubit] = np.asarray(u, dtype=complex)
    out = ops[0]
    for op in ops[1:]:
        out = np.kron(out, op)
    return out


def cnot(control: int, target: int) -> np.ndarray:
    """16x16 CNOT between two of the four qubits."""
    p0 = np.diag([1, 0]).astype(complex)
    p1 = np.diag([0, 1]).astype(complex)
    return single_qubit_op(p0, control) + single_qubit_op(p1, control) @ single_qubit_op(
        SIGMA_X, target
    )


#: U_CNOT^(A1->A2) (x) U_CNOT^(B1->B2)
BILATERAL_CNOT = cnot(0, 2) @ cnot(1, 3)


def _node_permutation() -> np.ndarray:
    """Permutation matrix mapping (A1, A2, B1, B2) ordering onto (A1, B1, A2, B2)."""
    p = np.zeros((16, 16))
    for a1 in range(2):
        for a2 in range(2):
            for b1 in range(2):
                for b2 in range(2):
                    p[8 * a1 + 4 * b1 + 2 * a2 + b2, 8 * a1 + 4 * a2 + 2 * b1 + b2] = 1
    return p


NODE_PERM = _node_permutation()


def node_operator(op_a: np.ndarray, op_b: np.ndarray) -> np.ndarray:
    """``op_a^(A1 A2) (x) op_b^(B1 B2)`` expressed in A1, B1, A2, B2 ordering."""
    return NODE_PERM @ np.kron(op_a, op_b) @ NODE_PERM.T
