"""Hit-and-run sampling of two-qubit density matrices.

A state is written as ``rho = I/4 + sum_i a_i B_i`` where ``B_1..B_15`` are the
traceless normalised Pauli products ``sigma_i (x) sigma_j / 2``. The Bloch
vector ``a`` ranges over a convex body K that contains the origin (the
maximally mixed state) and sits inside the ball of radius sqrt(3)/2. The chain
picks an isotropic direction and then a uniform point on the chord through K,
found by shrinking a bracketing interval after each rejected proposal.
"""
from __future__ import annotations

import copy
import itertools
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numba
import numpy as np

from .quantum import I2, SIGMA_X, SIGMA_Y, SIGMA_Z

RADIUS = np.sqrt(3) / 2
MIN_INTERVAL = 1e-15
GENERATOR_NAME = "numpy.random.PCG64 (numba Generator)"

DUMP_MAGIC = b"PURIKITA"
DUMP_VERSION = 1
# magic, version, reserved, count, seed
_HEADER = struct.Struct("<8sIIQQ")
assert _HEADER.size == 32


class ChainStallError(RuntimeError):
    """The shrinking interval collapsed without finding a point inside K."""


def basis_matrices() -> np.ndarray:
    """The 16 orthonormal Hermitian basis matrices, shape ``(16, 4, 4)``.

    The first 15 are traceless Pauli products; the last is ``I/2``.
    """
    paulis = (I2, SIGMA_X, SIGMA_Y, SIGMA_Z)
    mats = [np.kron(p, q) / 2 for p, q in itertools.product(paulis, repeat=2)]
    return np.array(mats[1:] + mats[:1])


_BASIS = np.ascontiguousarray(basis_matrices()[:15])


def bloch_to_density(a: np.ndarray) -> np.ndarray:
    """``I/4 + sum_i a_i B_i`` for a vector or a stack of vectors."""
    a = np.asarray(a, dtype=float)
    return np.eye(4, dtype=complex) / 4 + np.einsum("...i,ijk->...jk", a, _BASIS)


def density_to_bloch(rho: np.ndarray) -> np.ndarray:
    """Inverse of :func:`bloch_to_density` (``a_i = Tr{B_i rho}``)."""
    rho = np.asarray(rho, dtype=complex)
    return np.real(np.einsum("ijk,...kj->...i", _BASIS, rho))


def _elementary_symmetric(p2, p3, p4):
    # Newton identities for a unit-trace 4x4 matrix, e1 = 1.
    e2 = (1 - p2) / 2
    e3 = (1 - 3 * p2 + 2 * p3) / 6
    e4 = (1 - 6 * p2 + 8 * p3 + 3 * p2 * p2 - 6 * p4) / 24
    return e2, e3, e4


def membership(a: np.ndarray) -> bool | np.ndarray:
    """Whether ``rho(a)`` is positive semidefinite.

    With unit trace, all eigenvalues are non-negative exactly when the
    characteristic-polynomial coefficients e2, e3, e4 are, and these follow
    from the trace powers Tr rho^2..Tr rho^4.
    """
    rho = bloch_to_density(a)
    rho2 = rho @ rho
    p2 = np.real(np.trace(rho2, axis1=-2, axis2=-1))
    p3 = np.real(np.einsum("...ij,...ji->...", rho2, rho))
    p4 = np.real(np.einsum("...ij,...ji->...", rho2, rho2))
    e2, e3, e4 = _elementary_symmetric(p2, p3, p4)
    ok = (e2 >= 0) & (e3 >= 0) & (e4 >= 0)
    return bool(ok) if np.ndim(ok) == 0 else ok


# ---------------------------------------------------------------------------
# compiled chain kernel


@numba.njit(cache=True, nogil=True)
def _trprod(x, y):
    s = 0.0
    for i in range(4):
        for j in range(4):
            s += (x[i, j] * y[j, i]).real
    return s


@numba.njit(cache=True, nogil=True)
def _matmul(x, y):
    out = np.zeros((4, 4), dtype=np.complex128)
    for i in range(4):
        for k in range(4):
            xik = x[i, k]
            for j in range(4):
                out[i, j] += xik * y[k, j]
    return out


@numba.njit(cache=True, nogil=True)
def _combine(coef, basis, shift):
    out = np.zeros((4, 4), dtype=np.complex128)
    for i in range(4):
        out[i, i] = shift
    for n in range(15):
        c = coef[n]
        for i in range(4):
            for j in range(4):
                out[i, j] += c * basis[n, i, j]
    return out


@numba.njit(cache=True, nogil=True)
def _line_polys(a, x, basis):
    """Coefficients of Tr rho(l)^k, k = 2, 3, 4, along rho(a + l x), lowest order first."""
    r = _combine(a, basis, 0.25)
    m = _combine(x, basis, 0.0)
    r2 = _matmul(r, r)
    m2 = _matmul(m, m)
    rm = _matmul(r, m)
    p2 = np.array([_trprod(r, r), 2.0 * _trprod(r, m), _trprod(m, m)])
    p3 = np.array([_trprod(r2, r), 3.0 * _trprod(r2, m), 3.0 * _trprod(r, m2), _trprod(m2, m)])
    p4 = np.array(
        [
            _trprod(r2, r2),
            4.0 * _trprod(r2, rm),
            4.0 * _trprod(r2, m2) + 2.0 * _trprod(rm, rm),
            4.0 * _trprod(rm, m2),
            _trprod(m2, m2),
        ]
    )
    return p2, p3, p4


@numba.njit(cache=True, nogil=True)
def _horner(c, t):
    s = 0.0
    for i in range(c.shape[0] - 1, -1, -1):
        s = s * t + c[i]
    return s


@numba.njit(cache=True, nogil=True)
def _inside(p2c, p3c, p4c, t):
    p2 = _horner(p2c, t)
    p3 = _horner(p3c, t)
    p4 = _horner(p4c, t)
    e2 = (1.0 - p2) / 2.0
    e3 = (1.0 - 3.0 * p2 + 2.0 * p3) / 6.0
    e4 = (1.0 - 6.0 * p2 + 8.0 * p3 + 3.0 * p2 * p2 - 6.0 * p4) / 24.0
    return e2 >= 0.0 and e3 >= 0.0 and e4 >= 0.0


@numba.njit(cache=True, nogil=True)
def _step(rng, a, basis, radius, min_width):
    """Advance ``a`` in place by one hit-and-run move. Returns False on stall."""
    x = rng.standard_normal(15)
    x /= np.sqrt(np.sum(x * x))
    p2c, p3c, p4c = _line_polys(a, x, basis)
    lo = -radius
    hi = radius
    while True:
        if hi - lo < min_width:
            return False
        t = rng.uniform(lo, hi)
        if _inside(p2c, p3c, p4c, t):
            for i in range(15):
                a[i] += t * x[i]
            return True
        if t > 0.0:
            hi = t
        else:
            lo = t


@numba.njit(cache=True, nogil=True)
def _advance(rng, a, basis, skip, n_out, thinning, out, radius, min_width):
    """Run ``skip`` unrecorded moves, then record ``n_out`` states every ``thinning`` moves.

    Returns the number of moves made, or ``-1 - moves`` if the chain stalled.
    """
    moves = 0
    for _ in range(skip):
        if not _step(rng, a, basis, radius, min_width):
            return -1 - moves
        moves += 1
    for k in range(n_out):
        for _ in range(thinning):
            if not _step(rng, a, basis, radius, min_width):
                return -1 - moves
            moves += 1
        for i in range(15):
            out[k, i] = a[i]
    return moves


def _run(rng, a, skip, n_out, thinning) -> tuple[np.ndarray, int]:
    out = np.empty((n_out, 15))
    moves = _advance(rng, a, _BASIS, skip, n_out, thinning, out, RADIUS, MIN_INTERVAL)
    if moves < 0:
        raise ChainStallError(f"hit-and-run interval collapsed after {-1 - moves} moves")
    return out, moves


# ---------------------------------------------------------------------------
# public chain interface


@dataclass(frozen=True)
class ChainConfig:
    seed: int = 0
    burn_in: int = 1000
    thinning: int = 40
    n_samples: int = 1000

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")


@dataclass
class ChainState:
    current: np.ndarray = field(default_factory=lambda: np.zeros(15))
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    accepted_steps: int = 0

    @classmethod
    def start(cls, seed: int) -> "ChainState":
        """Chain at the maximally mixed state with a PCG64 stream seeded by ``seed``."""
        return cls(np.zeros(15), np.random.default_rng(seed), 0)


def hit_and_run_step(state: ChainState) -> ChainState:
    """One hit-and-run move; the input state is left untouched."""
    rng = copy.deepcopy(state.rng)
    a = np.array(state.current, dtype=float, copy=True)
    _run(rng, a, 1, 0, 1)
    return ChainState(a, rng, state.accepted_steps + 1)


def sample_bloch(cfg: ChainConfig) -> np.ndarray:
    """Bloch vectors of one chain, shape ``(n_samples, 15)``."""
    rng = np.random.default_rng(cfg.seed)
    out, _ = _run(rng, np.zeros(15), cfg.burn_in, cfg.n_samples, cfg.thinning)
    return out


def sample_states(cfg: ChainConfig, chunk: int = 10_000) -> Iterator[np.ndarray]:
    """Yield the chain's density matrices one at a time."""
    rng = np.random.default_rng(cfg.seed)
    a = np.zeros(15)
    skip = cfg.burn_in
    remaining = cfg.n_samples
    while remaining:
        n = min(chunk, remaining)
        block, _ = _run(rng, a, skip, n, cfg.thinning)
        skip = 0
        remaining -= n
        yield from bloch_to_density(block)


def sample_chains(
    n_per_chain: int,
    chains: int = 1,
    seed: int = 0,
    burn_in: int = 1000,
    thinning: int = 40,
    threads: int = 1,
) -> np.ndarray:
    """Independent chains seeded ``seed + index``, concatenated in chain order."""
    cfgs = [ChainConfig(seed + i, burn_in, thinning, n_per_chain) for i in range(chains)]
    if threads > 1 and chains > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(sample_bloch, cfgs))
    else:
        parts = [sample_bloch(c) for c in cfgs]
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# binary dump


def write_dump(path, vectors: np.ndarray, seed: int) -> None:
    """Write Bloch vectors as little-endian float64 records of 15 values."""
    vectors = np.ascontiguousarray(vectors, dtype="<f8")
    if vectors.ndim != 2 or vectors.shape[1] != 15:
        raise ValueError("expected an (n, 15) array of Bloch vectors")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, 0, len(vectors), seed))
        fh.write(vectors.tobytes())


def read_dump(path) -> tuple[np.ndarray, dict]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, _, count, seed = _HEADER.unpack_from(data)
    if magic != DUMP_MAGIC:
        raise ValueError(f"{path}: not a purikit dump")
    if version != DUMP_VERSION:
        raise ValueError(f"{path}: unsupported dump version {version}")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if body.size != 15 * count:
        raise ValueError(f"{path}: expected {count} records, found {body.size / 15:g}")
    return body.reshape(count, 15).astype(float), {"version": version, "count": count, "seed": seed}
