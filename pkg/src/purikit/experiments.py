"""Sample-level experiments: protocol trajectories, fidelities and histograms."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import metrics
from .metrics import Histogram, IterationStats
from .protocols import ProtocolKind, iterate_with_history
from .quantum import computational_to_bell

PROTOCOLS = ("bennett", "deutsch", "mfi", "cnot", "ultimate")
#: states per parallel work item; fixed so results do not depend on the thread count
BLOCK = 8192


def _map_blocks(fn, r: np.ndarray, threads: int):
    blocks = [r[i : i + BLOCK] for i in range(0, len(r), BLOCK)]
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, blocks))
    return [fn(b) for b in blocks]


def trajectories(kind: str, states: np.ndarray, iterations: int, threads: int = 1):
    """Concurrence and success arrays of shape ``(iterations + 1, N)``.

    ``kind = "ultimate"`` is the idealised protocol that maps every entangled
    state to a Bell state in one step with certainty.
    """
    states = np.asarray(states, dtype=complex).reshape(-1, 4, 4)
    kind = str(kind).lower()
    if kind == "ultimate":
        c0 = np.asarray(metrics.concurrence(states), dtype=float).reshape(-1)
        ent = (c0 > 0).astype(float)
        conc = np.vstack([c0] + [ent] * iterations)
        return conc, np.vstack([ent] * (iterations + 1))
    ProtocolKind(kind)
    r = computational_to_bell(states)
    parts = _map_blocks(lambda b: iterate_with_history(kind, b, iterations, keep_history=False)[:2], r, threads)
    return np.concatenate([p[0] for p in parts], axis=1), np.concatenate([p[1] for p in parts], axis=1)


def trajectory_stats(kind: str, states, iterations: int, threads: int = 1) -> list[IterationStats]:
    conc, succ = trajectories(kind, states, iterations, threads)
    return [IterationStats.from_values(n, conc[n], succ[n]) for n in range(iterations + 1)]


def fidelity_table(kind: str, states, iterations: int, threads: int = 1) -> list[tuple[int, int, float, float]]:
    """Rows ``(iteration, attractor, mean_fidelity, stderr)`` of conditional fidelities."""
    kind = ProtocolKind(str(kind).lower()).value
    r = computational_to_bell(np.asarray(states, dtype=complex).reshape(-1, 4, 4))

    def block(b):
        _, _, hist = iterate_with_history(kind, b, iterations, keep_history=True)
        return [metrics.conditional_fidelities(kind, h) for h in hist]

    parts = _map_blocks(block, r, threads)
    rows = []
    for n in range(iterations + 1):
        for k in metrics.ATTRACTORS[kind]:
            values = np.concatenate([p[n][k] for p in parts])
            mean, _, err = metrics.aggregate(values)
            rows.append((n, k, mean, err))
    return rows


def concurrence_at(kind: str | None, states, iteration: int, threads: int = 1) -> np.ndarray:
    """Per-state concurrence after ``iteration`` rounds of ``kind`` (or of the input)."""
    if kind is None or iteration == 0:
        return np.asarray(metrics.concurrence(np.asarray(states).reshape(-1, 4, 4)), dtype=float).reshape(-1)
    conc, _ = trajectories(kind, states, iteration, threads)
    return conc[iteration]


def concurrence_histogram(values, bins: int = 50, exclude_zero: bool = True) -> Histogram:
    return metrics.histogram(values, bins=bins, exclude_zero=exclude_zero)
