"""Box-constrained limited-memory BFGS.

A projected quasi-Newton method: variables sitting on a bound with the
gradient pushing outward are held fixed, the two-loop recursion builds a
search direction on the remaining ones, and a backtracking line search along
the projected path enforces sufficient decrease. If that fails the iteration
falls back to projected steepest descent; if that fails too the run stops
with the best point found.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

ValueAndGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]

ARMIJO = 1e-4
MAX_BACKTRACK = 40


@dataclass
class BoxResult:
    x: np.ndarray
    fun: float
    n_iter: int
    n_eval: int
    converged: bool
    message: str
    trace: list[float] = field(default_factory=list)


def project(x, lower, upper):
    return np.minimum(np.maximum(x, lower), upper)


def projected_gradient(x, g, lower, upper):
    """``x - P(x - g)``; zero exactly at a KKT point of the box problem."""
    return x - project(x - g, lower, upper)


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def minimize_box(
    fun: ValueAndGrad,
    x0,
    lower,
    upper,
    *,
    max_iter: int = 100,
    gtol: float = 1e-6,
    ftol: float = 1e-12,
    history: int = 10,
    refresh: Callable[[np.ndarray], None] | None = None,
) -> BoxResult:
    """Minimise ``fun`` over the box ``lower <= x <= upper``.

    ``fun`` returns ``(value, gradient)``. ``refresh(x)`` is called at the
    start of every iteration before ``fun`` is evaluated there; it lets the
    caller freeze discrete choices (such as a measurement policy's argmax)
    for the duration of one iteration's line search.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x = project(np.asarray(x0, dtype=float), lower, upper)
    if refresh is not None:
        refresh(x)
    f, g = fun(x)
    n_eval = 1
    trace = [f]
    pairs: deque = deque(maxlen=max(1, history))
    message = "maximum iterations reached"
    converged = False

    it = 0
    for it in range(1, max_iter + 1):
        pg = projected_gradient(x, g, lower, upper)
        if np.max(np.abs(pg), initial=0.0) <= gtol:
            converged, message, it = True, "projected gradient below tolerance", it - 1
            break

        held = ((x <= lower) & (g > 0)) | ((x >= upper) & (g < 0))
        gf = np.where(held, 0.0, g)
        d = -_two_loop(gf, [(s * ~held, y * ~held, r) for s, y, r in pairs])
        d[held] = 0.0
        if not gf @ d < 0:
            d = -gf
        step = 1.0 if pairs else min(1.0, 1.0 / max(np.linalg.norm(d), 1e-300))

        accepted = _line_search(fun, x, f, g, d, step, lower, upper)
        n_eval += accepted[3]
        if accepted[0] is None:
            d = -gf
            step = min(1.0, 1.0 / max(np.linalg.norm(d), 1e-300))
            accepted = _line_search(fun, x, f, g, d, step, lower, upper)
            n_eval += accepted[3]
            if accepted[0] is None:
                message = "line search failed"
                it -= 1
                break
            pairs.clear()
        x_new, f_new, g_new, _ = accepted

        s = x_new - x
        y = g_new - g
        sy = s @ y
        if sy > 1e-10 * (y @ y):
            pairs.append((s, y, 1.0 / sy))
        f_prev = f
        x, f, g = x_new, f_new, g_new
        if refresh is not None:
            refresh(x)
            f, g = fun(x)
            n_eval += 1
        trace.append(f)
        if f_prev - f <= ftol * max(1.0, abs(f)):
            converged, message = True, "relative reduction below ftol"
            break

    return BoxResult(x, float(f), it, n_eval, converged, message, trace)


def _line_search(fun, x, f, g, d, step, lower, upper):
    n_eval = 0
    for _ in range(MAX_BACKTRACK):
        x_new = project(x + step * d, lower, upper)
        delta = x_new - x
        if not np.any(delta):
            return None, None, None, n_eval
        f_new, g_new = fun(x_new)
        n_eval += 1
        if f_new <= f + ARMIJO * (g @ delta):
            return x_new, f_new, g_new, n_eval
        step *= 0.5
    return None, None, None, n_eval
