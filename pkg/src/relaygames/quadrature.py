"""Adaptive Simpson quadrature.

Small and dependency-free on purpose: the equilibrium formulas integrate
smooth one-dimensional integrands over compact intervals, and the callers
need a hard absolute-error guarantee plus a hard recursion bound so that
non-convergence surfaces as an error instead of a hang.
"""

from __future__ import annotations

from typing import Callable

from .errors import ConvergenceError

DEFAULT_TOL = 1e-10
DEFAULT_MAX_DEPTH = 40


def adaptive_simpson(
    fn: Callable[[float], float],
    a: float,
    b: float,
    tol: float = DEFAULT_TOL,
    max_depth: int = DEFAULT_MAX_DEPTH,
) -> float:
    """Integrate fn over [a, b] to absolute tolerance tol.

    Raises ConvergenceError if the interval subdivision depth exceeds
    max_depth before the local error estimate falls below tolerance.
    """
    if a == b:
        return 0.0
    sign = 1.0
    if b < a:
        a, b = b, a
        sign = -1.0
    fa, fb = fn(a), fn(b)
    m = 0.5 * (a + b)
    fm = fn(m)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    return sign * _simpson_rec(fn, a, b, fa, fm, fb, whole, tol, max_depth)


def _simpson_rec(fn, a, b, fa, fm, fb, whole, tol, depth):
    m = 0.5 * (a + b)
    lm = 0.5 * (a + m)
    rm = 0.5 * (m + b)
    flm, frm = fn(lm), fn(rm)
    left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
    right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
    delta = left + right - whole
    if abs(delta) <= 15.0 * tol:
        # Richardson extrapolation of the two Simpson estimates.
        return left + right + delta / 15.0
    if depth <= 0:
        raise ConvergenceError(
            f"adaptive Simpson failed to reach tol={tol:g} on "
            f"[{a:.6g}, {b:.6g}] (residual {abs(delta):.3g})"
        )
    half = 0.5 * tol
    return _simpson_rec(fn, a, m, fa, flm, fm, left, half, depth - 1) + _simpson_rec(
        fn, m, b, fm, frm, fb, right, half, depth - 1
    )


def cumulative_simpson(
    fn: Callable[[float], float],
    nodes,
    tol: float = DEFAULT_TOL,
    max_depth: int = DEFAULT_MAX_DEPTH,
):
    """Running integral of fn from nodes[0] to each node.

    Each cell is integrated adaptively, so the returned partial sums carry
    the same absolute-error guarantee as adaptive_simpson on the full span.
    Returns a list of floats aligned with nodes.
    """
    out = [0.0]
    total = 0.0
    for left, right in zip(nodes[:-1], nodes[1:]):
        total += adaptive_simpson(fn, float(left), float(right), tol, max_depth)
        out.append(total)
    return out
