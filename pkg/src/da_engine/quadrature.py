"""Adaptive Simpson quadrature used where payout integrals have no closed form."""

from __future__ import annotations

import numpy as np


class QuadratureError(ArithmeticError):
    """Raised when the requested tolerance cannot be met; carries the residual."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


def _simpson(f, a, fa, b, fb):
    m = 0.5 * (a + b)
    fm = f(m)
    return m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb)


def adaptive_simpson(f, a: float, b: float, tol: float = 1e-10, max_depth: int = 50, knots=()) -> float:
    """Integrate ``f`` over [a, b] to absolute tolerance ``tol``.

    ``knots`` pre-splits the interval (pass hazard breakpoints there: Simpson
    bisection cannot absorb jump discontinuities on its own).
    """
    if b <= a:
        return 0.0
    cuts = [a] + sorted(k for k in knots if a < k < b) + [b]
    if len(cuts) > 2:
        piece_tol = tol / (len(cuts) - 1)
        total = 0.0
        for lo, hi in zip(cuts, cuts[1:]):
            # endpoint evaluations stay strictly inside the piece so a jump at
            # a knot cannot leak the wrong one-sided value into the rule
            lo_in, hi_in = np.nextafter(lo, hi), np.nextafter(hi, lo)

            def piece(x, lo_in=lo_in, hi_in=hi_in):
                return f(min(max(x, lo_in), hi_in))

            total += adaptive_simpson(piece, lo, hi, piece_tol, max_depth)
        return total
    fa, fb = f(a), f(b)
    m, fm, whole = _simpson(f, a, fa, b, fb)
    return _recurse(f, a, fa, b, fb, m, fm, whole, tol, max_depth)


def _recurse(f, a, fa, b, fb, m, fm, whole, tol, depth):
    lm, flm, left = _simpson(f, a, fa, m, fm)
    rm, frm, right = _simpson(f, m, fm, b, fb)
    err = left + right - whole
    # accept at tolerance, at the floating-point noise floor, or when the
    # interval cannot be meaningfully subdivided any further
    noise = 1e-14 * (abs(left) + abs(right)) + 1e-300
    if abs(err) <= 15.0 * tol or abs(err) <= noise or (b - a) <= 16 * np.finfo(float).eps * max(
        1.0, abs(a), abs(b)
    ):
        return left + right + err / 15.0
    if depth <= 0:
        raise QuadratureError(
            f"adaptive Simpson failed to reach tol={tol} on [{a}, {b}]", abs(err) / 15.0
        )
    half = 0.5 * tol
    return _recurse(f, a, fa, m, fm, lm, flm, left, half, depth - 1) + _recurse(
        f, m, fm, b, fb, rm, frm, right, half, depth - 1
    )


def integrate_to_infinity(
    f, a: float = 0.0, tol: float = 1e-10, first_window: float = 16.0, knots=()
) -> float:
    """Integrate a decaying ``f`` over [a, inf) by doubling windows until the tail vanishes.

    Suited to discounted survival-weighted integrands, which decay at least
    exponentially; stops once two consecutive windows contribute < tol.
    """
    total = 0.0
    lo, width = a, first_window
    quiet = 0
    for _ in range(64):
        piece = adaptive_simpson(f, lo, lo + width, tol=tol, knots=knots)
        total += piece
        quiet = quiet + 1 if abs(piece) < tol else 0
        if quiet >= 2:
            return total
        lo += width
        width *= 2.0
    raise QuadratureError(f"integrand does not decay on [{a}, inf)", abs(piece))
