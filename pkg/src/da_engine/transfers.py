"""Transfer-coefficient solvers: allocate a deceased peer's balance among survivors.

The coefficient matrix ``alpha[i, j]`` is the share participant ``i`` receives
when ``j`` dies.  Columns are stochastic over survivors (the clearing
condition) and rows satisfy the fairness balance ``sum_j alpha[i, j] * w[j] =
w[i]`` for the supplied fairness weights ``w``.  Among the non-unique
solutions we always pick the one minimizing the quadratic sum of expected
credit transfers, which reproduces both the 3-peer closed form and the
general n-peer closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KKT_TOL = 1e-10


class InfeasibleTransferError(ValueError):
    """No non-negative coefficient matrix exists; carries the violated inequality."""

    def __init__(self, index, lhs, rhs):
        self.index = index
        self.lhs = lhs
        self.rhs = rhs
        super().__init__(
            f"transfer weights infeasible for survivor {index}: "
            f"sum of other weights {lhs:.6g} < w[{index}] = {rhs:.6g}"
        )


@dataclass(frozen=True)
class FeasibilityResult:
    ok: bool
    slack: np.ndarray  # sum_{j != i} w_j - w_i per survivor
    violating: tuple[int, ...]

    def __bool__(self):
        return self.ok


@dataclass(frozen=True)
class TransferMatrix:
    """Shares alpha[i, j] received by i on the death of j, zero diagonal."""

    alpha: np.ndarray
    weights: np.ndarray

    def column_sums(self) -> np.ndarray:
        return self.alpha.sum(axis=0)

    def balance_residual(self) -> np.ndarray:
        """Row fairness residual sum_j alpha[i,j] w_j - w_i (zero-weight rows excluded)."""
        return self.alpha @ self.weights - self.weights

    def transfers(self, deceased: int, pre_death_balance: float) -> np.ndarray:
        return self.alpha[:, deceased] * pre_death_balance


def feasibility(weights) -> FeasibilityResult:
    """Dominance check: PASS iff no single weight exceeds the sum of the others."""
    w = np.asarray(weights, dtype=float)
    if len(w) < 2:
        raise ValueError("feasibility needs at least 2 survivors")
    if np.any(w < 0):
        raise ValueError("fairness weights must be non-negative")
    slack = w.sum() - 2.0 * w
    # exact equality is feasible (the two-survivor boundary case)
    violating = tuple(int(i) for i in np.nonzero(slack < 0)[0])
    return FeasibilityResult(len(violating) == 0, slack, violating)


def feasibility_large_n(weights) -> bool:
    """Pairwise condition guaranteeing the n-peer closed form is non-negative.

    Requires ``(n-2) * (w_i + w_j) >= sum of the remaining weights`` for every
    pair; only the two smallest weights can be binding.
    """
    w = np.asarray(weights, dtype=float)
    n = len(w)
    if n < 3:
        raise ValueError("pairwise feasibility needs at least 3 survivors")
    lo = np.sort(w)[:2]
    return (n - 2) * lo.sum() >= w.sum() - lo.sum()


def solve_alpha_3peer(weights) -> TransferMatrix:
    """Closed form for exactly 3 survivors: alpha[i,j] = (w_i + w_j - w_l) / (2 w_j)."""
    w = np.asarray(weights, dtype=float)
    if len(w) != 3:
        raise ValueError("3-peer closed form needs exactly 3 weights")
    _require_feasible(w)
    alpha = np.zeros((3, 3))
    for j in range(3):
        for i in range(3):
            if i == j:
                continue
            l = 3 - i - j
            alpha[i, j] = (w[i] + w[j] - w[l]) / (2.0 * w[j])
    return TransferMatrix(alpha, w)


def solve_alpha_npeer(weights) -> TransferMatrix:
    """Closed form for n >= 3 survivors (minimum-quadratic-norm interior solution).

    Non-negative exactly when :func:`feasibility_large_n` holds; callers should
    fall back to :func:`solve_alpha_general` otherwise.
    """
    w = np.asarray(weights, dtype=float)
    n = len(w)
    if n < 3:
        raise ValueError("n-peer closed form needs at least 3 survivors")
    _require_feasible(w)
    total = w.sum()
    # alpha[i,j] = [w_i + w_j - (total - w_i - w_j)/(n-2)] / ((n-1) w_j)
    pair = w[:, None] + w[None, :]
    alpha = (pair - (total - pair) / (n - 2)) / ((n - 1) * w[None, :])
    np.fill_diagonal(alpha, 0.0)
    return TransferMatrix(alpha, w)


def solve_alpha_general(weights, tol: float = KKT_TOL) -> TransferMatrix:
    """Minimum-quadratic-norm non-negative coefficients for >= 3 survivors.

    Solves ``min sum (alpha[i,j] w_j)^2`` subject to the fairness balance per
    recipient, column stochasticity per deceased, and ``alpha >= 0``; the KKT
    residual of the reported solution is verified below ``tol``.
    """
    w = np.asarray(weights, dtype=float)
    if len(w) < 3:
        raise ValueError("general solver needs at least 3 survivors")
    _require_feasible(w)

    pos = w > 0.0
    wp = w[pos]
    m = len(wp)
    alpha = np.zeros((len(w), len(w)))
    if m >= 2:
        scale = wp.mean()
        x = _min_norm_nonneg(wp / scale, tol)
        sub = x / (wp[None, :] / scale)
        np.fill_diagonal(sub, 0.0)
        alpha[np.ix_(pos, pos)] = sub
    # a zero-weight deceased's balance is split uniformly over the others
    zero_cols = np.nonzero(~pos)[0]
    for j in zero_cols:
        share = pos.copy()
        share[j] = False
        if not share.any():
            share = np.ones(len(w), dtype=bool)
            share[j] = False
        alpha[share, j] = 1.0 / share.sum()
    return TransferMatrix(alpha, w)


def _require_feasible(w):
    res = feasibility(w)
    if not res.ok:
        i = res.violating[0]
        raise InfeasibleTransferError(i, w.sum() - w[i], w[i])


# -- minimum-norm non-negative solver ---------------------------------------
#
# In x-space (x[i,j] = alpha[i,j] * w[j]) the problem is: minimize ||x||^2
# over hollow matrices with row sums w and column sums w, x >= 0.  The KKT
# conditions give x = max(0, u_i + v_j) for multipliers (u, v); we solve the
# resulting piecewise-linear system with a semismooth Newton iteration and
# verify the KKT residual explicitly.


def _sums(x):
    return x.sum(axis=1), x.sum(axis=0)


def _min_norm_nonneg(w, tol):
    m = len(w)
    if m == 2:
        # feasibility already forced w[0] == w[1]; the whole balance crosses over
        return np.array([[0.0, w[1]], [w[0], 0.0]])
    offdiag = ~np.eye(m, dtype=bool)

    def point(u, v):
        x = np.maximum(0.0, u[:, None] + v[None, :])
        x[~offdiag] = 0.0
        return x

    def residual(x):
        rows, cols = _sums(x)
        return np.concatenate([rows - w, cols - w])

    # interior (unconstrained) solution: u_i = v_i = (w_i - M) / (m - 2)
    M = w.sum() / (2.0 * (m - 1))
    u = (w - M) / (m - 2)
    v = u.copy()
    x = point(u, v)
    g = residual(x)

    for _ in range(200):
        if np.max(np.abs(g)) <= 1e-13 * max(1.0, w.max()):
            break
        s = ((u[:, None] + v[None, :]) > 0.0) & offdiag
        h11 = np.diag(s.sum(axis=1).astype(float))
        h22 = np.diag(s.sum(axis=0).astype(float))
        hess = np.block([[h11, s.astype(float)], [s.astype(float).T, h22]])
        step = np.linalg.lstsq(hess, -g, rcond=None)[0]
        norm0 = np.linalg.norm(g)
        t = 1.0
        for _ in range(40):
            u2 = u + t * step[:m]
            v2 = v + t * step[m:]
            x2 = point(u2, v2)
            g2 = residual(x2)
            if np.linalg.norm(g2) < norm0 * (1.0 - 1e-4 * t) or np.linalg.norm(g2) < 1e-14:
                break
            t *= 0.5
        u, v, x, g = u2, v2, x2, g2

    _check_kkt(x, w, u, v, offdiag, tol)
    return x


def _check_kkt(x, w, u, v, offdiag, tol):
    # stationarity, dual feasibility and complementarity hold by the
    # x = max(0, u + v) parametrization, so the KKT residual reduces to
    # primal feasibility of the row/column sums plus non-negativity.
    rows, cols = _sums(x)
    resid = max(np.max(np.abs(rows - w)), np.max(np.abs(cols - w)), -min(0.0, x.min()))
    if resid > tol * max(1.0, w.max()):
        raise ArithmeticError(f"transfer QP did not converge: KKT residual {resid:.3e}")
