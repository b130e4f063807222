"""Common machinery for plan families: period payout plans and transfer solving."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import transfers as tr
from ..ledger import FIRST_DEATH, LAST_SURVIVOR, PeriodContext, TransferOutcome
from ..quadrature import integrate_to_infinity


class SchemeError(ValueError):
    """Invalid scheme parameters or unsupported configurations."""


class PaymentPlan:
    """Per-period payout description consumed by the ledger's accrual step.

    ``discounted_outflows(t0, t1)`` returns, per participant, the time-0
    value of payments over (t0, t1]; ``rates(t)`` the nominal rates.
    """

    def discounted_outflows(self, t0, t1):
        raise NotImplementedError

    def rates(self, t):
        raise NotImplementedError

    def atom_times(self, lo, hi):
        return ()

    def atom_amounts(self, t):
        raise NotImplementedError


class ZeroPlan(PaymentPlan):
    """No continuous payments; balances simply accrue interest."""

    def __init__(self, ctx: PeriodContext):
        self.n = len(ctx.balances)

    def discounted_outflows(self, t0, t1):
        return np.zeros(self.n)

    def rates(self, t):
        return np.zeros(self.n)


class DiscountedExponentialPlan(PaymentPlan):
    """Exponential drawdown in discounted units: y_i(t) = y_i(t0) e^{-theta_i (t - t0)}.

    The nominal rate is theta_i * y_i(t0) * e^{-theta_i (t-t0)} * e^{delta t};
    the full horizon pays out exactly the period-start balance, so the payout
    normalization of the exponential family is binding.
    """

    def __init__(self, ctx: PeriodContext, thetas):
        self.t0 = ctx.t0
        self.delta = ctx.delta
        self.thetas = np.asarray(thetas, dtype=float)
        if np.any(self.thetas < 0):
            raise SchemeError("payout decay rates must be non-negative")
        self.y0 = np.where(ctx.alive, ctx.balances * np.exp(-ctx.delta * ctx.t0), 0.0)
        self.start_balances = np.where(ctx.alive, ctx.balances, 0.0)

    def discounted_outflows(self, t0, t1):
        a = np.exp(-self.thetas * (t0 - self.t0))
        b = np.exp(-self.thetas * (t1 - self.t0))
        return self.y0 * (a - b)

    def rates(self, t):
        u = t - self.t0
        return self.thetas * self.y0 * np.exp(-self.thetas * u + self.delta * t)


class SurvivalDensityPlan(PaymentPlan):
    """Instantaneous-fair payout: discounted outflow tracks the conditional death CDF.

    y_i(t) = y_i(t0) * P{tau_i > t | alive at t0}, hence the discounted rate is
    y_i(t0) * f_i(t | t0) and the implied cash value can never overdraw.
    """

    def __init__(self, ctx: PeriodContext):
        self.t0 = ctx.t0
        self.delta = ctx.delta
        self.ctx = ctx
        self.y0 = np.where(ctx.alive, ctx.balances * np.exp(-ctx.delta * ctx.t0), 0.0)
        self.start_balances = np.where(ctx.alive, ctx.balances, 0.0)

    def discounted_outflows(self, t0, t1):
        out = np.zeros_like(self.y0)
        for i, m in enumerate(self.ctx.group.members):
            if self.ctx.alive[i]:
                out[i] = self.y0[i] * (
                    m.conditional_survival(self.t0, t0) - m.conditional_survival(self.t0, t1)
                )
        return out

    def rates(self, t):
        out = np.zeros_like(self.y0)
        for i, m in enumerate(self.ctx.group.members):
            if self.ctx.alive[i]:
                out[i] = self.y0[i] * m.conditional_density(self.t0, t) * np.exp(self.delta * t)
        return out


def transfer_column(weights, deceased_pos: int) -> np.ndarray:
    """Shares of the deceased's balance per survivor (compacted indexing).

    Uses the closed forms when they are valid and the quadratic-program solver
    on the remaining weakly-feasible cases; raises
    :class:`~da_engine.transfers.InfeasibleTransferError` otherwise.
    """
    w = np.asarray(weights, dtype=float)
    m = len(w)
    if m < 2:
        raise SchemeError("transfers need at least one survivor")
    if m == 2:
        res = tr.feasibility(w)
        if not res.ok:
            i = res.violating[0]
            raise tr.InfeasibleTransferError(i, w.sum() - w[i], w[i])
        col = np.zeros(2)
        col[1 - deceased_pos] = 1.0
        return col
    if m == 3:
        matrix = tr.solve_alpha_3peer(w)
    elif np.all(w > 0) and tr.feasibility_large_n(w):
        matrix = tr.solve_alpha_npeer(w)
    else:
        matrix = tr.solve_alpha_general(w)
    return matrix.alpha[:, deceased_pos]


@dataclass
class Scheme:
    """Base plan: payouts per period, weight-based transfers at deaths.

    Subclasses define the period plan (``begin_period``) and the fairness
    weights used to split a deceased peer's balance (``death_weights``).
    """

    delta: float = 0.0
    dissolution: str = LAST_SURVIVOR
    mode: str = "reject"  # negative-balance policy passed to the ledger
    on_infeasible: str = "dissolve"  # dissolve | abort
    family: str = "scheme"
    pays_transfers_out: bool = False

    def inception_transfers(self, ctx: PeriodContext) -> np.ndarray:
        return np.zeros_like(ctx.balances)

    def inception_payout(self, ctx: PeriodContext):
        """Amounts refunded immediately at t=0, or None for a live pool."""
        return None

    def begin_period(self, ctx: PeriodContext) -> PaymentPlan:
        raise NotImplementedError

    def death_weights(self, ctx: PeriodContext, plan, deceased: int) -> np.ndarray:
        """Fairness weights over the pre-death survivor set (compacted order)."""
        raise NotImplementedError

    def transfers_at_death(self, ctx: PeriodContext, plan, deceased: int) -> TransferOutcome:
        alive_idx = np.nonzero(ctx.alive)[0]
        full = np.zeros_like(ctx.balances)
        pre = float(ctx.balances[deceased])
        if len(alive_idx) == 1:
            # nobody left to receive: the balance is lost with the pool
            return TransferOutcome(full, forfeit=pre)
        if len(alive_idx) == 2 and self.dissolution in (LAST_SURVIVOR, FIRST_DEATH):
            # final death: the survivor assumes the whole balance
            survivor = int(alive_idx[alive_idx != deceased][0])
            full[survivor] = pre
            return TransferOutcome(full)
        pos = int(np.nonzero(alive_idx == deceased)[0][0])
        w = self.death_weights(ctx, plan, deceased)
        try:
            col = transfer_column(w, pos)
        except tr.InfeasibleTransferError:
            if self.on_infeasible == "abort":
                raise
            col = _proportional_fallback(w, pos)
            full[alive_idx] = col * pre
            return TransferOutcome(full, dissolve_after=True, infeasible=True)
        full[alive_idx] = col * pre
        return TransferOutcome(full)


def _proportional_fallback(w, pos):
    """Non-negative clearing allocation used when fair coefficients do not exist."""
    col = np.asarray(w, dtype=float).copy()
    col[pos] = 0.0
    total = col.sum()
    if total <= 0:
        col[:] = 1.0
        col[pos] = 0.0
        total = col.sum()
    return col / total


def next_death_exposure(ctx: PeriodContext, plan: DiscountedExponentialPlan) -> np.ndarray:
    """Expected discounted balance forfeited by each survivor at the next death.

    For the exponential family these are the periodic-fairness weights; they
    condition on the period start held by ``plan``, and with constant forces
    reduce to lambda_i * s_i(T_{k-1}) / (theta_i + Lambda).
    """
    alive_idx = np.nonzero(ctx.alive)[0]
    models = [ctx.group.members[i] for i in alive_idx]
    lams = _constant_forces(models)
    bal = plan.start_balances[alive_idx]
    th = plan.thetas[alive_idx]
    t0 = plan.t0
    if lams is not None:
        return lams * bal / (th + lams.sum())
    out = np.empty(len(alive_idx))
    for a in range(len(alive_idx)):
        others = [m for b, m in enumerate(models) if b != a]

        def f(u, a=a, others=others):
            surv = np.prod([m.conditional_survival(t0, t0 + u) for m in others])
            return np.exp(-th[a] * u) * models[a].conditional_density(t0, t0 + u) * surv

        out[a] = bal[a] * integrate_to_infinity(f, 0.0, tol=1e-12, knots=hazard_knots(models, t0))
    return out


def hazard_knots(models, asof: float = 0.0):
    """Breakpoints of the models relative to ``asof`` (quadrature split points)."""
    ks = set()
    for m in models:
        ks.update(float(b) - asof for b in m.breaks if b > asof)
    return sorted(ks)


def _constant_forces(models):
    """Per-member constant rates, or None when any model is time-varying."""
    rates = []
    for m in models:
        if len(m.rates) != 1:
            return None
        rates.append(m.rates[0])
    return np.asarray(rates)

