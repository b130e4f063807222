"""Periodically and instantaneously fair pooled plans, including the two-peer
construction that resolves the fairness unattainability with two survivors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from ..ledger import LAST_SURVIVOR, TWO_SURVIVORS, PeriodContext
from ..mortality import GroupMortality, HazardModel
from ..quadrature import integrate_to_infinity
from .base import (
    DiscountedExponentialPlan,
    PaymentPlan,
    Scheme,
    SchemeError,
    SurvivalDensityPlan,
    next_death_exposure,
)


# -- two-peer calibration --------------------------------------------------------


def _expected_discounted_loss(s_i, theta, model_i, model_other, asof=0.0):
    """E[s_i e^{-theta T} ; i dies first], the expected discounted forfeiture."""
    rates_i, rates_j = model_i.rates, model_other.rates
    if len(rates_i) == 1 and len(rates_j) == 1:
        lam_i, lam_j = rates_i[0], rates_j[0]
        if lam_i == 0:
            return 0.0
        return s_i * lam_i / (theta + lam_i + lam_j)

    def f(u):
        return (
            np.exp(-theta * u)
            * model_i.conditional_density(asof, asof + u)
            * model_other.conditional_survival(asof, asof + u)
        )

    from .base import hazard_knots

    return s_i * integrate_to_infinity(
        f, 0.0, tol=1e-12, knots=hazard_knots([model_i, model_other], asof)
    )


def two_peer_risk_bounds(s1, s2, m1: HazardModel, m2: HazardModel, asof=0.0) -> float:
    """Maximum proper risk-share level: min over peers of deposit times P{dies first}."""
    d1 = _expected_discounted_loss(s1, 0.0, m1, m2, asof)
    d2 = _expected_discounted_loss(s2, 0.0, m2, m1, asof)
    return float(min(d1, d2))


def _calibrate_theta(s_i, d, model_i, model_other, asof=0.0):
    """Decay rate making the expected discounted forfeiture equal the risk share d."""
    if d <= 0:
        raise SchemeError("risk share must be positive to calibrate; 0 means refund at once")
    rates_i, rates_j = model_i.rates, model_other.rates
    if len(rates_i) == 1 and len(rates_j) == 1:
        return s_i * rates_i[0] / d - (rates_i[0] + rates_j[0])

    def g(theta):
        return _expected_discounted_loss(s_i, theta, model_i, model_other, asof) - d

    hi = 1.0
    while g(hi) > 0:
        hi *= 4.0
        if hi > 1e12:
            raise SchemeError("two-peer calibration failed to bracket theta")
    return brentq(g, 0.0, hi, xtol=1e-12, rtol=1e-12)


@dataclass
class TwoPeerPeriodic(Scheme):
    """Two-peer periodically fair plan with a tunable risk-share level.

    ``risk_share`` is the common expected net benefit of outliving the other
    peer, in currency; 0 refunds both deposits at once, the upper bound pins
    at least one peer's consumption to zero.
    """

    risk_share: float = 0.0
    family: str = "two-peer-da"
    dissolution: str = LAST_SURVIVOR

    def _thetas(self, ctx: PeriodContext):
        alive_idx = np.nonzero(ctx.alive)[0]
        if len(alive_idx) != 2:
            raise SchemeError("two-peer plan requires exactly 2 survivors")
        i, j = alive_idx
        y = ctx.balances * np.exp(-ctx.delta * ctx.t0)
        mi = ctx.group.members[i].shifted(ctx.t0)
        mj = ctx.group.members[j].shifted(ctx.t0)
        dmax = two_peer_risk_bounds(y[i], y[j], mi, mj)
        if not 0.0 <= self.risk_share <= dmax * (1.0 + 1e-12):
            raise SchemeError(
                f"risk share {self.risk_share:.6g} outside the proper range [0, {dmax:.6g}]"
            )
        thetas = np.zeros(len(ctx.balances))
        thetas[i] = _calibrate_theta(y[i], self.risk_share, mi, mj)
        thetas[j] = _calibrate_theta(y[j], self.risk_share, mj, mi)
        return thetas

    def inception_payout(self, ctx):
        if self.risk_share == 0.0:
            return ctx.balances.copy()  # no pooling: deposits refunded immediately
        return None

    def begin_period(self, ctx: PeriodContext) -> PaymentPlan:
        return DiscountedExponentialPlan(ctx, self._thetas(ctx))


def two_peer_periodic(s1, s2, models, risk_share, delta=0.0) -> TwoPeerPeriodic:
    """Factory validating the risk-share level against the proper bounds."""
    m1, m2 = models
    dmax = two_peer_risk_bounds(s1, s2, m1, m2)
    if not 0.0 <= risk_share <= dmax * (1.0 + 1e-12):
        raise SchemeError(f"risk share must lie in [0, {dmax:.6g}], got {risk_share:.6g}")
    return TwoPeerPeriodic(risk_share=risk_share, delta=delta)


# -- n-peer periodically fair plan -------------------------------------------------


@dataclass
class PeriodicFairDA(Scheme):
    """Exponential-payout plan satisfying periodic fairness until the last survivor.

    ``thetas`` fixes the per-participant discounted decay rates (a vector, or
    a callable of the period context).  With two survivors left the two-peer
    construction takes over, recalibrated to the current balances so fairness
    survives the final period.
    """

    thetas: object = None
    two_peer_risk_fraction: float = 0.5
    family: str = "periodic-fair-da"
    dissolution: str = LAST_SURVIVOR

    def _theta_vector(self, ctx):
        th = self.thetas(ctx) if callable(self.thetas) else self.thetas
        if th is None:
            raise SchemeError("periodic-fair plan needs payout decay rates")
        return np.broadcast_to(np.asarray(th, dtype=float), ctx.balances.shape).copy()

    def begin_period(self, ctx: PeriodContext) -> PaymentPlan:
        alive_idx = np.nonzero(ctx.alive)[0]
        if len(alive_idx) == 2:
            i, j = alive_idx
            y = ctx.balances * np.exp(-ctx.delta * ctx.t0)
            mi = ctx.group.members[i].shifted(ctx.t0)
            mj = ctx.group.members[j].shifted(ctx.t0)
            dmax = two_peer_risk_bounds(y[i], y[j], mi, mj)
            hand = TwoPeerPeriodic(
                risk_share=self.two_peer_risk_fraction * dmax, delta=self.delta
            )
            return hand.begin_period(ctx)
        return DiscountedExponentialPlan(ctx, self._theta_vector(ctx))

    def death_weights(self, ctx, plan, deceased):
        return next_death_exposure(ctx, plan)


# -- instantaneously fair plan ------------------------------------------------------


@dataclass
class InstantaneousFairDA(Scheme):
    """Plan whose expected payout rate equals the expected forfeiture at every instant.

    The payout rate is the balance-scaled conditional death density; fairness
    with non-negative credits is unattainable with two heterogeneous
    survivors, so the scheme must dissolve at two survivors.
    """

    family: str = "instantaneous-fair-da"
    dissolution: str = TWO_SURVIVORS

    def __post_init__(self):
        if self.dissolution != TWO_SURVIVORS:
            raise SchemeError("instantaneously fair plans must dissolve at two survivors")

    def begin_period(self, ctx: PeriodContext) -> PaymentPlan:
        return SurvivalDensityPlan(ctx)

    def death_weights(self, ctx, plan, deceased):
        # weights at the death time: period-start balance times conditional density
        alive_idx = np.nonzero(ctx.alive)[0]
        t = ctx.t0  # context is taken at the death time; plan.t0 is the period start
        w = np.empty(len(alive_idx))
        for a, i in enumerate(alive_idx):
            w[a] = plan.start_balances[i] * ctx.group.members[i].conditional_density(plan.t0, t)
        return w


def instantaneous_fair_payout(group: GroupMortality, delta: float) -> InstantaneousFairDA:
    """The instantaneously fair plan over ``group`` (dissolves at two survivors)."""
    return InstantaneousFairDA(delta=delta)
