"""CRRA-optimal payouts: DC principal drawdown, the optimal pooled plan, and
the pooled plan that dominates the DC drawdown path by path."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..ledger import LAST_SURVIVOR, NO_DISSOLUTION, PeriodContext, TransferOutcome
from ..mortality import GroupMortality, HazardModel
from ..quadrature import adaptive_simpson, integrate_to_infinity
from ..transfers import FeasibilityResult, feasibility
from .base import (
    DiscountedExponentialPlan,
    PaymentPlan,
    Scheme,
    SchemeError,
    _constant_forces,
    hazard_knots,
    next_death_exposure,
)



# -- individual drawdown -------------------------------------------------------


@dataclass(frozen=True)
class DrawdownRule:
    """Utility-maximizing drawdown c(t) = kappa * survival(t)^(1/gamma) * s.

    ``kappa`` normalizes the discounted budget to spend the principal exactly:
    integral of e^{-delta t} c(t) dt = s.
    """

    model: HazardModel
    gamma: float
    delta: float
    s: float
    kappa: float = field(init=False)

    def __post_init__(self):
        if self.gamma <= 0 and not math.isinf(self.gamma):
            raise SchemeError("risk aversion gamma must be positive")
        object.__setattr__(self, "kappa", 1.0 / self._pv_unit(0.0))

    def _exponent(self):
        return 0.0 if math.isinf(self.gamma) else 1.0 / self.gamma

    def _disc_integral(self, a: float, b: float) -> float:
        """integral over [a, b] of e^{-delta u} survival(u)^(1/gamma) du, exactly.

        Piecewise-constant hazards make the integrand piecewise exponential,
        so each hazard segment contributes a closed form (b = inf allowed).
        """
        inv = self._exponent()
        m = self.model
        total = 0.0
        for i, (b_i, r_i) in enumerate(zip(m.breaks, m.rates)):
            seg_hi = m.breaks[i + 1] if i + 1 < len(m.breaks) else math.inf
            lo, hi = max(a, float(b_i)), min(b, float(seg_hi))
            if hi <= lo:
                continue
            c = self.delta + r_i * inv
            # integrand on the segment: exp(-(H_i - r_i b_i) inv) * e^{-c u}
            amp = math.exp(-(m._cumhaz[i] - r_i * b_i) * inv)
            if c <= 0:
                if math.isinf(hi):
                    raise SchemeError("drawdown budget diverges: delta + hazard/gamma <= 0")
                total += amp * (hi - lo)
            elif math.isinf(hi):
                total += amp * math.exp(-c * lo) / c
            else:
                total += amp * (math.exp(-c * lo) - math.exp(-c * hi)) / c
        return total

    def _pv_unit(self, t0: float) -> float:
        """integral over [t0, inf) of e^{-delta (u - t0)} survival(t0 + u | t0)^(1/gamma) du."""
        inv = self._exponent()
        scale = math.exp(self.delta * t0) * float(self.model.survival(t0)) ** -inv
        return scale * self._disc_integral(t0, math.inf)

    def rate(self, t):
        return self.kappa * self.model.survival(t) ** self._exponent() * self.s

    def discounted_outflow(self, t0: float, t1: float) -> float:
        """Time-0 value of the drawdown over (t0, t1]."""
        return self.kappa * self.s * self._disc_integral(t0, t1)

    def discounted_tail(self, t0: float) -> float:
        """Time-0 value of the drawdown beyond ``t0``."""
        return self.kappa * self.s * self._disc_integral(t0, math.inf)

    def discounted_budget(self) -> float:
        """Quadrature value of the lifetime discounted drawdown (equals s)."""

        def f(u):
            return np.exp(-self.delta * u) * self.model.survival(u) ** self._exponent()

        return self.kappa * self.s * integrate_to_infinity(f, 0.0, tol=1e-12, knots=self.model.breaks)


def dc_drawdown(model: HazardModel, gamma: float, delta: float, s: float) -> DrawdownRule:
    """Optimal DC principal drawdown for one participant."""
    return DrawdownRule(model=model, gamma=gamma, delta=delta, s=s)


class _DrawdownPlan(PaymentPlan):
    """Absolute-time drawdown schedules, one per participant (no pooling)."""

    def __init__(self, ctx: PeriodContext, rules):
        self.ctx = ctx
        self.rules = rules

    def discounted_outflows(self, t0, t1):
        out = np.zeros(len(self.rules))
        for i, rule in enumerate(self.rules):
            if self.ctx.alive[i]:
                out[i] = rule.discounted_outflow(t0, t1)
        return out

    def rates(self, t):
        return np.array(
            [rule.rate(t) if a else 0.0 for rule, a in zip(self.rules, self.ctx.alive)]
        )


@dataclass
class DCDrawdown(Scheme):
    """Self-insured decumulation: no pooling, no transfers.

    At death the remaining balance is either refunded to the deceased
    (``refund_at_death``) or simply lost with them; neither touches survivors.
    """

    gamma: float = 1.0
    refund_at_death: bool = False
    family: str = "dc-drawdown"
    dissolution: str = NO_DISSOLUTION

    def _rules(self, ctx):
        return [
            DrawdownRule(m, self.gamma, self.delta, s)
            for m, s in zip(ctx.group.members, ctx.deposits)
        ]

    def begin_period(self, ctx: PeriodContext) -> PaymentPlan:
        return _DrawdownPlan(ctx, self._rules(ctx))

    def transfers_at_death(self, ctx, plan, deceased):
        pre = float(ctx.balances[deceased])
        zeros = np.zeros_like(ctx.balances)
        if self.refund_at_death:
            return TransferOutcome(zeros, death_benefit=pre)
        return TransferOutcome(zeros, forfeit=pre)


# -- optimal pooled payout -------------------------------------------------------


@dataclass(frozen=True)
class OptimalPayout:
    """Normalized payout density of the pooled CRRA-optimal plan for one period.

    ``rate_fraction(u)`` is the payout per unit of period-start balance at
    elapsed time u; its discounted integral over [0, inf) is exactly 1.
    """

    nu: float
    gamma: float
    delta: float
    pool_surv: object  # u -> P{no death within u}
    constant_pool_rate: float | None  # aggregate hazard when all forces constant
    knots: tuple = ()

    def rate_fraction(self, u):
        if math.isinf(self.gamma):
            return self.nu * np.ones_like(np.asarray(u, dtype=float))
        if self.constant_pool_rate is not None:
            return self.nu * np.exp(-self.constant_pool_rate / self.gamma * np.asarray(u))
        return self.nu * self.pool_surv(u) ** (1.0 / self.gamma)

    def discounted_unit_outflow(self, u: float) -> float:
        """integral over [0, u] of e^{-delta v} rate_fraction(v) dv; tends to 1."""
        if math.isinf(self.gamma):
            return -math.expm1(-self.delta * u)
        if self.constant_pool_rate is not None:
            c = self.delta + self.constant_pool_rate / self.gamma
            return self.nu / c * -math.expm1(-c * u)
        return self.nu * adaptive_simpson(
            lambda v: math.exp(-self.delta * v) * self.pool_surv(v) ** (1.0 / self.gamma),
            0.0,
            u,
            tol=1e-12,
            knots=self.knots,
        )


def optimal_da_payout(
    group: GroupMortality,
    gamma: float,
    delta: float,
    alive=None,
    asof: float = 0.0,
    balances=None,
) -> tuple[OptimalPayout, object]:
    """Period payout of the utility-maximizing pooled plan, plus its properness check.

    Returns ``(payout, properness)``: the properness report is the dominance
    feasibility of the per-survivor exposures (for constant forces, of
    lambda_i * s_i), which must hold for non-negative credit transfers.
    """
    if gamma < 0:
        raise SchemeError("risk aversion gamma must be non-negative")
    if gamma == 0:
        raise SchemeError("gamma = 0 peers refund immediately; no payout density exists")
    n = len(group)
    alive = np.ones(n, dtype=bool) if alive is None else np.asarray(alive, dtype=bool)
    if not alive.any():
        raise SchemeError("survivor set is empty")
    models = [m for m, a in zip(group.members, alive) if a]
    lams = _constant_forces(models)

    if math.isinf(gamma):
        nu, pool_rate, ps = delta, None, None
    elif lams is not None:
        pool_rate = float(lams.sum())
        nu = delta + pool_rate / gamma
        ps = None
    else:
        pool_rate = None

        def ps(u, _models=models, _asof=asof):
            return float(np.prod([m.conditional_survival(_asof, _asof + u) for m in _models]))

        knots = hazard_knots(models, asof)
        nu = 1.0 / integrate_to_infinity(
            lambda u: math.exp(-delta * u) * ps(u) ** (1.0 / gamma), 0.0, tol=1e-12, knots=knots
        )
    payout = OptimalPayout(nu, gamma, delta, ps, pool_rate, tuple(knots if pool_rate is None and not math.isinf(gamma) else ()))

    if balances is None:
        balances = np.ones(n)
    exposures = np.array(
        [m.hazard(asof) for m in group.members]
    ) * np.asarray(balances, dtype=float)
    if alive.sum() < 2:
        # a sole survivor never transfers; properness is vacuous
        properness = FeasibilityResult(True, np.zeros(1), ())
    else:
        properness = feasibility(exposures[alive])
    return payout, properness


class _OptimalQuadraturePlan(PaymentPlan):
    """Optimal payout via quadrature for time-varying hazards."""

    def __init__(self, ctx: PeriodContext, payout: OptimalPayout):
        self.ctx = ctx
        self.payout = payout
        self.t0 = ctx.t0
        self.y0 = np.where(ctx.alive, ctx.balances * np.exp(-ctx.delta * ctx.t0), 0.0)
        self.start_balances = np.where(ctx.alive, ctx.balances, 0.0)

    def discounted_outflows(self, t0, t1):
        frac = self.payout.discounted_unit_outflow(t1 - self.t0) - self.payout.discounted_unit_outflow(t0 - self.t0)
        return self.y0 * frac

    def rates(self, t):
        u = t - self.t0
        return self.start_balances * self.payout.rate_fraction(u)

    def remaining_fraction(self, u: float) -> float:
        return 1.0 - self.payout.discounted_unit_outflow(u)


@dataclass
class OptimalDA(Scheme):
    """Pooled plan maximizing each survivor's expected CRRA lifetime utility.

    gamma = 0 degenerates to an immediate refund (no risk sharing); gamma ->
    inf pays the interest only.  The common payout density makes the transfer
    weights proportional to hazard times period-start balance.
    """

    gamma: float = 1.0
    family: str = "optimal-da"
    dissolution: str = LAST_SURVIVOR

    def inception_payout(self, ctx):
        if self.gamma == 0:
            return ctx.balances.copy()
        return None

    def begin_period(self, ctx: PeriodContext) -> PaymentPlan:
        models = [m for m, a in zip(ctx.group.members, ctx.alive) if a]
        lams = _constant_forces(models)
        if math.isinf(self.gamma):
            return DiscountedExponentialPlan(ctx, np.full(len(ctx.balances), self.delta))
        if lams is not None:
            theta = self.delta + lams.sum() / self.gamma
            return DiscountedExponentialPlan(ctx, np.full(len(ctx.balances), theta))
        payout, _ = optimal_da_payout(
            ctx.group, self.gamma, self.delta, alive=ctx.alive, asof=ctx.t0
        )
        return _OptimalQuadraturePlan(ctx, payout)

    def death_weights(self, ctx, plan, deceased):
        if isinstance(plan, DiscountedExponentialPlan):
            return next_death_exposure(ctx, plan)
        return _quadrature_exposure(ctx, plan.start_balances, plan.remaining_fraction)


@dataclass
class DaDominatingDC(Scheme):
    """Pooled plan whose payout rate dominates the DC drawdown on every path.

    Each survivor's payout follows their own DC drawdown shape, rescaled to
    their pooled balance; credit transfers at deaths are therefore pure
    rate increases over the DC baseline.
    """

    gamma: float = 1.0
    family: str = "da-dominating-dc"
    dissolution: str = LAST_SURVIVOR

    def begin_period(self, ctx: PeriodContext) -> PaymentPlan:
        models = [m for m, a in zip(ctx.group.members, ctx.alive) if a]
        lams = _constant_forces(models)
        if math.isinf(self.gamma):
            return DiscountedExponentialPlan(ctx, np.full(len(ctx.balances), self.delta))
        if lams is not None:
            thetas = self.delta + np.array([m.rates[0] for m in ctx.group.members]) / self.gamma
            return DiscountedExponentialPlan(ctx, thetas)
        rules = [
            DrawdownRule(m, self.gamma, self.delta, 1.0)
            for m in ctx.group.members
        ]
        return _DCMatchedPlan(ctx, rules)

    def death_weights(self, ctx, plan, deceased):
        if isinstance(plan, DiscountedExponentialPlan):
            return next_death_exposure(ctx, plan)
        return _quadrature_exposure(ctx, plan.start_balances, None, plan.remaining_fractions)


class _DCMatchedPlan(PaymentPlan):
    """DC-shaped payouts rescaled to pooled balances (time-varying hazards)."""

    def __init__(self, ctx: PeriodContext, unit_rules):
        self.ctx = ctx
        self.t0 = ctx.t0
        self.rules = unit_rules
        self.y0 = np.where(ctx.alive, ctx.balances * np.exp(-ctx.delta * ctx.t0), 0.0)
        self.start_balances = np.where(ctx.alive, ctx.balances, 0.0)
        # Q_i(t): time-0 value of the unit drawdown tail beyond t
        self.q0 = np.array(
            [r.discounted_tail(ctx.t0) if a else 1.0 for r, a in zip(unit_rules, ctx.alive)]
        )

    def discounted_outflows(self, t0, t1):
        out = np.zeros(len(self.rules))
        for i, rule in enumerate(self.rules):
            if self.ctx.alive[i]:
                out[i] = self.y0[i] * rule.discounted_outflow(t0, t1) / self.q0[i]
        return out

    def rates(self, t):
        out = np.zeros(len(self.rules))
        disc = np.exp(-self.ctx.delta * self.t0)
        for i, rule in enumerate(self.rules):
            if self.ctx.alive[i]:
                out[i] = self.start_balances[i] * disc * rule.rate(t) / self.q0[i]
        return out

    def remaining_fractions(self, i: int, u: float) -> float:
        rule = self.rules[i]
        return 1.0 - rule.discounted_outflow(self.t0, self.t0 + u) / self.q0[i]


def _quadrature_exposure(ctx, start_balances, remaining, per_member=None):
    """Expected discounted forfeiture weights for non-exponential payout shapes."""
    alive_idx = np.nonzero(ctx.alive)[0]
    models = [ctx.group.members[i] for i in alive_idx]
    t0 = ctx.t0
    out = np.empty(len(alive_idx))
    for a, i in enumerate(alive_idx):
        others = [m for b, m in enumerate(models) if b != a]
        rem = (lambda u, i=i: per_member(i, u)) if per_member is not None else remaining

        def f(u, a=a, others=others, rem=rem):
            surv = np.prod([m.conditional_survival(t0, t0 + u) for m in others])
            return rem(u) * models[a].conditional_density(t0, t0 + u) * surv

        out[a] = start_balances[i] * np.exp(-ctx.delta * t0) * integrate_to_infinity(
            f, 0.0, tol=1e-12, knots=hazard_knots(models, t0)
        )
    return out


def da_dominating_dc(group: GroupMortality, gamma: float, delta: float, **kwargs) -> DaDominatingDC:
    """The pooled plan of matching drawdown shape, built over ``group``."""
    return DaDominatingDC(gamma=gamma, delta=delta, **kwargs)
