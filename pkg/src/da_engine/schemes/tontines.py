"""Deterministic-schedule pools: equitable tontines, group self-annuitization,
and the fair transfer plan where payments occur only at deaths."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..ledger import LAST_SURVIVOR, TWO_SURVIVORS, PeriodContext, TransferOutcome
from ..mortality import GroupMortality, HazardModel
from .base import PaymentPlan, Scheme, SchemeError, ZeroPlan

_NORMALIZATION_TOL = 1e-8


@dataclass(frozen=True)
class PayoutSchedule:
    """Total-payout schedule d(t); its discounted mass must equal 1.

    Either a constant rate on [0, end), or a tabulated piecewise-linear curve
    (integrated by trapezoid on a refined grid).
    """

    rate: float = None
    end: float = None
    times: np.ndarray = None
    values: np.ndarray = None
    _grid: tuple = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        if self.rate is not None:
            if self.end is None or self.end <= 0:
                raise SchemeError("constant schedule needs a positive end time")
        else:
            t = np.asarray(self.times, dtype=float)
            v = np.asarray(self.values, dtype=float)
            if len(t) < 2 or np.any(np.diff(t) <= 0) or np.any(v < 0):
                raise SchemeError("tabulated schedule needs increasing times, values >= 0")
            fine = np.linspace(t[0], t[-1], max(4001, 8 * len(t)))
            object.__setattr__(self, "times", t)
            object.__setattr__(self, "values", v)
            object.__setattr__(self, "_grid", (fine, np.interp(fine, t, v)))

    @classmethod
    def uniform(cls, end: float, delta: float) -> "PayoutSchedule":
        """Constant-rate schedule, normalized for the given force of interest."""
        rate = delta / -math.expm1(-delta * end) if delta > 0 else 1.0 / end
        return cls(rate=rate, end=end)

    def value(self, t):
        if self.rate is not None:
            return np.where(np.asarray(t) < self.end, self.rate, 0.0)
        return np.interp(t, self.times, self.values, left=0.0, right=0.0)

    def discounted_mass(self, delta: float, t0: float, t1: float) -> float:
        """integral over (t0, t1] of e^{-delta u} d(u) du."""
        if self.rate is not None:
            a, b = min(t0, self.end), min(t1, self.end)
            if delta == 0:
                return self.rate * (b - a)
            return self.rate / delta * (math.exp(-delta * a) - math.exp(-delta * b))
        fine, vals = self._grid
        a = max(t0, float(fine[0]))
        b = min(t1, float(fine[-1]))
        if b <= a:
            return 0.0
        interior = fine[(fine > a) & (fine < b)]
        xs = np.concatenate([[a], interior, [b]])
        ws = np.exp(-delta * xs) * np.interp(xs, fine, vals)
        return float(np.trapezoid(ws, xs))

    def assert_normalized(self, delta: float):
        total = self.discounted_mass(delta, 0.0, self.horizon())
        if abs(total - 1.0) > _NORMALIZATION_TOL:
            raise SchemeError(
                f"payout schedule has discounted mass {total:.10f}, must be 1 +- 1e-8"
            )

    def horizon(self) -> float:
        return float(self.end if self.rate is not None else self.times[-1])


class _TontinePlan(PaymentPlan):
    """Survivor shares of the deterministic pool payout."""

    def __init__(self, ctx: PeriodContext, shares, schedule, total_deposit):
        self.ctx = ctx
        self.shares = shares
        self.schedule = schedule
        self.total = total_deposit

    def discounted_outflows(self, t0, t1):
        mass = self.schedule.discounted_mass(self.ctx.delta, t0, t1)
        return self.shares * self.total * mass

    def rates(self, t):
        return self.shares * self.total * self.schedule.value(t)


@dataclass
class EquitableTontine(Scheme):
    """Deterministic total payouts split by fixed weights pi_i s_i among survivors.

    ``rebalance`` applies the inception transfers that keep all balances
    non-negative; the raw variant reproduces the classic overdraft pitfall
    and therefore runs the ledger in permit mode.
    """

    pi: np.ndarray = None
    schedule: PayoutSchedule = None
    rebalance: bool = True
    family: str = "equitable-tontine"
    dissolution: str = LAST_SURVIVOR

    def __post_init__(self):
        if self.pi is None or self.schedule is None:
            raise SchemeError("equitable tontine needs weights pi and a payout schedule")
        self.pi = np.asarray(self.pi, dtype=float)
        if np.any(self.pi <= 0):
            raise SchemeError("tontine weights must be positive")
        self.schedule.assert_normalized(self.delta)
        if not self.rebalance:
            self.mode = "permit"

    def _shares(self, deposits, alive):
        raw = np.where(alive, self.pi * deposits, 0.0)
        return raw / raw.sum()

    def inception_transfers(self, ctx):
        if not self.rebalance:
            return np.zeros_like(ctx.balances)
        start = self._shares(ctx.deposits, ctx.alive) * ctx.deposits.sum()
        return start - ctx.deposits

    def begin_period(self, ctx: PeriodContext) -> PaymentPlan:
        return _TontinePlan(
            ctx, self._shares(ctx.deposits, ctx.alive), self.schedule, ctx.deposits.sum()
        )

    def transfers_at_death(self, ctx, plan, deceased):
        # survivors' balances are reset to their share of the remaining pool;
        # these transfers are the unique ones keeping the tontine a pooled plan
        post_alive = ctx.alive.copy()
        post_alive[deceased] = False
        if not post_alive.any():
            return TransferOutcome(np.zeros_like(ctx.balances), forfeit=float(ctx.balances[deceased]))
        pool_value = float(ctx.balances[ctx.alive].sum())
        targets = self._shares(ctx.deposits, post_alive) * pool_value
        transfers = np.where(post_alive, targets - ctx.balances, 0.0)
        return TransferOutcome(transfers)


def equitable_tontine(deposits, pi, schedule: PayoutSchedule, delta=0.0, rebalance=True, **kw):
    """Factory checking the schedule normalization for the pool's force of interest."""
    return EquitableTontine(pi=pi, schedule=schedule, delta=delta, rebalance=rebalance, **kw)


# -- group self-annuitization (discrete time) ---------------------------------------


class _GSAPlan(PaymentPlan):
    """No continuous payments; survivor-adjusted annuity atoms at integer times."""

    def __init__(self, ctx: PeriodContext, scheme):
        self.ctx = ctx
        self.scheme = scheme
        self.n_alive = int(ctx.alive.sum())

    def discounted_outflows(self, t0, t1):
        return np.zeros_like(self.ctx.balances)

    def rates(self, t):
        return np.zeros_like(self.ctx.balances)

    def atom_times(self, lo, hi):
        if not math.isfinite(hi):
            raise SchemeError("GSA atoms need a bounded segment")
        first = math.ceil(lo - 1e-9)
        last = math.ceil(hi - 1e-9) - 1  # strictly before hi
        return np.arange(first, last + 1, dtype=float)

    def atom_amounts(self, t):
        scheme = self.scheme
        per_survivor = (
            scheme.model.survival(t) * len(self.ctx.balances) / self.n_alive * scheme.payment_unit
        )
        return np.where(self.ctx.alive, per_survivor, 0.0)


@dataclass
class GSAPlanScheme(Scheme):
    """Group self-annuitization: the discrete-time equitable tontine for a
    homogeneous cohort; deaths split the deceased's equal share evenly."""

    model: HazardModel = None
    s0: float = 0.0
    family: str = "gsa"
    dissolution: str = LAST_SURVIVOR
    payment_unit: float = field(init=False, default=0.0)

    def __post_init__(self):
        if self.model is None or self.s0 <= 0:
            raise SchemeError("GSA needs a hazard model and a positive deposit")
        self.payment_unit = self.s0 / _annuity_due_sum(self.model, self.delta)

    def begin_period(self, ctx: PeriodContext) -> PaymentPlan:
        return _GSAPlan(ctx, self)

    def death_weights(self, ctx, plan, deceased):
        return np.ones(int(ctx.alive.sum()))  # homogeneous: equal split


def _annuity_due_sum(model: HazardModel, delta: float) -> float:
    """sum over t = 0, 1, ... of survival(t) e^{-delta t}."""
    if len(model.rates) == 1:
        q = math.exp(-(model.rates[0] + delta))
        if q >= 1.0:
            raise SchemeError("GSA annuity value diverges: no mortality and no interest")
        return 1.0 / (1.0 - q)
    total, t = 0.0, 0
    while t < 5000:
        term = float(model.survival(t)) * math.exp(-delta * t)
        total += term
        if term < 1e-15:
            return total
        t += 1
    raise SchemeError("GSA annuity sum did not converge within 5000 periods")


def gsa_plan(n: int, s0: float, model: HazardModel, delta: float, models=None) -> GSAPlanScheme:
    """Homogeneous-cohort GSA; heterogeneous groups are not supported."""
    if models is not None and any(m != model for m in models):
        raise SchemeError("GSA supports homogeneous cohorts only")
    return GSAPlanScheme(model=model, s0=s0, delta=delta)


# -- fair transfer plan ---------------------------------------------------------------


@dataclass
class FTPlan(Scheme):
    """Payments only at deaths: each credit transfer is paid out on arrival,
    so a survivor's own balance just accrues interest until they die."""

    family: str = "ftp"
    dissolution: str = TWO_SURVIVORS
    pays_transfers_out: bool = True

    def begin_period(self, ctx: PeriodContext) -> PaymentPlan:
        return ZeroPlan(ctx)

    def death_weights(self, ctx, plan, deceased):
        alive_idx = np.nonzero(ctx.alive)[0]
        t = ctx.t0
        return np.array(
            [ctx.group.members[i].hazard(t) * ctx.balances[i] for i in alive_idx]
        )


def ftp_plan(group: GroupMortality, delta: float, dissolution: str = TWO_SURVIVORS) -> FTPlan:
    return FTPlan(delta=delta, dissolution=dissolution)
