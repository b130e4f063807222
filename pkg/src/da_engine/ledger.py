"""The pool ledger: cash-value accrual, credit transfers at deaths, rationality audits.

State is kept in nominal (time-t) currency; accrual works in discounted units
internally so the conservation identity -- discounted payments plus live
discounted balances stays equal to the deposits -- holds to floating-point
accuracy on every path.  Audit tolerances are relative to the pool size
(total deposits), default 1e-9.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

REL_TOL = 1e-9

LAST_SURVIVOR = "last-survivor-lump-sum"
TWO_SURVIVORS = "dissolve-at-two-survivors"
FIRST_DEATH = "dissolve-at-first-death"
NO_DISSOLUTION = "none"  # individual accounts, no pooled wind-up


class LedgerError(ValueError):
    """Raised on clearing violations, negative balances in reject mode, etc."""


@dataclass
class Inception:
    e0: np.ndarray
    balances_after: np.ndarray
    t: float = 0.0
    kind: str = "inception"


@dataclass
class Accrual:
    t0: float
    t1: float
    discounted_payments: np.ndarray
    balances_after: np.ndarray
    kind: str = "accrue"

    @property
    def t(self):
        return self.t1


@dataclass
class PaymentAtom:
    t: float
    amounts: np.ndarray  # nominal amounts paid at t
    balances_after: np.ndarray
    kind: str = "lump_sum"  # scheduled | death-benefit | transfer-payout | settlement


@dataclass
class DeathEvent:
    t: float
    k: int  # 1-based death count
    deceased: int
    pre_death_balance: float
    transfers: np.ndarray  # credited to survivors only
    forfeit: float  # balance lost to nobody (non-pooled schemes only)
    balances_after: np.ndarray
    kind: str = "death"


@dataclass
class PoolState:
    """Mutable per-path ledger; single-writer, one instance per simulated path."""

    delta: float
    deposits: np.ndarray
    mode: str = "reject"  # negative-balance policy: reject | permit
    time: float = 0.0
    balances: np.ndarray = field(default=None)
    paid: np.ndarray = field(default=None)  # cumulative discounted payments
    alive: np.ndarray = field(default=None)
    deaths: int = 0
    forfeited: float = 0.0  # cumulative discounted forfeits
    events: list = field(default_factory=list)
    completed: bool = False
    infeasible_transfer: bool = False

    def __post_init__(self):
        self.deposits = np.asarray(self.deposits, dtype=float)
        if self.mode not in ("reject", "permit"):
            raise LedgerError(f"unknown negative-balance mode {self.mode!r}")
        n = len(self.deposits)
        if self.balances is None:
            self.balances = self.deposits.copy()
        if self.paid is None:
            self.paid = np.zeros(n)
        if self.alive is None:
            self.alive = np.ones(n, dtype=bool)
        self.pool_scale = float(np.abs(self.deposits).sum()) or 1.0

    @property
    def n_alive(self) -> int:
        return int(self.alive.sum())

    def discount(self, t) -> float:
        return float(np.exp(-self.delta * t))

    def _record(self, event):
        event.balances_after = self.balances.copy()
        self.events.append(event)

    def _check_negative(self):
        if self.mode == "reject" and self.balances.min() < -REL_TOL * self.pool_scale:
            i = int(self.balances.argmin())
            raise LedgerError(
                f"negative cash value {self.balances[i]:.6g} for participant {i} "
                f"at t={self.time:.6g} (non-negativity breached in reject mode)"
            )


def new_pool(deposits, delta, mode: str = "reject") -> PoolState:
    return PoolState(delta=delta, deposits=deposits, mode=mode)


def apply_initial_transfers(state: PoolState, e0) -> PoolState:
    """Apply inception transfers: s_i(0) = s_i + e0_i; e0 must net to zero."""
    e0 = np.asarray(e0, dtype=float)
    if abs(e0.sum()) > REL_TOL * state.pool_scale:
        raise LedgerError(f"inception transfers must sum to 0, got {e0.sum():.6g}")
    state.balances = state.balances + e0
    state._record(Inception(e0=e0.copy(), balances_after=None))
    state._check_negative()
    return state


def accrue(state: PoolState, to: float, plan) -> PoolState:
    """Advance to ``to`` with no intervening death, paying the plan's rates.

    ``plan.discounted_outflows(t0, t1)`` must return, per participant, the
    value of the payments over (t0, t1] discounted to time 0.
    """
    if to < state.time - 1e-12:
        raise LedgerError(f"cannot accrue backwards from {state.time} to {to}")
    if to <= state.time:
        return state
    d = np.where(state.alive, plan.discounted_outflows(state.time, to), 0.0)
    t0, t1 = state.time, to
    y = state.balances * state.discount(t0) - d
    state.balances = np.where(state.alive, y / state.discount(t1), 0.0)
    state.paid = state.paid + d
    state.time = t1
    state._record(Accrual(t0=t0, t1=t1, discounted_payments=d, balances_after=None))
    state._check_negative()
    return state


def apply_atom(state: PoolState, amounts, kind: str) -> PoolState:
    """Pay discrete amounts out of the corresponding accounts at the current time."""
    amounts = np.asarray(amounts, dtype=float)
    state.balances = state.balances - amounts
    state.paid = state.paid + amounts * state.discount(state.time)
    state._record(PaymentAtom(t=state.time, amounts=amounts.copy(), balances_after=None, kind=kind))
    state._check_negative()
    return state


def apply_death(state: PoolState, deceased: int, transfers, forfeit: float = 0.0) -> PoolState:
    """Clear the deceased's balance into survivor transfers (plus any forfeit).

    The clearing condition requires transfers + forfeit to exhaust the
    pre-death balance exactly (1e-9 relative).
    """
    if not state.alive[deceased]:
        raise LedgerError(f"participant {deceased} is already dead")
    transfers = np.asarray(transfers, dtype=float)
    pre = float(state.balances[deceased])
    residual = transfers.sum() + forfeit - pre
    if abs(residual) > REL_TOL * state.pool_scale:
        raise LedgerError(
            f"clearing violated at t={state.time:.6g}: transfers+forfeit-pre_balance "
            f"= {residual:.3e} exceeds tolerance"
        )
    if transfers[deceased] != 0.0 or np.any(transfers[~state.alive]):
        raise LedgerError("transfers may only be credited to survivors")
    state.alive[deceased] = False
    state.balances = np.where(state.alive, state.balances + transfers, 0.0)
    state.deaths += 1
    state.forfeited += forfeit * state.discount(state.time)
    state._record(
        DeathEvent(
            t=state.time,
            k=state.deaths,
            deceased=deceased,
            pre_death_balance=pre,
            transfers=transfers.copy(),
            forfeit=forfeit,
            balances_after=None,
        )
    )
    state._check_negative()
    return state


def settle(state: PoolState, participants, kind: str = "settlement") -> PoolState:
    """Pay out the listed participants' full balances as lump sums (dissolution)."""
    amounts = np.zeros_like(state.balances)
    for i in participants:
        amounts[i] = state.balances[i]
    return apply_atom(state, amounts, kind=kind)


# -- audits ------------------------------------------------------------------


@dataclass(frozen=True)
class AuditReport:
    axiom: int
    ok: bool
    detail: dict

    def __bool__(self):
        return self.ok


def _transfer_series(state: PoolState) -> np.ndarray:
    """Discounted total account transfers e_i^0 + sum_k e_i^(k) e^{-delta T_k}."""
    out = np.zeros_like(state.deposits)
    for ev in state.events:
        if isinstance(ev, Inception):
            out += ev.e0
        elif isinstance(ev, DeathEvent):
            out += ev.transfers * state.discount(ev.t)
    return out


def audit_axiom1(state: PoolState) -> AuditReport:
    """No loss for the last survivor(s): settled participants recover their deposit.

    Evaluated on completed runs only; also reports the equivalent discounted
    transfer totals, which are non-negative exactly when the axiom holds.
    """
    if not state.completed:
        return AuditReport(1, False, {"reason": "run not complete"})
    survivors = [i for i in range(len(state.deposits)) if state.alive[i]]
    residuals = {i: float(state.paid[i] - state.deposits[i]) for i in survivors}
    tol = REL_TOL * state.pool_scale
    ok = all(r >= -tol for r in residuals.values())
    return AuditReport(
        1,
        ok,
        {
            "survivors": survivors,
            "payment_minus_deposit": residuals,
            "discounted_transfer_totals": _transfer_series(state).tolist(),
        },
    )


def audit_axiom2(state: PoolState) -> AuditReport:
    """Non-negative cash values at every event checkpoint."""
    tol = REL_TOL * state.pool_scale
    worst, worst_t, worst_i = 0.0, None, None
    for ev in state.events:
        m = float(ev.balances_after.min())
        if m < worst:
            worst, worst_t, worst_i = m, ev.t, int(ev.balances_after.argmin())
    ok = worst >= -tol
    return AuditReport(2, ok, {"min_balance": worst, "at_time": worst_t, "participant": worst_i})


def audit_axiom3(state: PoolState) -> AuditReport:
    """Non-negative mortality credits in every period and zero inception transfers."""
    tol = REL_TOL * state.pool_scale
    min_transfer, at_k = 0.0, None
    e0_zero = True
    for ev in state.events:
        if isinstance(ev, Inception):
            e0_zero = bool(np.all(np.abs(ev.e0) <= tol))
        elif isinstance(ev, DeathEvent):
            m = float(ev.transfers.min())
            if m < min_transfer:
                min_transfer, at_k = m, ev.k
    ok = e0_zero and min_transfer >= -tol
    return AuditReport(
        3, ok, {"min_transfer": min_transfer, "at_death": at_k, "inception_transfers_zero": e0_zero}
    )


def is_proper(state: PoolState) -> bool:
    """A decentralized annuity is proper when Axiom 3 holds for all periods."""
    return audit_axiom3(state).ok


def conservation_residual(state: PoolState) -> float:
    """Max deviation of discounted (payments + forfeits + live balances) from deposits."""
    total0 = state.deposits.sum()
    worst = 0.0
    paid = np.zeros_like(state.deposits)
    forfeited = 0.0
    alive = np.ones(len(state.deposits), dtype=bool)
    for ev in state.events:
        if isinstance(ev, Accrual):
            paid = paid + ev.discounted_payments
        elif isinstance(ev, PaymentAtom):
            paid = paid + ev.amounts * state.discount(ev.t)
        elif isinstance(ev, DeathEvent):
            forfeited += ev.forfeit * state.discount(ev.t)
            alive[ev.deceased] = False
        disc = state.discount(ev.t)
        live = float((ev.balances_after * disc)[alive].sum()) if alive.any() else 0.0
        worst = max(worst, abs(paid.sum() + forfeited + live - total0))
    return worst


# -- event-log export ----------------------------------------------------------


def event_log_lines(state: PoolState):
    """Yield the event log as JSON lines: {t, type, participant?, amount, balances_after}."""
    for ev in state.events:
        base = {"t": float(ev.t), "balances_after": ev.balances_after.tolist()}
        if isinstance(ev, Inception):
            base.update(type="transfer", detail="inception", amount=ev.e0.tolist())
        elif isinstance(ev, Accrual):
            base.update(type="accrue", amount=ev.discounted_payments.tolist())
        elif isinstance(ev, PaymentAtom):
            base.update(type="lump_sum", detail=ev.kind, amount=ev.amounts.tolist())
        elif isinstance(ev, DeathEvent):
            base.update(
                type="death",
                participant=int(ev.deceased),
                amount=float(ev.pre_death_balance),
                transfers=ev.transfers.tolist(),
            )
        yield json.dumps(base)


# -- event-driven replay --------------------------------------------------------


@dataclass(frozen=True)
class PeriodContext:
    """Scheme-facing view of the pool at a period start."""

    t0: float
    balances: np.ndarray
    alive: np.ndarray
    deaths: int
    delta: float
    deposits: np.ndarray
    group: object  # GroupMortality


@dataclass
class TransferOutcome:
    transfers: np.ndarray
    forfeit: float = 0.0
    death_benefit: float = 0.0  # balance refunded to the deceased (non-pooled schemes)
    dissolve_after: bool = False
    infeasible: bool = False


def _context(state: PoolState, group) -> PeriodContext:
    return PeriodContext(
        t0=state.time,
        balances=state.balances.copy(),
        alive=state.alive.copy(),
        deaths=state.deaths,
        delta=state.delta,
        deposits=state.deposits,
        group=group,
    )


def replay(
    scheme,
    group,
    deposits,
    death_times,
    *,
    delta: float = None,
    horizon: float = None,
    mode: str = None,
    checkpoints=None,
    rate_log: list = None,
) -> PoolState:
    """Run one pool path event-by-event: jump to each sampled death, no time stepping.

    ``death_times`` is one absolute death time per participant (``inf`` for
    deaths beyond any horizon of interest).  ``checkpoints`` forces extra
    accrual events at the given times (for grid read-outs); with ``rate_log``
    a list, ``(t, rates)`` tuples are appended at each checkpoint.  Returns
    the final :class:`PoolState`; ``state.completed`` is False when the
    horizon cut the run short of dissolution.
    """
    deposits = np.asarray(deposits, dtype=float)
    delta = scheme.delta if delta is None else delta
    state = new_pool(deposits, delta, mode=mode or getattr(scheme, "mode", "reject"))
    cps = np.sort(np.asarray(checkpoints, dtype=float)) if checkpoints is not None else None

    def advance(plan, to):
        if rate_log is not None:
            # period-start rate; duplicate times record the jump at a transfer
            rate_log.append((state.time, np.where(state.alive, plan.rates(state.time), 0.0)))
        if cps is not None:
            for g in cps[(cps > state.time) & (cps < to)]:
                accrue(state, g, plan)
                if rate_log is not None:
                    rate_log.append((float(g), np.where(state.alive, plan.rates(g), 0.0)))
        accrue(state, to, plan)
        if rate_log is not None:
            rate_log.append((state.time, np.where(state.alive, plan.rates(state.time), 0.0)))

    apply_initial_transfers(state, scheme.inception_transfers(_context(state, group)))

    refund0 = scheme.inception_payout(_context(state, group))
    if refund0 is not None:
        apply_atom(state, refund0, kind="settlement")
        state.completed = True
        return state

    # degenerate pools are settled immediately (a sole member is already the
    # last survivor; a 2-member pool under dissolve-at-two never starts)
    if (state.n_alive == 1 and scheme.dissolution == LAST_SURVIVOR) or (
        state.n_alive == 2 and scheme.dissolution == TWO_SURVIVORS
    ):
        settle(state, np.nonzero(state.alive)[0])
        state.completed = True
        return state

    order = sorted((t, i) for i, t in enumerate(np.asarray(death_times, dtype=float)))
    hard_stop = np.inf if horizon is None else horizon

    for t_d, d in order:
        if state.completed:
            break
        if t_d > hard_stop or not np.isfinite(t_d):
            break
        plan = scheme.begin_period(_context(state, group))
        _run_atoms(state, plan, scheme, t_d)
        advance(plan, t_d)
        outcome = scheme.transfers_at_death(_context(state, group), plan, d)
        state.infeasible_transfer |= outcome.infeasible
        if outcome.death_benefit:
            benefit = np.zeros_like(state.balances)
            benefit[d] = outcome.death_benefit
            apply_atom(state, benefit, kind="death-benefit")
        apply_death(state, d, outcome.transfers, forfeit=outcome.forfeit)
        if scheme.pays_transfers_out and outcome.transfers.any():
            apply_atom(state, outcome.transfers, kind="transfer-payout")
        _maybe_dissolve(state, scheme, outcome)

    if not state.completed and np.isfinite(hard_stop) and state.n_alive:
        plan = scheme.begin_period(_context(state, group))
        _run_atoms(state, plan, scheme, hard_stop)
        advance(plan, hard_stop)
    return state


def _run_atoms(state: PoolState, plan, scheme, until: float):
    """Process scheduled payment atoms due in [state.time, until)."""
    times = plan.atom_times(state.time, min(until, np.inf))
    for t in times:
        accrue(state, t, plan)
        apply_atom(state, np.where(state.alive, plan.atom_amounts(t), 0.0), kind="scheduled")


def _maybe_dissolve(state: PoolState, scheme, outcome: TransferOutcome):
    alive = state.n_alive
    policy = scheme.dissolution
    if alive == 0:
        state.completed = True
    elif outcome.dissolve_after or policy == FIRST_DEATH:
        settle(state, np.nonzero(state.alive)[0])
        state.completed = True
    elif alive == 1 and policy == LAST_SURVIVOR:
        settle(state, np.nonzero(state.alive)[0])
        state.completed = True
    elif alive == 2 and policy == TWO_SURVIVORS:
        settle(state, np.nonzero(state.alive)[0])
        state.completed = True
