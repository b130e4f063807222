import math

import numpy as np
import pytest

from da_engine import ledger
from da_engine.ledger import FIRST_DEATH, LAST_SURVIVOR, PeriodContext, replay
from da_engine.mortality import GroupMortality, HazardModel
from da_engine.quadrature import integrate_to_infinity
from da_engine.schemes import (
    DaDominatingDC,
    DCDrawdown,
    EquitableTontine,
    FTPlan,
    GSAPlanScheme,
    InstantaneousFairDA,
    OptimalDA,
    PayoutSchedule,
    PeriodicFairDA,
    SchemeError,
    TwoPeerPeriodic,
    dc_drawdown,
    gsa_plan,
    optimal_da_payout,
    two_peer_periodic,
    two_peer_risk_bounds,
)

SEC5_LAMS = [0.03, 0.04, 0.05]
SEC5_S = [300.0, 270.0, 255.0]
DELTA, GAMMA = 0.06, 2.0 / 3.0


def _ctx(deposits, group, delta, t0=0.0, balances=None, alive=None):
    deposits = np.asarray(deposits, dtype=float)
    balances = deposits.copy() if balances is None else np.asarray(balances, dtype=float)
    alive = np.ones(len(deposits), dtype=bool) if alive is None else alive
    return PeriodContext(
        t0=t0, balances=balances, alive=alive, deaths=0,
        delta=delta, deposits=deposits, group=group,
    )


# -- optimal pooled payout -------------------------------------------------------


class TestOptimalPayout:
    def test_initial_rate_and_q(self):
        group = GroupMortality.constant_forces(SEC5_LAMS)
        payout, prop = optimal_da_payout(group, GAMMA, DELTA)
        assert payout.rate_fraction(0.0) * 300.0 == pytest.approx(72.0, abs=1e-9)
        assert prop.ok
        lam_total = sum(SEC5_LAMS)
        q = lam_total / (DELTA + (1 + 1 / GAMMA) * lam_total)
        assert q == pytest.approx(1.0 / 3.0, abs=1e-15)

    @pytest.mark.parametrize("gamma", [0.5, 2.0 / 3.0, 1.0, 2.0, 10.0])
    @pytest.mark.parametrize("n", [2, 3, 5])
    def test_constant_force_closed_form_matches_quadrature(self, gamma, n):
        lams = [0.02 + 0.01 * i for i in range(n)]
        group = GroupMortality.constant_forces(lams)
        closed, _ = optimal_da_payout(group, gamma, DELTA)
        # quadrature oracle on the generic density, using a piecewise model
        # numerically identical to the constant forces
        bumpy = GroupMortality(
            tuple(HazardModel.piecewise([0.0, 10.0], [l, l]) for l in lams)
        )
        generic, _ = optimal_da_payout(bumpy, gamma, DELTA)
        for u in (0.0, 0.5, 3.0, 11.0):
            assert generic.rate_fraction(u) == pytest.approx(
                closed.rate_fraction(u), abs=1e-8
            )
        assert generic.discounted_unit_outflow(40.0) == pytest.approx(
            closed.discounted_unit_outflow(40.0), abs=1e-8
        )

    def test_normalization_binding(self):
        group = GroupMortality.constant_forces(SEC5_LAMS)
        payout, _ = optimal_da_payout(group, GAMMA, DELTA)
        total = integrate_to_infinity(
            lambda u: math.exp(-DELTA * u) * payout.rate_fraction(u), 0.0, tol=1e-12
        )
        assert total == pytest.approx(1.0, abs=1e-8)

    def test_gamma_limits(self):
        group = GroupMortality.constant_forces([0.03])
        inf_payout, _ = optimal_da_payout(group, math.inf, DELTA)
        assert inf_payout.rate_fraction(7.0) == pytest.approx(DELTA)
        with pytest.raises(SchemeError):
            optimal_da_payout(group, 0.0, DELTA)

    def test_properness_condition_reported(self):
        group = GroupMortality.constant_forces([0.01, 0.01, 0.2])
        _, prop = optimal_da_payout(group, GAMMA, DELTA, balances=[100.0, 100.0, 100.0])
        assert not prop.ok


# -- DC drawdown ------------------------------------------------------------------


class TestDrawdown:
    def test_initial_rate(self):
        rule = dc_drawdown(HazardModel.constant_force(0.03), GAMMA, DELTA, 300.0)
        assert rule.rate(0.0) == pytest.approx(31.5, abs=1e-12)

    def test_budget_binding(self):
        rule = dc_drawdown(HazardModel.constant_force(0.03), GAMMA, DELTA, 300.0)
        assert rule.discounted_budget() == pytest.approx(300.0, abs=1e-8)
        tab = dc_drawdown(
            HazardModel.piecewise([0.0, 10.0, 20.0], [0.02, 0.05, 0.09]), GAMMA, DELTA, 100.0
        )
        assert tab.discounted_budget() == pytest.approx(100.0, abs=1e-8)

    def test_infinite_gamma_lives_off_interest(self):
        rule = dc_drawdown(HazardModel.constant_force(0.03), math.inf, DELTA, 300.0)
        for t in (0.0, 5.0, 40.0):
            assert rule.rate(t) == pytest.approx(DELTA * 300.0, rel=1e-12)

    def test_scheme_refund_at_death_is_self_financing(self):
        group = GroupMortality.constant_forces([0.05, 0.07])
        scheme = DCDrawdown(gamma=GAMMA, delta=DELTA, refund_at_death=True)
        state = replay(scheme, group, [100.0, 80.0], [9.0, 14.0])
        assert state.completed
        assert state.paid == pytest.approx([100.0, 80.0], rel=1e-9)


# -- DA dominating DC ----------------------------------------------------------------


class TestDominatingPlan:
    def setup_method(self):
        self.group = GroupMortality.constant_forces(SEC5_LAMS)
        self.scheme = DaDominatingDC(gamma=GAMMA, delta=DELTA)

    def test_rate_equals_drawdown_before_first_death(self):
        ctx = _ctx(SEC5_S, self.group, DELTA)
        plan = self.scheme.begin_period(ctx)
        rules = [dc_drawdown(m, GAMMA, DELTA, s) for m, s in zip(self.group.members, SEC5_S)]
        for t in (0.0, 1.0, 9.5):
            got = plan.rates(t)
            want = [r.rate(t) for r in rules]
            assert got == pytest.approx(want, rel=1e-12)

    def test_rate_jump_after_death_matches_transfer(self):
        state = replay(self.scheme, self.group, SEC5_S, [1e12, 1e12, 10.0], horizon=30.0)
        death = [e for e in state.events if isinstance(e, ledger.DeathEvent)][0]
        assert death.transfers[0] == pytest.approx(9 / 20 * death.pre_death_balance, rel=1e-12)
        ctx = _ctx(
            SEC5_S, self.group, DELTA, t0=10.0,
            balances=death.balances_after, alive=np.array([True, True, False]),
        )
        plan = self.scheme.begin_period(ctx)
        c1 = dc_drawdown(self.group.members[0], GAMMA, DELTA, SEC5_S[0])
        for u in (10.0, 14.0, 25.0):
            jump = plan.rates(u)[0] - c1.rate(u)
            want = 0.105 * math.exp(-0.045 * (u - 10.0)) * death.transfers[0]
            assert jump == pytest.approx(want, rel=1e-10)

    def test_pathwise_dominance_sampled(self):
        rng = np.random.default_rng(17)
        rules = [dc_drawdown(m, GAMMA, DELTA, s) for m, s in zip(self.group.members, SEC5_S)]
        for _ in range(200):
            taus = rng.exponential(1.0 / np.array(SEC5_LAMS))
            state = replay(self.scheme, self.group, SEC5_S, taus, horizon=30.0)
            for ev in state.events:
                if isinstance(ev, ledger.DeathEvent):
                    assert ev.transfers.min() >= -1e-9 * state.pool_scale

    def test_general_hazard_plan_matches_constant_force(self):
        bumpy = GroupMortality(
            tuple(HazardModel.piecewise([0.0, 7.0], [l, l]) for l in SEC5_LAMS)
        )
        scheme = DaDominatingDC(gamma=GAMMA, delta=DELTA)
        ctx_c = _ctx(SEC5_S, self.group, DELTA)
        ctx_b = _ctx(SEC5_S, bumpy, DELTA)
        plan_c = self.scheme.begin_period(ctx_c)
        plan_b = scheme.begin_period(ctx_b)
        for t in (0.5, 4.0):
            assert plan_b.rates(t) == pytest.approx(plan_c.rates(t), rel=1e-8)
        assert plan_b.discounted_outflows(0.0, 6.0) == pytest.approx(
            plan_c.discounted_outflows(0.0, 6.0), rel=1e-8
        )
        w_b = scheme.death_weights(ctx_b, plan_b, 0)
        w_c = self.scheme.death_weights(ctx_c, plan_c, 0)
        assert w_b / w_b.sum() == pytest.approx(w_c / w_c.sum(), rel=1e-8)


# -- two-peer periodically fair plan ---------------------------------------------------


class TestTwoPeer:
    def test_zero_risk_share_refunds_immediately(self):
        group = GroupMortality.constant_forces([0.05, 0.03])
        scheme = two_peer_periodic(100.0, 140.0, group.members, risk_share=0.0)
        state = replay(scheme, group, [100.0, 140.0], [5.0, 9.0])
        assert state.completed
        assert state.paid == pytest.approx([100.0, 140.0], abs=1e-12)

    def test_fairness_ratio_constant_force(self):
        # balance decay rates theta chosen by the risk-share calibration give
        # expected forfeitures  s_i lam_i / (theta_i + lam_1 + lam_2) = d both
        lam1, lam2 = 0.05, 0.03
        s1, s2 = 100.0, 140.0
        group = GroupMortality.constant_forces([lam1, lam2])
        dmax = two_peer_risk_bounds(s1, s2, *group.members)
        assert dmax == pytest.approx(min(s1 * lam1, s2 * lam2) / (lam1 + lam2), rel=1e-12)
        scheme = two_peer_periodic(s1, s2, group.members, risk_share=0.6 * dmax)
        ctx = _ctx([s1, s2], group, 0.0)
        plan = scheme.begin_period(ctx)
        th1, th2 = plan.thetas
        d = 0.6 * dmax
        assert s1 * lam1 / (th1 + lam1 + lam2) == pytest.approx(d, rel=1e-10)
        assert s2 * lam2 / (th2 + lam1 + lam2) == pytest.approx(d, rel=1e-10)
        # the published ratio: s1/s2 = (lam2/lam1) (th1+lam1+lam2)/(th2+lam1+lam2)
        lhs = s1 / s2
        rhs = (lam2 / lam1) * (th1 + lam1 + lam2) / (th2 + lam1 + lam2)
        assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_symmetric_case_equal_thetas(self):
        group = GroupMortality.constant_forces([0.04, 0.04])
        scheme = two_peer_periodic(120.0, 120.0, group.members, risk_share=1.0)
        plan = scheme.begin_period(_ctx([120.0, 120.0], group, 0.0))
        assert plan.thetas[0] == pytest.approx(plan.thetas[1], rel=1e-12)

    def test_out_of_bounds_risk_share_rejected(self):
        group = GroupMortality.constant_forces([0.05, 0.03])
        with pytest.raises(SchemeError):
            two_peer_periodic(100.0, 140.0, group.members, risk_share=1e6)

    def test_lifetime_fairness_of_calibrated_plan(self):
        lam = np.array([0.05, 0.03])
        s = np.array([100.0, 140.0])
        group = GroupMortality.constant_forces(lam)
        dmax = two_peer_risk_bounds(s[0], s[1], *group.members)
        scheme = two_peer_periodic(s[0], s[1], group.members, risk_share=0.5 * dmax)
        rng = np.random.default_rng(5)
        taus = rng.exponential(1.0 / lam, size=(40_000, 2))
        plan = scheme.begin_period(_ctx(s, group, 0.0))
        th = plan.thetas
        T1 = taus.min(axis=1)
        for i in range(2):
            j = 1 - i
            died_first = taus[:, i] < taus[:, j]
            # survivor pockets everything; the early death keeps own payments
            own = s[i] * -np.expm1(-th[i] * T1)
            got = np.where(died_first, own, s[i] + s[j] * np.exp(-th[j] * T1))
            se = got.std(ddof=1) / math.sqrt(len(got))
            assert abs(got.mean() - s[i]) < 4 * se


# -- instantaneously fair plan -----------------------------------------------------------


class TestInstantaneousFair:
    def test_constant_force_rate_formula(self):
        group = GroupMortality.constant_forces(SEC5_LAMS)
        scheme = InstantaneousFairDA(delta=DELTA)
        plan = scheme.begin_period(_ctx(SEC5_S, group, DELTA))
        for u in (0.0, 2.0, 10.0):
            want = [l * s * math.exp((DELTA - l) * u) for l, s in zip(SEC5_LAMS, SEC5_S)]
            assert plan.rates(u) == pytest.approx(want, rel=1e-12)

    def test_cash_value_tracks_survival_at_zero_interest(self):
        group = GroupMortality.constant_forces([0.04, 0.05, 0.06])
        scheme = InstantaneousFairDA(delta=0.0)
        state = replay(scheme, group, [100.0, 100.0, 100.0], [1e12, 1e12, 8.0])
        acc = [e for e in state.events if isinstance(e, ledger.Accrual)][-1]
        want = 100.0 * group.members[0].survival(8.0)
        assert acc.balances_after[0] == pytest.approx(want, rel=1e-10)

    def test_dissolves_with_two_survivors(self):
        group = GroupMortality.constant_forces(SEC5_LAMS)
        scheme = InstantaneousFairDA(delta=DELTA)
        state = replay(scheme, group, SEC5_S, [20.0, 5.0, 25.0])
        assert state.completed
        assert state.deaths == 1  # only the first death is processed
        assert state.n_alive == 2
        assert state.balances == pytest.approx([0.0, 0.0, 0.0], abs=1e-9)

    def test_forced_dissolution_policy(self):
        with pytest.raises(SchemeError):
            InstantaneousFairDA(delta=0.0, dissolution=LAST_SURVIVOR)


# -- equitable tontine ---------------------------------------------------------------------


class TestEquitableTontine:
    def test_example_2_2_numbers(self):
        sched = PayoutSchedule(rate=1.0 / 30.0, end=30.0)
        scheme = EquitableTontine(pi=[0.8, 1, 1, 1, 1], schedule=sched, rebalance=True, delta=0.0)
        group = GroupMortality.constant_forces([0.02] * 5)
        state = replay(scheme, group, [360.0] * 5, [1e12] * 5, horizon=29.0)
        assert state.paid == pytest.approx([290.0] + [362.5] * 4, abs=1e-9)
        assert state.balances.sum() == pytest.approx(60.0, abs=1e-9)

    def test_example_2_1_rates(self):
        group = GroupMortality.constant_forces([0.02] * 3)
        sched = PayoutSchedule(rate=0.04, end=25.0)
        scheme = EquitableTontine(pi=[1.2, 1, 1], schedule=sched, rebalance=False, delta=0.0)
        plan = scheme.begin_period(_ctx([1000.0] * 3, group, 0.0))
        assert plan.rates(1.0) == pytest.approx([45.0, 37.5, 37.5], abs=1e-12)

    def test_homogeneous_weights_are_proper(self):
        sched = PayoutSchedule(rate=1.0 / 30.0, end=30.0)
        scheme = EquitableTontine(pi=[1, 1, 1, 1], schedule=sched, rebalance=True, delta=0.0)
        group = GroupMortality.constant_forces([0.05] * 4)
        ctx = _ctx([200.0] * 4, group, 0.0)
        assert scheme.inception_transfers(ctx) == pytest.approx(np.zeros(4), abs=1e-12)
        rng = np.random.default_rng(8)
        for _ in range(300):
            taus = rng.exponential(20.0, size=4)
            state = replay(scheme, group, [200.0] * 4, taus, horizon=30.0)
            assert ledger.audit_axiom3(state).ok

    def test_unnormalized_schedule_rejected(self):
        with pytest.raises(SchemeError):
            EquitableTontine(
                pi=[1, 1], schedule=PayoutSchedule(rate=0.1, end=30.0), delta=0.0
            )

    def test_uniform_schedule_normalizes_with_interest(self):
        sched = PayoutSchedule.uniform(25.0, 0.06)
        sched.assert_normalized(0.06)
        EquitableTontine(pi=[1, 1], schedule=sched, delta=0.06)


# -- GSA -------------------------------------------------------------------------------------


class TestGSA:
    def test_first_payment_closed_form(self):
        model = HazardModel.constant_force(0.05)
        scheme = gsa_plan(4, 100.0, model, delta=0.06)
        want = 100.0 * (1.0 - math.exp(-0.11))
        assert scheme.payment_unit == pytest.approx(want, rel=1e-12)
        assert scheme.payment_unit == pytest.approx(10.4166, abs=5e-5)

    def test_all_alive_payment_matches_discrete_tontine(self):
        model = HazardModel.constant_force(0.05)
        n, s0, delta = 4, 100.0, 0.06
        scheme = gsa_plan(n, s0, model, delta=delta)
        group = GroupMortality((model,) * n)
        state = replay(scheme, group, [s0] * n, [1e12] * n, horizon=3.5)
        atoms = [e for e in state.events if isinstance(e, ledger.PaymentAtom)]
        assert [a.t for a in atoms] == [0.0, 1.0, 2.0, 3.0]
        for a in atoms:
            want = model.survival(a.t) * scheme.payment_unit
            assert a.amounts == pytest.approx([want] * n, rel=1e-12)

    def test_immortal_cohort_pays_constant_interest_annuity(self):
        model = HazardModel.constant_force(0.0)
        scheme = gsa_plan(3, 100.0, model, delta=0.06)
        want = 100.0 * (1.0 - math.exp(-0.06))
        group = GroupMortality((model,) * 3)
        state = replay(scheme, group, [100.0] * 3, [np.inf] * 3, horizon=5.5)
        atoms = [e for e in state.events if isinstance(e, ledger.PaymentAtom)]
        assert all(a.amounts == pytest.approx([want] * 3, rel=1e-12) for a in atoms)

    def test_death_splits_share_equally_and_stays_proper(self):
        model = HazardModel.constant_force(0.05)
        scheme = gsa_plan(4, 100.0, model, delta=0.06)
        group = GroupMortality((model,) * 4)
        state = replay(scheme, group, [100.0] * 4, [2.5, 1e12, 1e12, 1e12], horizon=6.0)
        death = [e for e in state.events if isinstance(e, ledger.DeathEvent)][0]
        assert death.transfers[1:] == pytest.approx([death.pre_death_balance / 3] * 3, rel=1e-12)
        assert ledger.audit_axiom3(state).ok

    def test_heterogeneous_cohort_rejected(self):
        m1 = HazardModel.constant_force(0.05)
        m2 = HazardModel.constant_force(0.06)
        with pytest.raises(SchemeError):
            gsa_plan(2, 100.0, m1, delta=0.06, models=[m1, m2])


# -- FTP -------------------------------------------------------------------------------------


class TestFTP:
    def test_homogeneous_first_death_pays_one_third(self):
        group = GroupMortality.constant_forces([0.05] * 4)
        scheme = FTPlan(delta=0.0)
        state = replay(scheme, group, [90.0] * 4, [4.0, 1e12, 1e12, 1e12])
        death = [e for e in state.events if isinstance(e, ledger.DeathEvent)][0]
        assert death.transfers[1:] == pytest.approx([30.0] * 3, rel=1e-12)
        atom = [e for e in state.events if isinstance(e, ledger.PaymentAtom)][0]
        assert atom.kind == "transfer-payout"
        assert atom.amounts[1:] == pytest.approx([30.0] * 3, rel=1e-12)

    def test_balance_grows_at_interest_until_death(self):
        group = GroupMortality.constant_forces([0.05] * 3)
        scheme = FTPlan(delta=0.04)
        state = replay(scheme, group, [100.0] * 3, [6.0, 1e12, 1e12])
        death = [e for e in state.events if isinstance(e, ledger.DeathEvent)][0]
        assert death.pre_death_balance == pytest.approx(100.0 * math.exp(0.04 * 6.0), rel=1e-12)

    def test_two_heterogeneous_survivors_need_matched_exposure(self):
        # continuing past two survivors is only fair when lam1 s1 = lam2 s2
        group = GroupMortality.constant_forces([0.03, 0.04, 0.05])
        scheme = FTPlan(delta=0.0, dissolution=LAST_SURVIVOR)
        state = replay(scheme, group, [100.0, 90.0, 80.0], [1e12, 1e12, 3.0])
        first = [e for e in state.events if isinstance(e, ledger.DeathEvent)][0]
        # the two-survivor continuation has mismatched exposures here ...
        w1 = 0.03 * first.balances_after[0]
        w2 = 0.04 * first.balances_after[1]
        assert abs(w1 - w2) > 1e-6
        # ... so the final transfer is survivor-takes-all: proper, not fair
        last = [e for e in state.events if isinstance(e, ledger.DeathEvent)][-1]
        assert last.transfers.max() == pytest.approx(last.pre_death_balance, rel=1e-12)
        assert ledger.audit_axiom3(state).ok


class TestGeneralHazardPaths:
    def test_two_peer_calibration_with_piecewise_models(self):
        m1 = HazardModel.piecewise([0.0, 10.0], [0.03, 0.08])
        m2 = HazardModel.piecewise([0.0, 6.0], [0.05, 0.05])
        s1, s2 = 120.0, 100.0
        dmax = two_peer_risk_bounds(s1, s2, m1, m2)
        d = 0.5 * dmax
        scheme = two_peer_periodic(s1, s2, [m1, m2], risk_share=d)
        group = GroupMortality((m1, m2))
        plan = scheme.begin_period(_ctx([s1, s2], group, 0.0))
        th1, th2 = plan.thetas
        # independent check of the calibration target: the expected
        # discounted forfeiture of each peer equals the risk-share level
        for s, th, mi, mj in ((s1, th1, m1, m2), (s2, th2, m2, m1)):
            val = integrate_to_infinity(
                lambda u: s * math.exp(-th * u) * mi.conditional_density(0, u)
                * mj.conditional_survival(0, u),
                0.0, tol=1e-12, knots=[b for b in (6.0, 10.0)],
            )
            assert val == pytest.approx(d, abs=1e-9)

    def test_tabulated_schedule_matches_constant(self):
        const = PayoutSchedule(rate=0.04, end=25.0)
        tab = PayoutSchedule(times=np.linspace(0.0, 25.0, 26), values=[0.04] * 26)
        for t0, t1 in ((0.0, 25.0), (3.2, 7.9), (20.0, 30.0)):
            assert tab.discounted_mass(0.0, t0, t1) == pytest.approx(
                const.discounted_mass(0.0, t0, t1), abs=1e-9
            )
        tab.assert_normalized(0.0)
        scheme = EquitableTontine(pi=[1, 1], schedule=tab, rebalance=True, delta=0.0)
        assert scheme.schedule is tab


class TestEdgeBehaviour:
    def test_periodic_fair_plan_accepts_theta_rule(self):
        group = GroupMortality.constant_forces(SEC5_LAMS)

        def rule(ctx):
            lams = np.array([m.rates[0] for m in ctx.group.members])
            return DELTA + lams / GAMMA

        scheme = PeriodicFairDA(thetas=rule, delta=DELTA)
        state = replay(scheme, group, SEC5_S, [9.0, 22.0, 3.0])
        assert state.completed
        assert ledger.audit_axiom3(state).ok

    def test_gsa_from_life_table(self):
        ages = list(range(70, 76))
        qx = [0.02, 0.03, 0.05, 0.08, 0.13, 1.0]
        model = HazardModel.from_life_table(ages, qx)
        scheme = gsa_plan(3, 50.0, model, delta=0.04)
        # finite annuity-due sum: survival hits zero at the table end
        want = sum(model.survival(t) * math.exp(-0.04 * t) for t in range(0, 40))
        assert scheme.payment_unit == pytest.approx(50.0 / want, rel=1e-9)

    def test_gsa_death_exactly_on_payment_date(self):
        model = HazardModel.constant_force(0.05)
        scheme = gsa_plan(3, 100.0, model, delta=0.06)
        group = GroupMortality((model,) * 3)
        state = replay(scheme, group, [100.0] * 3, [2.0, 1e12, 1e12], horizon=4.5)
        events = [e for e in state.events if not isinstance(e, ledger.Accrual)]
        at_two = [e for e in events if getattr(e, "t", None) == 2.0]
        # the death clears first; the payment at t=2 then goes to survivors only
        assert isinstance(at_two[0], ledger.DeathEvent)
        atom = [e for e in at_two if isinstance(e, ledger.PaymentAtom)][0]
        assert atom.amounts[0] == 0.0
        assert atom.amounts[1] > 0
