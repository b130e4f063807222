import math

import numpy as np
import pytest

from da_engine import fairness, transfers
from da_engine.ledger import FIRST_DEATH, LAST_SURVIVOR
from da_engine.montecarlo import CohortSpec, SimulationConfig, run
from da_engine.mortality import GroupMortality, HazardModel
from da_engine.schemes import (
    DaDominatingDC,
    DCDrawdown,
    EquitableTontine,
    FTPlan,
    InstantaneousFairDA,
    OptimalDA,
    PayoutSchedule,
    PeriodicFairDA,
    TwoPeerPeriodic,
)

SEC5_LAMS = np.array([0.03, 0.04, 0.05])
SEC5_S = np.array([300.0, 270.0, 255.0])
DELTA, GAMMA = 0.06, 2.0 / 3.0
SEC5_GROUP = GroupMortality.constant_forces(SEC5_LAMS)


def expected_payment_settle_plan(t, i):
    """Independent closed form for E[cumulative discounted payments] of the
    3-peer plan with per-peer drawdown-matched payouts settling at the first
    death: derived by integrating the three first-death scenarios directly."""
    lam, s = SEC5_LAMS, SEC5_S
    b = lam / GAMMA
    theta = DELTA + b
    Lam = lam.sum()
    w = lam * s / (theta + Lam)

    def alpha(r, d):
        l = 3 - r - d
        return (w[r] + w[d] - w[l]) / (2.0 * w[d])

    c_i = DELTA + b[i]
    out = s[i] * (1 - np.exp(-c_i * t)) * np.exp(-Lam * t)
    out += s[i] * lam[i] * (
        (1 - np.exp(-Lam * t)) / Lam - (1 - np.exp(-(Lam + c_i) * t)) / (Lam + c_i)
    )
    for j in range(3):
        if j == i:
            continue
        c_j = DELTA + b[j]
        out += s[i] * lam[j] * (1 - np.exp(-Lam * t)) / Lam
        out += alpha(i, j) * s[j] * lam[j] * (1 - np.exp(-(Lam + c_j) * t)) / (Lam + c_j)
    return out


class TestLifetime:
    def test_immediate_refund_scheme_has_zero_residual(self):
        group = GroupMortality.constant_forces([0.05, 0.03])
        scheme = TwoPeerPeriodic(risk_share=0.0, delta=0.0)
        rep = fairness.lifetime_fairness(scheme, group, [100.0, 140.0], 500, seed=1)
        assert rep.residuals == pytest.approx([0.0, 0.0], abs=1e-9)

    def test_ftp_homogeneous_pool_is_lifetime_fair(self):
        group = GroupMortality.constant_forces([0.05] * 4)
        scheme = FTPlan(delta=0.03)
        rep = fairness.lifetime_fairness(scheme, group, [100.0] * 4, 20_000, seed=2)
        assert rep.ok
        assert np.abs(rep.residuals).max() < 4 * rep.standard_errors.max() + 1e-9

    def test_sec5_settle_plan_matches_closed_form_expectation(self):
        scheme = DaDominatingDC(gamma=GAMMA, delta=DELTA, dissolution=FIRST_DEATH)
        rep = fairness.lifetime_fairness(scheme, SEC5_GROUP, SEC5_S, 200_000, seed=3)
        assert rep.ok
        assert np.all(np.abs(rep.residuals) / SEC5_S < 0.01)
        # grid-level agreement with the independent expectation
        cohorts = [CohortSpec(1, s, HazardModel.constant_force(l)) for s, l in zip(SEC5_S, SEC5_LAMS)]
        cfg = SimulationConfig(
            cohorts=cohorts, scheme=scheme, horizon=30.0, n_paths=100_000,
            seed=4, gamma=GAMMA, grid_step=0.25,
        )
        stats = run(cfg)
        for t in (5.0, 10.0, 20.0, 30.0):
            got = float(np.interp(t, stats.grid, stats.payments.mean))
            want = expected_payment_settle_plan(t, 0)
            assert got == pytest.approx(want, rel=4e-3)

    def test_se_shrinks_like_sqrt_n(self):
        scheme = DaDominatingDC(gamma=GAMMA, delta=DELTA, dissolution=FIRST_DEATH)
        r1 = fairness.lifetime_fairness(scheme, SEC5_GROUP, SEC5_S, 10_000, seed=5)
        r2 = fairness.lifetime_fairness(scheme, SEC5_GROUP, SEC5_S, 100_000, seed=5)
        ratio = r1.standard_errors / r2.standard_errors
        assert np.all(np.abs(ratio / math.sqrt(10.0) - 1.0) < 0.2)


class TestEquitability:
    def test_truncated_tontine_loses_a_common_proportion(self):
        # schedule runs to 50 but the pool is wound down at 25: the residue
        # is a uniform shortfall, epsilon > 0
        sched = PayoutSchedule.uniform(50.0, 0.0)
        scheme = EquitableTontine(pi=[1, 1, 1, 1], schedule=sched, rebalance=True, delta=0.0)
        group = GroupMortality.constant_forces([0.02] * 4)
        eps, dev, rep = fairness.equitability_fit(
            scheme, group, [100.0] * 4, 4000, seed=6, horizon=25.0
        )
        assert eps > 0.05
        assert dev < 3 * rep.standard_errors.max() + 0.01 * 100.0

    def test_lifetime_fair_scheme_has_zero_epsilon(self):
        scheme = DaDominatingDC(gamma=GAMMA, delta=DELTA, dissolution=FIRST_DEATH)
        eps, dev, rep = fairness.equitability_fit(scheme, SEC5_GROUP, SEC5_S, 100_000, seed=7)
        assert abs(eps) < 0.01
        assert rep.ok

    def test_heterogeneous_tontine_not_equitable(self):
        # example 2.2 weights: participant 1's shortfall is out of proportion
        sched = PayoutSchedule(rate=1.0 / 30.0, end=30.0)
        scheme = EquitableTontine(pi=[0.8, 1, 1, 1, 1], schedule=sched, rebalance=True, delta=0.0)
        group = GroupMortality.constant_forces([0.02] * 5)
        eps, dev, rep = fairness.equitability_fit(
            scheme, group, [360.0] * 5, 4000, seed=8, horizon=29.0
        )
        assert dev > 3 * rep.standard_errors.max()


class TestPeriodic:
    def test_exponential_family_first_period_is_fair(self):
        thetas = DELTA + SEC5_LAMS / GAMMA
        scheme = PeriodicFairDA(thetas=thetas, delta=DELTA)
        rep = fairness.periodic_fairness(scheme, SEC5_GROUP, SEC5_S, 1, 200_000, seed=9)
        assert rep.ok
        assert np.all(np.abs(rep.residuals) <= 3 * rep.standard_errors + 1e-9)

    def test_second_period_restart_is_fair(self):
        thetas = DELTA + SEC5_LAMS / GAMMA
        scheme = PeriodicFairDA(thetas=thetas, delta=DELTA)
        rep = fairness.periodic_fairness(scheme, SEC5_GROUP, SEC5_S, 2, 50_000, seed=10)
        # with three peers the second period has two survivors: the two-peer
        # handoff keeps the transfer-time residual at zero
        assert np.all(np.abs(rep.residuals) <= 3 * rep.standard_errors + 1e-9)

    def test_heterogeneous_tontine_fails_periodic_fairness(self):
        sched = PayoutSchedule(rate=1.0 / 30.0, end=30.0)
        scheme = EquitableTontine(pi=[0.8, 1, 1, 1, 1], schedule=sched, rebalance=True, delta=0.0)
        group = GroupMortality.constant_forces([0.02, 0.02, 0.05, 0.05, 0.05])
        rep = fairness.periodic_fairness(scheme, group, [360.0] * 5, 1, 40_000, seed=11)
        assert np.any(np.abs(rep.residuals) > 3 * rep.standard_errors + rep.tolerance)

    def test_no_pooling_with_refund_is_trivially_fair(self):
        scheme = DCDrawdown(gamma=GAMMA, delta=DELTA, refund_at_death=True)
        group = SEC5_GROUP
        rep = fairness.periodic_fairness(scheme, group, SEC5_S, 1, 2000, seed=12)
        assert rep.residuals == pytest.approx([0.0, 0.0, 0.0], abs=1e-9)


class TestInstantaneous:
    def test_three_peer_fair_plan_passes(self):
        scheme = InstantaneousFairDA(delta=DELTA)
        grid = np.arange(0.0, 30.0 + 1e-9, 0.25)
        rep = fairness.instantaneous_fairness(scheme, SEC5_GROUP, SEC5_S, grid, 200_000, seed=13)
        assert rep.ok
        assert rep.residuals.max() < rep.tolerance + 3 * rep.standard_errors.max()

    def test_ftp_homogeneous_passes(self):
        group = GroupMortality.constant_forces([0.06] * 4)
        scheme = FTPlan(delta=0.03)
        grid = np.arange(0.0, 20.0 + 1e-9, 0.5)
        rep = fairness.instantaneous_fairness(scheme, group, [100.0] * 4, grid, 12_000, seed=14)
        assert rep.ok

    def test_periodic_but_not_instantaneous_fails(self):
        # exponential payouts are periodically fair yet the payout rate does
        # not track the forfeiture rate instant by instant
        thetas = DELTA + SEC5_LAMS / GAMMA
        scheme = PeriodicFairDA(thetas=thetas, delta=DELTA, dissolution=LAST_SURVIVOR)
        grid = np.arange(0.0, 30.0 + 1e-9, 0.5)
        rep = fairness.instantaneous_fairness(scheme, SEC5_GROUP, SEC5_S, grid, 6_000, seed=15)
        assert not rep.ok

    def test_two_survivor_heterogeneous_continuation_unattainable(self):
        res = transfers.feasibility([0.04 * 120.0, 0.05 * 90.0])
        assert not res.ok


class TestImplicationChain:
    def test_instantaneously_fair_scheme_passes_weaker_notions(self):
        scheme = InstantaneousFairDA(delta=DELTA)
        grid = np.arange(0.0, 30.0 + 1e-9, 0.5)
        inst = fairness.instantaneous_fairness(scheme, SEC5_GROUP, SEC5_S, grid, 100_000, seed=16)
        per = fairness.periodic_fairness(scheme, SEC5_GROUP, SEC5_S, 1, 100_000, seed=16)
        life = fairness.lifetime_fairness(scheme, SEC5_GROUP, SEC5_S, 100_000, seed=16)
        eps, dev, _ = fairness.equitability_fit(scheme, SEC5_GROUP, SEC5_S, 100_000, seed=16)
        assert inst.ok and per.ok and life.ok
        assert abs(eps) < 0.01


class TestClassification:
    def test_rationality_rows_match_published_table(self):
        assert fairness.classify("equitable-tontine").axioms == (False, True, False)
        assert fairness.classify("gsa").axioms == (False, True, False)
        assert fairness.classify("ftp").axioms == (True, True, True)
        assert fairness.classify("decentralized-annuity").axioms == (True, True, True)

    def test_fairness_rows_match_published_table(self):
        t = fairness.classification_tables()["fairness"]
        assert t["equitable-tontine"] == (True, False, False, False)
        assert t["modified-equitable-tontine"] == (True, True, False, False)
        assert t["ftp-last-survivor"] == (True, True, False, False)
        assert t["ftp-two-survivors"] == (True, True, True, True)
        assert t["fair-da-last-survivor"] == (True, True, True, False)
        assert t["fair-da-two-survivors"] == (True, True, True, True)

    def test_markdown_row_and_unknown_family(self):
        row = fairness.classify("ftp-two-survivors")
        assert "✓" in row.markdown()
        with pytest.raises(ValueError):
            fairness.classify("perpetuity")


class TestFastPathEquivalence:
    def test_settle_fast_path_matches_generic_replay_optimal(self):
        scheme = OptimalDA(gamma=GAMMA, delta=DELTA, dissolution=FIRST_DEATH)
        fast = fairness._fast_settle_paths(scheme, SEC5_GROUP, SEC5_S, 3000, seed=31)
        gen = fairness._generic_lifetime_paths(scheme, SEC5_GROUP, SEC5_S, 3000, seed=31, horizon=None)
        assert np.abs(fast - gen).max() < 1e-8

    def test_ri_fast_path_matches_generic_replay(self):
        scheme = InstantaneousFairDA(delta=DELTA)
        fast = fairness._fast_ri_lifetime(scheme, SEC5_GROUP, SEC5_S, 2000, seed=32)
        gen = fairness._generic_lifetime_paths(scheme, SEC5_GROUP, SEC5_S, 2000, seed=32, horizon=None)
        assert np.abs(fast - gen).max() < 1e-8

    def test_two_member_pool_settles_on_first_death(self):
        from da_engine import ledger as led

        group = GroupMortality.constant_forces([0.05, 0.08])
        scheme = DaDominatingDC(gamma=GAMMA, delta=DELTA, dissolution=FIRST_DEATH)
        state = led.replay(scheme, group, [100.0, 90.0], [7.0, 20.0])
        assert state.completed and not state.infeasible_transfer
        death = [e for e in state.events if isinstance(e, led.DeathEvent)][0]
        assert death.transfers[1] == pytest.approx(death.pre_death_balance, rel=1e-12)
