"""Complete plan constructions: payout rules, transfer rules, dissolution policies."""

from ..ledger import FIRST_DEATH, LAST_SURVIVOR, NO_DISSOLUTION, TWO_SURVIVORS
from .base import (
    DiscountedExponentialPlan,
    PaymentPlan,
    Scheme,
    SchemeError,
    SurvivalDensityPlan,
    ZeroPlan,
    next_death_exposure,
    transfer_column,
)
from .drawdown import (
    DaDominatingDC,
    DCDrawdown,
    DrawdownRule,
    OptimalDA,
    OptimalPayout,
    da_dominating_dc,
    dc_drawdown,
    optimal_da_payout,
)
from .fair import (
    InstantaneousFairDA,
    PeriodicFairDA,
    TwoPeerPeriodic,
    instantaneous_fair_payout,
    two_peer_periodic,
    two_peer_risk_bounds,
)
from .tontines import (
    EquitableTontine,
    FTPlan,
    GSAPlanScheme,
    PayoutSchedule,
    equitable_tontine,
    ftp_plan,
    gsa_plan,
)

__all__ = [
    "FIRST_DEATH",
    "LAST_SURVIVOR",
    "NO_DISSOLUTION",
    "TWO_SURVIVORS",
    "DiscountedExponentialPlan",
    "PaymentPlan",
    "Scheme",
    "SchemeError",
    "SurvivalDensityPlan",
    "ZeroPlan",
    "next_death_exposure",
    "transfer_column",
    "DaDominatingDC",
    "DCDrawdown",
    "DrawdownRule",
    "OptimalDA",
    "OptimalPayout",
    "da_dominating_dc",
    "dc_drawdown",
    "optimal_da_payout",
    "InstantaneousFairDA",
    "PeriodicFairDA",
    "TwoPeerPeriodic",
    "instantaneous_fair_payout",
    "two_peer_periodic",
    "two_peer_risk_bounds",
    "EquitableTontine",
    "FTPlan",
    "GSAPlanScheme",
    "PayoutSchedule",
    "equitable_tontine",
    "ftp_plan",
    "gsa_plan",
]
