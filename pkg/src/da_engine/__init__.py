"""Decentralized annuity engine: pooled lifetime-income schemes with explicit
cash-value ledgers, at-death credit transfers, fairness auditing and Monte
Carlo comparison against self-managed drawdown."""

from . import fairness, ledger, montecarlo, mortality, schemes, transfers

__all__ = ["fairness", "ledger", "montecarlo", "mortality", "schemes", "transfers"]
__version__ = "0.1.0"
