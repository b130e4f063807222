"""Run configuration: TOML (presets, comments allowed) or JSON, schema-validated.

Unknown keys are rejected everywhere so presets cannot silently drift from
the engine; scheme parameters live under ``[scheme.params]`` and are family
specific.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .ledger import FIRST_DEATH, LAST_SURVIVOR, NO_DISSOLUTION, TWO_SURVIVORS
from .montecarlo import CohortSpec, SimulationConfig
from .mortality import HazardModel
from .schemes import (
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
)

DISSOLUTIONS = {LAST_SURVIVOR, TWO_SURVIVORS, FIRST_DEATH, NO_DISSOLUTION}


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class RunConfig:
    simulation: SimulationConfig
    output_dir: str = "out"
    formats: tuple = ("csv", "json")
    death_times: list = None  # deterministic witness path instead of sampling
    raw: dict = field(default_factory=dict)


def _require_keys(section: dict, allowed: set, where: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in [{where}]")


def _hazard_from(spec, where: str) -> HazardModel:
    if not isinstance(spec, dict):
        raise ConfigError(f"[{where}] hazard must be a table")
    kind = spec.get("kind")
    if kind == "constant-force":
        _require_keys(spec, {"kind", "rate"}, where)
        return HazardModel.constant_force(float(spec["rate"]))
    if kind == "piecewise-constant-force":
        _require_keys(spec, {"kind", "breaks", "rates"}, where)
        return HazardModel.piecewise(spec["breaks"], spec["rates"])
    if kind == "tabular-life-table":
        _require_keys(spec, {"kind", "csv", "ages", "qx"}, where)
        if "csv" in spec:
            return HazardModel.from_life_table_csv(spec["csv"])
        return HazardModel.from_life_table(spec["ages"], spec["qx"])
    raise ConfigError(f"[{where}] unknown hazard kind {kind!r}")


def _schedule_from(params: dict, delta: float) -> PayoutSchedule:
    spec = params.get("schedule")
    if spec is None:
        raise ConfigError("[scheme.params] equitable tontine needs a schedule")
    _require_keys(spec, {"kind", "rate", "end", "times", "values"}, "scheme.params.schedule")
    kind = spec.get("kind", "constant")
    if kind == "uniform":
        return PayoutSchedule.uniform(float(spec["end"]), delta)
    if kind == "constant":
        return PayoutSchedule(rate=float(spec["rate"]), end=float(spec["end"]))
    if kind == "tabulated":
        return PayoutSchedule(times=spec["times"], values=spec["values"])
    raise ConfigError(f"unknown schedule kind {kind!r}")


def build_scheme(family: str, params: dict, delta: float, gamma: float, cohorts, dissolution=None):
    """Construct the scheme object for a config; family-specific parameters."""
    params = dict(params or {})
    kwargs = {"delta": delta}
    if dissolution is not None:
        if dissolution not in DISSOLUTIONS:
            raise ConfigError(f"unknown dissolution {dissolution!r}")
        kwargs["dissolution"] = dissolution

    if family == "optimal-da":
        _require_keys(params, set(), "scheme.params")
        return OptimalDA(gamma=gamma, **kwargs)
    if family == "da-dominating-dc":
        _require_keys(params, set(), "scheme.params")
        return DaDominatingDC(gamma=gamma, **kwargs)
    if family == "periodic-fair-da":
        _require_keys(params, {"thetas", "rule", "two_peer_risk_fraction"}, "scheme.params")
        thetas = params.get("thetas")
        if params.get("rule") == "dc-matching" or thetas is None:
            lams = _member_rates(cohorts)
            thetas = delta + lams / gamma
        return PeriodicFairDA(
            thetas=np.asarray(thetas, dtype=float),
            two_peer_risk_fraction=params.get("two_peer_risk_fraction", 0.5),
            **kwargs,
        )
    if family == "instantaneous-fair-da":
        _require_keys(params, set(), "scheme.params")
        return InstantaneousFairDA(delta=delta)
    if family == "two-peer-da":
        _require_keys(params, {"risk_share"}, "scheme.params")
        return TwoPeerPeriodic(risk_share=float(params["risk_share"]), **kwargs)
    if family == "dc-drawdown":
        _require_keys(params, {"refund_at_death"}, "scheme.params")
        return DCDrawdown(gamma=gamma, refund_at_death=bool(params.get("refund_at_death", False)), delta=delta)
    if family == "equitable-tontine":
        _require_keys(params, {"pi", "schedule", "rebalance"}, "scheme.params")
        return EquitableTontine(
            pi=params["pi"],
            schedule=_schedule_from(params, delta),
            rebalance=bool(params.get("rebalance", True)),
            **kwargs,
        )
    if family == "gsa":
        _require_keys(params, set(), "scheme.params")
        models = [c.hazard for c in cohorts]
        deposits = {c.deposit for c in cohorts}
        if len({tuple(m.rates) + tuple(m.breaks) for m in models}) > 1 or len(deposits) > 1:
            raise SchemeError("GSA supports homogeneous cohorts only")
        return GSAPlanScheme(model=models[0], s0=float(next(iter(deposits))), **kwargs)
    if family == "ftp":
        _require_keys(params, set(), "scheme.params")
        return FTPlan(**kwargs)
    raise ConfigError(f"unknown scheme family {family!r}")


def _member_rates(cohorts) -> np.ndarray:
    rates = []
    for c in cohorts:
        if len(c.hazard.rates) != 1:
            raise ConfigError("dc-matching decay rule needs constant forces")
        rates.extend([c.hazard.rates[0]] * c.count)
    return np.asarray(rates)


def load_config(path) -> RunConfig:
    """Parse and validate a TOML or JSON run configuration."""
    text = Path(path).read_bytes()
    if str(path).endswith(".json"):
        data = json.loads(text)
    else:
        data = tomllib.loads(text.decode())
    return config_from_dict(data)


def config_from_dict(data: dict) -> RunConfig:
    _require_keys(data, {"group", "scheme", "economics", "simulation", "output", "tracked"}, "root")
    for key in ("group", "scheme", "economics", "simulation"):
        if key not in data:
            raise ConfigError(f"missing [{key}] section")

    group = data["group"]
    _require_keys(group, {"cohorts"}, "group")
    raw_cohorts = group.get("cohorts") or []
    if not raw_cohorts:
        raise ConfigError("[group] needs at least one cohort")
    cohorts = []
    for i, c in enumerate(raw_cohorts):
        _require_keys(c, {"count", "deposit", "hazard"}, f"group.cohorts[{i}]")
        count = int(c["count"])
        deposit = float(c["deposit"])
        if count < 1 or deposit <= 0:
            raise ConfigError(f"cohort {i}: count must be >= 1 and deposit positive")
        cohorts.append(CohortSpec(count, deposit, _hazard_from(c["hazard"], f"group.cohorts[{i}].hazard")))

    econ = data["economics"]
    _require_keys(econ, {"delta", "gamma"}, "economics")
    delta = float(econ.get("delta", 0.0))
    gamma = float(econ.get("gamma", 1.0))
    if delta < 0 or gamma < 0:
        raise ConfigError("delta and gamma must be non-negative")

    sch = data["scheme"]
    _require_keys(sch, {"family", "dissolution", "params", "on_infeasible"}, "scheme")
    scheme = build_scheme(
        sch.get("family"), sch.get("params"), delta, gamma, cohorts, sch.get("dissolution")
    )
    if "on_infeasible" in sch:
        if sch["on_infeasible"] not in ("dissolve", "abort"):
            raise ConfigError("scheme.on_infeasible must be 'dissolve' or 'abort'")
        scheme.on_infeasible = sch["on_infeasible"]

    sim = data["simulation"]
    _require_keys(
        sim, {"n_paths", "seed", "horizon", "grid_step", "death_times", "audit", "engine"}, "simulation"
    )
    tracked = (0, 0)
    if "tracked" in data:
        _require_keys(data["tracked"], {"cohort", "member"}, "tracked")
        tracked = (int(data["tracked"].get("cohort", 0)), int(data["tracked"].get("member", 0)))

    config = SimulationConfig(
        cohorts=cohorts,
        scheme=scheme,
        horizon=float(sim["horizon"]),
        n_paths=int(sim.get("n_paths", 1)),
        seed=int(sim.get("seed", 0)),
        gamma=gamma,
        grid_step=float(sim.get("grid_step", 0.25)),
        tracked=tracked,
        audit=bool(sim.get("audit", False)),
        engine=sim.get("engine", "auto"),
    )

    out = data.get("output", {})
    _require_keys(out, {"dir", "formats"}, "output")
    formats = tuple(out.get("formats", ("csv", "json")))
    for f in formats:
        if f not in ("csv", "json"):
            raise ConfigError(f"unknown output format {f!r}")

    return RunConfig(
        simulation=config,
        output_dir=out.get("dir", "out"),
        formats=formats,
        death_times=[float(t) for t in sim["death_times"]] if "death_times" in sim else None,
        raw=data,
    )
