"""Command-line driver: simulate, audit, fairness reports, classification,
transfer solving.  Exit codes: 0 success, 1 validation error, 2 infeasibility."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import fairness as fairness_mod
from . import ledger, transfers
from .config import ConfigError, RunConfig, load_config
from .montecarlo import _fmt, run
from .schemes import DiscountedExponentialPlan, SchemeError, next_death_exposure

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_INFEASIBLE = 2


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SchemeError, ledger.LedgerError, ValueError) as exc:
        if isinstance(exc, transfers.InfeasibleTransferError):
            print(f"infeasible: {exc}", file=sys.stderr)
            return EXIT_INFEASIBLE
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="da-engine",
        description="Construct, simulate and audit decentralized annuity pools.",
    )
    sub = parser.add_subparsers(required=True)

    sim = sub.add_parser("simulate", help="run a configured simulation")
    sim.add_argument("config")
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--paths", type=int, default=None)
    sim.add_argument("--out", default=None)
    sim.add_argument("--format", choices=("csv", "json"), action="append", default=None)
    sim.add_argument("--audit", choices=("strict", "permit"), default=None,
                     help="negative-balance policy override")
    sim.set_defaults(func=cmd_simulate)

    aud = sub.add_parser("audit", help="replay paths and audit the rationality axioms")
    aud.add_argument("config")
    aud.add_argument("--axioms", default="1,2,3")
    aud.add_argument("--paths", type=int, default=None)
    aud.add_argument("--seed", type=int, default=None)
    aud.set_defaults(func=cmd_audit)

    fair = sub.add_parser("fairness", help="evaluate a fairness notion by Monte Carlo")
    fair.add_argument("config")
    fair.add_argument("--notion", required=True,
                      choices=("lifetime", "equitability", "periodic", "instantaneous"))
    fair.add_argument("--paths", type=int, default=None)
    fair.add_argument("--seed", type=int, default=None)
    fair.add_argument("--period", type=int, default=1)
    fair.add_argument("--horizon", type=float, default=None,
                      help="truncate lifetime/equitability runs (default: run to dissolution)")
    fair.set_defaults(func=cmd_fairness)

    cls = sub.add_parser("classify", help="print the published classification of a plan family")
    cls.add_argument("family")
    cls.add_argument("--format", choices=("markdown", "json"), default="markdown")
    cls.set_defaults(func=cmd_classify)

    sol = sub.add_parser("solve-transfers", help="solve transfer coefficients for weights")
    sol.add_argument("weights", help='JSON like {"weights": [40, 45, 50]} or @file')
    sol.set_defaults(func=cmd_solve_transfers)
    return parser


def _resolve_config(path: str):
    """Accept a filesystem path or the name of a bundled preset."""
    if Path(path).exists():
        return path
    from importlib import resources

    name = Path(path).name
    if not name.endswith(".toml"):
        name += ".toml"
    candidate = resources.files("da_engine") / "presets" / name
    if candidate.is_file():
        return candidate
    raise ConfigError(f"config file {path!r} not found (and no bundled preset of that name)")


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    sim = cfg.simulation
    if getattr(args, "seed", None) is not None:
        sim.seed = args.seed
    if getattr(args, "paths", None) is not None:
        sim.n_paths = args.paths
    if getattr(args, "audit", None) is not None:
        sim.scheme.mode = "reject" if args.audit == "strict" else "permit"
    if getattr(args, "out", None) is not None:
        cfg.output_dir = args.out
    if getattr(args, "format", None):
        cfg.formats = tuple(args.format)
    return cfg


def _alpha_summary(sim) -> dict:
    """Initial transfer coefficients for exponential constant-force plans."""
    scheme = sim.scheme
    group = sim.group()
    deposits = sim.deposits()
    if len(deposits) > 12 or not all(len(m.rates) == 1 for m in group.members):
        return {}
    state = ledger.new_pool(deposits, scheme.delta, mode=getattr(scheme, "mode", "reject"))
    try:
        ledger.apply_initial_transfers(state, scheme.inception_transfers(ledger._context(state, group)))
        ctx = ledger._context(state, group)
        plan = scheme.begin_period(ctx)
        if not isinstance(plan, DiscountedExponentialPlan):
            return {}
        weights = next_death_exposure(ctx, plan)
        n = len(weights)
        if n == 3:
            matrix = transfers.solve_alpha_3peer(weights)
        elif n >= 3 and transfers.feasibility_large_n(weights):
            matrix = transfers.solve_alpha_npeer(weights)
        elif n >= 3:
            matrix = transfers.solve_alpha_general(weights)
        else:
            return {}
    except (SchemeError, transfers.InfeasibleTransferError, ledger.LedgerError):
        return {}
    return {
        "transfer_weights": [_fmt(w) for w in weights],
        "transfer_coefficients": [[_fmt(a) for a in row] for row in matrix.alpha],
    }


def _witness_run(cfg: RunConfig, outdir: Path) -> dict:
    """Deterministic single-path replay with full audits and event log."""
    sim = cfg.simulation
    state = ledger.replay(
        sim.scheme, sim.group(), sim.deposits(), cfg.death_times, horizon=sim.horizon
    )
    (outdir / "events.jsonl").write_text("\n".join(ledger.event_log_lines(state)) + "\n")
    a1, a2, a3 = ledger.audit_axiom1(state), ledger.audit_axiom2(state), ledger.audit_axiom3(state)
    return {
        "mode": "witness",
        "death_times": cfg.death_times,
        "completed": state.completed,
        "final_balances": [_fmt(b) for b in state.balances],
        "discounted_payments": [_fmt(p) for p in state.paid],
        "deposits": [_fmt(d) for d in state.deposits],
        "audits": {
            "axiom1": {"ok": a1.ok, "detail": a1.detail},
            "axiom2": {"ok": a2.ok, "detail": a2.detail},
            "axiom3": {"ok": a3.ok, "detail": a3.detail},
            "proper": ledger.is_proper(state),
            "conservation_residual": ledger.conservation_residual(state),
        },
    }


def cmd_simulate(args) -> int:
    cfg = _apply_overrides(load_config(_resolve_config(args.config)), args)
    sim = cfg.simulation
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)

    summary = {"config": str(args.config), "seed": sim.seed, "n_paths": sim.n_paths}
    summary.update(_alpha_summary(sim))
    if cfg.death_times is not None:
        summary.update(_witness_run(cfg, outdir))
    else:
        stats = run(sim)
        if "csv" in cfg.formats:
            stats.to_csv(outdir / "stats.csv")
        summary.update(stats.summary())
        # one sample event log for inspection
        group, deposits = sim.group(), sim.deposits()
        if len(deposits) <= 50:
            rng = np.random.Generator(np.random.Philox(key=[sim.seed, 0]))
            u = rng.random((1, len(group.members)))
            taus = np.array([m.sample(u[0, i]) for i, m in enumerate(group.members)])
            state = ledger.replay(sim.scheme, group, deposits, taus, horizon=sim.horizon)
            (outdir / "events.jsonl").write_text("\n".join(ledger.event_log_lines(state)) + "\n")
    if "json" in cfg.formats:
        (outdir / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default))
    print(json.dumps(summary, indent=2, default=_json_default))
    return EXIT_OK


def cmd_audit(args) -> int:
    cfg = _apply_overrides(load_config(_resolve_config(args.config)), args)
    sim = cfg.simulation
    axioms = sorted({int(a) for a in str(args.axioms).split(",") if a.strip()})
    group, deposits = sim.group(), sim.deposits()
    n_paths = args.paths or min(sim.n_paths, 2000)

    if cfg.death_times is not None:
        states = [ledger.replay(sim.scheme, group, deposits, cfg.death_times, horizon=sim.horizon)]
    else:
        states = []
        rng = np.random.Generator(np.random.Philox(key=[sim.seed, 0]))
        u = rng.random((n_paths, len(group.members)))
        for p in range(n_paths):
            taus = np.array([m.sample(u[p, i]) for i, m in enumerate(group.members)])
            states.append(ledger.replay(sim.scheme, group, deposits, taus, horizon=sim.horizon))

    report = {"n_paths": len(states), "axioms": {}}
    fns = {1: ledger.audit_axiom1, 2: ledger.audit_axiom2, 3: ledger.audit_axiom3}
    for a in axioms:
        fails, witness = 0, None
        for st in states:
            res = fns[a](st)
            if a == 1 and not st.completed:
                continue
            if not res.ok:
                fails += 1
                if witness is None:
                    witness = res.detail
        report["axioms"][f"axiom{a}"] = {"failures": fails, "witness": witness}
    report["proper_fraction"] = float(np.mean([ledger.is_proper(st) for st in states]))
    report["max_conservation_residual"] = max(
        ledger.conservation_residual(st) for st in states
    )
    print(json.dumps(report, indent=2, default=_json_default))
    return EXIT_OK


def cmd_fairness(args) -> int:
    cfg = _apply_overrides(load_config(_resolve_config(args.config)), args)
    sim = cfg.simulation
    group, deposits = sim.group(), sim.deposits()
    n = args.paths or sim.n_paths
    if args.notion == "lifetime":
        rep = fairness_mod.lifetime_fairness(sim.scheme, group, deposits, n, sim.seed, args.horizon)
    elif args.notion == "equitability":
        eps, dev, rep = fairness_mod.equitability_fit(
            sim.scheme, group, deposits, n, sim.seed, args.horizon
        )
    elif args.notion == "periodic":
        rep = fairness_mod.periodic_fairness(sim.scheme, group, deposits, args.period, n, sim.seed)
    else:
        rep = fairness_mod.instantaneous_fairness(
            sim.scheme, group, deposits, sim.grid(), n, sim.seed
        )
    out = {
        "notion": rep.notion,
        "ok": rep.ok,
        "residuals": [_fmt(r) for r in rep.residuals],
        "standard_errors": [_fmt(s) for s in rep.standard_errors],
        "tolerance": _fmt(rep.tolerance),
        "n_paths": rep.n_paths,
    }
    if args.notion == "equitability":
        out["epsilon"] = _fmt(rep.detail["epsilon"])
        out["max_deviation"] = _fmt(rep.detail["max_deviation"])
    print(json.dumps(out, indent=2, default=_json_default))
    return EXIT_OK


def cmd_classify(args) -> int:
    row = fairness_mod.classify(args.family)
    if args.format == "json":
        print(
            json.dumps(
                {"family": row.family, "axioms": row.axioms, "fairness": row.fairness},
                indent=2,
            )
        )
    else:
        header = ["family"]
        if row.axioms is not None:
            header += ["axiom1 | axiom2 | axiom3"]
        if row.fairness is not None:
            header += ["equitability | lifetime | periodic | instantaneous"]
        print("| " + " | ".join(header) + " |")
        print(row.markdown())
    return EXIT_OK


def cmd_solve_transfers(args) -> int:
    text = args.weights
    if text.startswith("@"):
        text = Path(text[1:]).read_text()
    try:
        payload = json.loads(text)
        w = payload["weights"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        print(f"error: expected JSON with a 'weights' array: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    matrix = transfers.solve_alpha_general(w)
    out = {
        "weights": [_fmt(x) for x in matrix.weights],
        "alpha": [[_fmt(a) for a in row] for row in matrix.alpha],
        "column_sums": [_fmt(c) for c in matrix.column_sums()],
    }
    print(json.dumps(out, indent=2))
    return EXIT_OK


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


if __name__ == "__main__":
    sys.exit(main())
