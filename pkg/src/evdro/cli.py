"""Command-line entry point: ``evdro <subcommand> [flags]``.

Exit codes: 0 success, 2 invalid input or configuration, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import forecast as fc
from . import io as fio
from .model import FleetState, ModelError
from .reformulation import BalancingProblem, InfeasibleProgram
from .simulator import (DROPolicy, IntervalRecord, SimulationLog, comparison_report, read_log,
                        run_receding_horizon, warm_up)
from .uncertainty import EstimationError, EstimationReport, MomentUncertaintySet, run_estimation

log = logging.getLogger("evdro")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_SOLVER = 3


class SolverFailure(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags already; keep the usage on stderr
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _global_flags(p: argparse.ArgumentParser) -> None:
    # defaults are None so that only flags given on the command line override the config
    p.add_argument("--config", type=Path, help="RunConfig JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["counterpart", "theorem1", "non-robust"])
    p.add_argument("--alpha", type=float, help="ambiguity-set quantile level")
    p.add_argument("--eta", type=float, help="confidence level of the bootstrap regions")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--tol", type=float, help="conic solver tolerance")
    p.add_argument("--data", type=Path, help="data directory (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="evdro", description="Distributionally robust balancing of an electric taxi fleet.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic city and history")
    _global_flags(p)
    p.add_argument("--regions", type=int, default=5)
    p.add_argument("--fleet", type=int, default=120)
    p.add_argument("--intervals-per-day", type=int, default=24)
    p.add_argument("--horizon", type=int, default=2)
    p.add_argument("--days", type=int, default=7)

    p = sub.add_parser("fit", help="held-out MSE of each predictor")
    _global_flags(p)
    p.add_argument("--predictors", nargs="+", help="e.g. persistence ar(2) moving_average(3)")
    p.add_argument("--holdout", type=float, default=0.25)

    p = sub.add_parser("uncertainty", help="bootstrap the ambiguity-set parameters")
    _global_flags(p)
    p.add_argument("--role", choices=["demand", "supply", "both"], default="both")

    p = sub.add_parser("solve", help="build and solve one balancing program")
    _global_flags(p)
    p.add_argument("--demand-report", type=Path)
    p.add_argument("--supply-report", type=Path)
    p.add_argument("--omega", type=float, help="use this omega for both sets")
    p.add_argument("--gamma", type=float, help="use this gamma for both sets")
    p.add_argument("--interval", type=int, default=0, help="interval of day at which to plan")

    p = sub.add_parser("simulate", help="receding-horizon episodes")
    _global_flags(p)
    p.add_argument("--episodes", type=int)
    p.add_argument("--shift-mean", type=float)
    p.add_argument("--shift-sd", type=float)
    p.add_argument("--demand-report", type=Path)
    p.add_argument("--supply-report", type=Path)
    p.add_argument("--no-timing", action="store_true", help="zero the timing column for reproducible logs")

    p = sub.add_parser("report", help="compare simulation logs")
    _global_flags(p)
    p.add_argument("logs", nargs="+", type=Path, help="log CSVs; the first is the reference")
    return parser


# ---------------------------------------------------------------------------

def _config(args) -> fio.RunConfig:
    cfg = fio.load_config(args.config) if args.config else fio.RunConfig()
    for name in ("seed", "mode", "alpha", "eta", "tol"):
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, val)
    if args.out is not None:
        cfg.out = str(args.out)
    if getattr(args, "data", None) is not None:
        cfg.data_dir = str(args.data)
    for flag, key in (("episodes", "episodes"), ("shift_mean", "shift_mean"), ("shift_sd", "shift_sd")):
        val = getattr(args, flag, None)
        if val is not None:
            setattr(cfg, key, val)
    return cfg.validate()


def _out_dir(cfg) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _histories(cfg):
    d = Path(cfg.data_dir)
    for name in ("history_demand.csv", "history_supply.csv"):
        if not (d / name).is_file():
            raise fio.ConfigError(f"missing {d / name}")
    return (fc.SeriesHistory(fio.read_history(d / "history_demand.csv"), "demand"),
            fc.SeriesHistory(fio.read_history(d / "history_supply.csv"), "supply"))


def _scenario(cfg):
    return cfg.apply_to(fio.read_scenario(cfg.data_dir))


def _load_report(path):
    if path is None:
        return None
    if not Path(path).is_file():
        raise fio.ConfigError(f"report {path} does not exist")
    return EstimationReport.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args, cfg) -> int:
    out = Path(args.out) if args.out is not None else Path(cfg.data_dir)
    paths = fio.gen_data(out, cfg.seed, n_regions=args.regions, fleet_size=args.fleet,
                         n_intervals_per_day=args.intervals_per_day, horizon=args.horizon, days=args.days)
    for p in paths.values():
        print(p)
    return EXIT_OK


def _md_table(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines)


def cmd_fit(args, cfg) -> int:
    specs = [fc.PredictorSpec.parse(s) for s in (args.predictors or cfg.predictors)]
    if not 0 < args.holdout < 1:
        raise fio.ConfigError("holdout must lie in (0, 1)")
    rows = []
    best = {}
    for hist in _histories(cfg):
        choice, table = fc.select_predictor(specs, hist, horizon=1, holdout=args.holdout)
        best[hist.role] = choice.label()
        rows += [(hist.role, spec.label(), err) for spec, err in table]
    out = _out_dir(cfg)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    buf.write(fio.SCHEMA_LINE + "\n")
    w.writerow(("role", "predictor", "mse"))
    w.writerows((r, p, repr(float(e))) for r, p, e in rows)
    (out / "mse_table.csv").write_text(buf.getvalue())
    (out / "best_predictors.json").write_text(json.dumps(best, indent=1, sort_keys=True) + "\n")
    print(_md_table(("role", "predictor", "mse"), [(r, p, f"{e:.4f}") for r, p, e in rows]))
    return EXIT_OK


def cmd_uncertainty(args, cfg) -> int:
    demand, supply = _histories(cfg)
    horizon = fio.read_scenario(cfg.data_dir).city.horizon
    bcfg = cfg.bootstrap_config()
    out = _out_dir(cfg)
    jobs = []
    if args.role in ("demand", "both"):
        jobs.append((demand, cfg.demand_predictor, bcfg))
    if args.role in ("supply", "both"):
        jobs.append((supply, cfg.supply_predictor, replace(bcfg, seed=bcfg.seed + 1)))
    for hist, spec, bc in jobs:
        rep = run_estimation(hist, fc.PredictorSpec.parse(spec), bc, horizon)
        path = out / f"uncertainty_{hist.role}.json"
        path.write_text(rep.to_json() + "\n")
        print(f"{hist.role}: omega_hat={rep.omega_hat:.6g} gamma_hat={rep.gamma_hat:.6g} -> {path}")
    return EXIT_OK


def _set_for(report, center, omega, gamma, conservative):
    d = center.size
    if report is not None and report.sigma_hat.shape[0] != d:
        raise fio.ConfigError(f"report dimension {report.sigma_hat.shape[0]} does not match {d}")
    if report is None:
        sigma = np.eye(d)
        om, ga = 0.0, 1.0
    else:
        sigma = report.sigma_hat
        om = report.omega_region[1] if conservative else report.omega_hat
        ga = report.gamma_region[1] if conservative else report.gamma_hat
    om = om if omega is None else omega
    ga = ga if gamma is None else gamma
    return MomentUncertaintySet(center, sigma, max(om, 0.0), ga)


def cmd_solve(args, cfg) -> int:
    scenario = _scenario(cfg)
    city = scenario.city
    demand, supply = _histories(cfg)
    tau = city.horizon
    centers = []
    for hist, spec in ((demand, cfg.demand_predictor), (supply, cfg.supply_predictor)):
        fitted = fc.fit(fc.PredictorSpec.parse(spec), hist, tau)
        centers.append(fc.predict(fitted, hist.observations, tau).point)
    dset = _set_for(_load_report(args.demand_report), centers[0], args.omega, args.gamma, cfg.conservative)
    cset = _set_for(_load_report(args.supply_report), centers[1], args.omega, args.gamma, cfg.conservative)
    state = FleetState(scenario.initial_vacant, scenario.initial_occupied, scenario.initial_lowbatt,
                       np.zeros(city.n_regions, dtype=int))
    try:
        prob = BalancingProblem(city, scenario.kernel, state, dset, cset, cfg.mode, start_interval=args.interval)
        sol = prob.solve(tol=cfg.tol)
    except InfeasibleProgram as exc:
        raise SolverFailure(str(exc)) from exc
    if not sol.optimal:
        raise SolverFailure(f"solver ended with status {sol.status}")
    out = _out_dir(cfg)
    fio.write_decision(out / "decision.csv", sol.decision.vacant_moves[0], sol.decision.lowbatt_moves[0],
                       args.interval)
    summary = {"mode": sol.mode, "status": sol.status, "objective": sol.objective, "iterations": sol.iterations,
               "relaxation": sol.relaxation, "kkt": sol.kkt, "ratio_lower": sol.ratio_lower.tolist(),
               "ratio_upper": sol.ratio_upper.tolist()}
    (out / "solution.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"{sol.mode}: status={sol.status} objective={sol.objective:.6g} -> {out / 'decision.csv'}")
    return EXIT_OK


def cmd_simulate(args, cfg) -> int:
    scenario = _scenario(cfg)
    scenario = replace(scenario, seed=cfg.seed)
    base = replace(scenario, shift_mean=1.0, shift_sd=1.0)
    history, warm = warm_up(base, days=cfg.warmup_days)
    policy = DROPolicy(cfg.mode, demand_spec=fc.PredictorSpec.parse(cfg.demand_predictor),
                       supply_spec=fc.PredictorSpec.parse(cfg.supply_predictor),
                       demand_report=_load_report(args.demand_report),
                       supply_report=_load_report(args.supply_report),
                       conservative=cfg.conservative, tol=cfg.sim_tol)
    lg = run_receding_horizon(policy, scenario, cfg.episodes, history=history, warm_state=warm)
    out = _out_dir(cfg)
    stem = policy.kind
    lg.write(out / f"log_{stem}.csv", out / f"log_{stem}.json", include_timing=not args.no_timing)
    failures = sum(1 for r in lg.records if "solver_failure" in r.flags)
    print(f"{stem}: {len(lg.records)} intervals, {failures} solver fallbacks -> {out / f'log_{stem}.csv'}")
    return EXIT_OK


def _log_from_rows(name, rows) -> SimulationLog:
    lg = SimulationLog(name)
    for r in rows:
        lg.records.append(IntervalRecord(r["episode"], r["k"], None, None, None, None, None, None, None,
                                         r["M_b"], r["M_m"], r["M_c"], r["solve_ms"],
                                         [f for f in r["flags"].split(";") if f]))
    return lg


def cmd_report(args, cfg) -> int:
    logs = {}
    for path in args.logs:
        if not path.is_file():
            raise fio.ConfigError(f"log {path} does not exist")
        name = path.stem[4:] if path.stem.startswith("log_") else path.stem
        logs[name] = _log_from_rows(name, read_log(path))
    if len(logs) < 2:
        raise fio.ConfigError("report needs at least two distinct logs")
    rep = comparison_report(logs)
    out = _out_dir(cfg)
    cols = ("policy", "daily_cost_mean", "daily_cost_var", "daily_cost_p90", "M_m_mean", "M_c_mean",
            "pct_daily_cost", "pct_M_m", "pct_M_c")
    rows = [[name] + [rep["policies"][name][c] for c in cols[1:]] for name in logs]
    buf = _io.StringIO()
    buf.write(fio.SCHEMA_LINE + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    w.writerows([r[0]] + [repr(float(v)) for v in r[1:]] for r in rows)
    (out / "report.csv").write_text(buf.getvalue())
    md = [f"# Policy comparison (reference: {rep['reference']})", "",
          "Percent differences are relative to the reference. Fairness metrics are at most zero, "
          "so a positive percentage there means fairer; for cost a negative percentage means cheaper.", "",
          _md_table(cols, [[r[0]] + [f"{v:.4g}" for v in r[1:]] for r in rows]), ""]
    (out / "report.md").write_text("\n".join(md))
    print("\n".join(md))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "fit": cmd_fit, "uncertainty": cmd_uncertainty, "solve": cmd_solve,
            "simulate": cmd_simulate, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (fio.ConfigError, ModelError, EstimationError, fc.ForecastError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
