"""Command-line entry point: plan, simulate, replay, report, policy inspect."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import SimConfig
from .costsetter import Plan, build_plan, inspect_rows
from .experiments import ComparisonReport, ExperimentSpec, emit_plots_data, load_or_build_plan, run_suite
from .sim import Controller, Resources, run_episode
from .trace import BallotTrace, read_gold, write_gold

DEFAULT_CONTROLLERS = "octopus,static-1,static-2,static-3,static-4,static-5,static-6"


def _load_config(args) -> SimConfig:
    cfg = SimConfig.load(args.config) if args.config else SimConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _floats(text: str) -> list:
    return [float(x) for x in text.split(",") if x.strip()]


def _spec(args) -> ExperimentSpec:
    return ExperimentSpec(controllers=[c for c in args.controllers.split(",") if c.strip()],
                          deadlines=_floats(args.deadlines), seeds=args.seeds,
                          rate_scales=_floats(args.rate_scales), out_dir=args.out,
                          workers=args.workers, seed_offset=args.seed_offset)


def cmd_plan(args) -> int:
    cfg = _load_config(args)
    plan = build_plan(cfg, with_feasibility=not args.no_feasibility)
    plan.save(args.out)
    s = plan.start_state()
    action, value = plan.policy.lookup(s)
    print(f"policy written to {args.out}; start action {action.name.lower()}, value {value:.2f}")
    return 0


def _suite_summary(report: ComparisonReport) -> int:
    for c in report.cells:
        flag = "*" if c["significant"] and c["controller"] != c["reference"] else " "
        print(f"{c['controller']:>24} {c['deadline_min']:6g} x{c['rate_scale']:<4g} "
              f"U={c['utility_mean']:10.1f} ±{c['utility_ci']:7.1f} acc={c['accuracy_mean']:.3f} "
              f"cost={c['cost_mean']:9.1f} {flag}")
    for f in report.failures:
        print(f"FAILED {f['controller']} {f['deadline_min']:g} x{f['rate_scale']:g}: {f['error']}", file=sys.stderr)
    return 0 if report.complete else 1


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    spec = _spec(args)
    report = run_suite(spec, cfg, plan_cache=args.plan_cache, save_runs=args.save_runs)
    return _suite_summary(report)


def cmd_replay(args) -> int:
    cfg = _load_config(args)
    trace = BallotTrace.from_csv(args.trace, len(cfg.pay_grid))
    gold = read_gold(args.gold)
    if cfg.n != len(gold):
        cfg = cfg.replace(n=len(gold))
    spec = _spec(args)
    report = run_suite(spec, cfg, plan_cache=args.plan_cache, trace=trace, gold=gold, resample=args.resample)
    return _suite_summary(report)


def cmd_report(args) -> int:
    src = Path(args.input) / "report.json"
    report = ComparisonReport.from_json(src.read_text())
    out = args.out or args.input
    paths = emit_plots_data(report, out)
    report.save(out)
    for p in paths:
        print(p)
    return 0 if report.complete else 1


def cmd_episode(args) -> int:
    cfg = _load_config(args)
    ctrl = Controller.parse(args.controller)
    res = Resources(cfg, load_or_build_plan(cfg, args.plan_cache) if ctrl.kind == "octopus" else None)
    rr = run_episode(cfg, ctrl, args.deadline, seed=cfg.seed, resources=res, record_trace=bool(args.trace))
    text = rr.to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    if args.epochs_csv:
        Path(args.epochs_csv).write_text(rr.epochs_csv())
    if args.trace:
        rr.trace.to_csv(args.trace)
    if args.gold:
        write_gold(dict(enumerate(rr.truth)), args.gold)
    return 0


def cmd_policy_inspect(args) -> int:
    plan = Plan.load(args.plan_cache)
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["nu_bar", "theta", "tau", "pay", "action", "value"])
        for row in inspect_rows(plan.policy, feasible_only=not args.all):
            w.writerow([f"{row[0]:.4g}", f"{row[1]:g}", f"{row[2]:g}", f"{row[3]:g}", row[4], f"{row[5]:.6g}"])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crowdctl", description="Pricing and quality control for crowdsourced batches.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML config file (defaults built in)")
        sp.add_argument("--seed", type=int, help="override the config seed")

    def suite(sp):
        sp.add_argument("--controllers", default=DEFAULT_CONTROLLERS,
                        help="comma list: octopus[-random|-random-robin][-nosync], static-K, gao-R")
        sp.add_argument("--deadlines", default="60,120,180,240,300,360", help="minutes, comma separated")
        sp.add_argument("--seeds", type=int, default=30, help="seeds per cell")
        sp.add_argument("--seed-offset", type=int, default=0)
        sp.add_argument("--rate-scales", default="1.0")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--plan-cache", help="policy cache directory (built when missing)")
        sp.add_argument("--out", help="output directory for report files")

    sp = sub.add_parser("plan", help="build and cache the pricing policy")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-feasibility", action="store_true", help="skip the reachable-state mask")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("simulate", help="run a simulation suite")
    common(sp)
    suite(sp)
    sp.add_argument("--save-runs", action="store_true", help="write every RunResult (needs --out)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("replay", help="run a suite against a recorded trace")
    common(sp)
    suite(sp)
    sp.add_argument("--trace", required=True)
    sp.add_argument("--gold", required=True)
    sp.add_argument("--resample", action="store_true", help="always draw a random recorded ballot")
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("report", help="emit plot CSVs from a saved report")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("episode", help="run one episode and print its RunResult JSON")
    common(sp)
    sp.add_argument("--controller", default="octopus")
    sp.add_argument("--deadline", type=float, default=None, help="minutes (default: config deadline)")
    sp.add_argument("--plan-cache")
    sp.add_argument("--out")
    sp.add_argument("--epochs-csv")
    sp.add_argument("--trace", help="write the served ballots as a trace CSV")
    sp.add_argument("--gold", help="write the ground truth as a gold CSV")
    sp.set_defaults(func=cmd_episode)

    sp = sub.add_parser("policy", help="policy utilities")
    psub = sp.add_subparsers(dest="policy_command", required=True)
    ip = psub.add_parser("inspect", help="dump per-state actions as CSV")
    ip.add_argument("--plan-cache", required=True)
    ip.add_argument("--out")
    ip.add_argument("--all", action="store_true", help="include states flagged unreachable")
    ip.set_defaults(func=cmd_policy_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "save_runs", False) and not args.out:
        print("--save-runs needs --out", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except BrokenPipeError:
        return 0
    except (OSError, ValueError) as exc:  # bad input files or arguments
        print(f"crowdctl: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
