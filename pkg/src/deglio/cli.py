"""Command-line entry points: run experiments, evaluate trajectories,
generate scenario files.

    deglio run --config scenario.json --out results/ [--seed N]
               [--disable-constraints] [--disable-gnc] [--disable-backend-prior]
    deglio eval --est estimate.tum --gt groundtruth.tum
    deglio gen-scenario --kind corridor --out corridor.json
    deglio batch --configs a.json b.json --out results/ [--jobs N]

Exit code is zero iff every run completed without divergence flags.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from . import config as cfgmod
from . import pipeline


def _run_config_from_args(args, scenario) -> cfgmod.RunConfig:
    return cfgmod.RunConfig(
        scenario=scenario,
        constraints_enabled=not args.disable_constraints,
        gnc_enabled=not args.disable_gnc,
        backend_prior_enabled=not args.disable_backend_prior,
        window=args.window,
        out_dir=args.out,
        seed_override=args.seed,
    )


def _add_toggles(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default=None, help="artifact output directory")
    p.add_argument("--seed", type=int, default=None, help="override scenario seed")
    p.add_argument("--window", type=float, default=1.0, help="smoother window [s]")
    p.add_argument("--disable-constraints", action="store_true",
                   help="turn off degeneracy constraints in the filter")
    p.add_argument("--disable-gnc", action="store_true",
                   help="treat guarded factors as plain least squares")
    p.add_argument("--disable-backend-prior", action="store_true",
                   help="do not fuse the smoother pose into the filter prior")


def cmd_run(args) -> int:
    scenario = cfgmod.load_scenario(args.config)
    run_cfg = _run_config_from_args(args, scenario)
    art = pipeline.run(run_cfg)
    summary = art.result.metrics_dict()
    summary["mean_scan_ms"] = art.result.mean_scan_ms
    summary["rejected_backend_fusions"] = art.rejected_fusions
    summary["stale_measurements"] = art.stale_measurements
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 1 if art.result.diverged else 0


def cmd_batch(args) -> int:
    scenarios = [cfgmod.load_scenario(c) for c in args.configs]

    def one(item):
        i, scen = item
        sub = argparse.Namespace(**vars(args))
        sub.out = os.path.join(args.out, f"{i:02d}_{scen.get('name', 'run')}") \
            if args.out else None
        cfg = _run_config_from_args(sub, scen)
        return pipeline.run(cfg)

    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        arts = list(pool.map(one, enumerate(scenarios)))
    bad = 0
    for scen, art in zip(scenarios, arts):
        status = "DIVERGED" if art.result.diverged else "ok"
        print(f"{scen.get('name', 'run')}: ate_rmse={art.result.ate_rmse:.4f} m "
              f"[{status}]")
        bad += int(art.result.diverged)
    return 1 if bad else 0


def cmd_eval(args) -> int:
    est = pipeline.read_tum(args.est)
    gt = pipeline.read_tum(args.gt)
    res = pipeline.evaluate_ate(est, gt)
    print(json.dumps(res.metrics_dict(), indent=1, sort_keys=True))
    return 0


def cmd_gen_scenario(args) -> int:
    scen = cfgmod.preset_scenario(args.kind)
    if args.seed is not None:
        scen["seed"] = args.seed
    text = json.dumps(scen, indent=1, sort_keys=True)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deglio", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate and estimate one scenario")
    p_run.add_argument("--config", required=True, help="scenario JSON file")
    _add_toggles(p_run)
    p_run.set_defaults(func=cmd_run)

    p_batch = sub.add_parser("batch", help="run several scenarios in parallel")
    p_batch.add_argument("--configs", nargs="+", required=True)
    p_batch.add_argument("--jobs", type=int, default=2)
    _add_toggles(p_batch)
    p_batch.set_defaults(func=cmd_batch)

    p_eval = sub.add_parser("eval", help="ATE between two TUM trajectories")
    p_eval.add_argument("--est", required=True)
    p_eval.add_argument("--gt", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_gen = sub.add_parser("gen-scenario", help="write a preset scenario file")
    p_gen.add_argument("--kind", required=True,
                       choices=["box", "corridor", "tunnel", "plane"])
    p_gen.add_argument("--out", default=None)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.set_defaults(func=cmd_gen_scenario)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
