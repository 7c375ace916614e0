"""Command-line harness.

Subcommands: ``crb`` writes bound curves, ``simulate`` runs and dumps one
trial, ``sweep`` runs the full Monte Carlo.  Exit codes: 0 success,
1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from . import estimators as _est
from . import harness as _h
from .harness import ConfigError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sirpdoa",
        description="MIMO radar direction finding under compound-Gaussian "
                    "clutter: bound curves and Monte Carlo sweeps.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, need_out=False):
        p.add_argument("--config", required=True,
                       help="path to a JSON experiment file")
        p.add_argument("--out", required=need_out,
                       help="output path (CSV for crb/sweep, JSON for simulate)")
        p.add_argument("--quiet", action="store_true",
                       help="suppress progress output")

    p_crb = sub.add_parser("crb", help="write the bound curve only")
    common(p_crb, need_out=True)

    p_sim = sub.add_parser("simulate",
                           help="run a single trial and dump estimates")
    common(p_sim)
    p_sim.add_argument("--seed", type=int, default=None,
                       help="override the experiment base seed")
    p_sim.add_argument("--estimators", default=None,
                       help="comma-separated estimator subset")
    p_sim.add_argument("--iterations", default=None,
                       help="comma-separated iteration counts")

    p_sweep = sub.add_parser("sweep", help="run the full Monte Carlo sweep")
    common(p_sweep, need_out=True)
    p_sweep.add_argument("--trials", type=int, default=None,
                         help="override the trial count")
    p_sweep.add_argument("--seed", type=int, default=None,
                         help="override the experiment base seed")
    p_sweep.add_argument("--estimators", default=None,
                         help="comma-separated estimator subset")
    p_sweep.add_argument("--iterations", default=None,
                         help="comma-separated iteration counts")
    p_sweep.add_argument("--jobs", type=int, default=1,
                         help="worker processes (results are identical "
                              "for any value)")
    return parser


def _apply_overrides(config, args):
    changes = {}
    if getattr(args, "trials", None) is not None:
        changes["trials"] = args.trials
    if getattr(args, "seed", None) is not None:
        changes["base_seed"] = args.seed
    if getattr(args, "estimators", None):
        changes["estimators"] = tuple(
            s.strip() for s in args.estimators.split(",") if s.strip())
    if getattr(args, "iterations", None):
        changes["iterations"] = tuple(
            int(s) for s in args.iterations.split(",") if s.strip())
    if not changes:
        return config
    try:
        return replace(config, **changes)
    except (ConfigError, ValueError) as exc:
        raise ConfigError(str(exc))


def _cmd_crb(config, args) -> int:
    curve = _h.crb_curve(config)
    lines = ["sweep_value,crb_db"]
    lines += [f"{sv:.10g},{db:.10g}" for sv, db in curve]
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    if not args.quiet:
        print(f"wrote {len(curve)} bound points to {args.out}")
    return 0


def _cmd_simulate(config, args) -> int:
    sweep_value = config.sweep_values[0]
    scene = _h._scene_for(config, sweep_value)
    clutter = _h._clutter_for(config, sweep_value)
    rng = _h.trial_rng(config.base_seed, 0, 0)
    from .clutter import sample_clutter
    from .model import synthesize
    obs = synthesize(config.geometry, scene,
                     sample_clutter(clutter, scene.pulses, rng))
    kind = config.texture.family
    k = scene.num_targets
    est_cfg = config.estimator_config
    max_iters = max(int(i) for i in config.iterations)
    run_cfg = replace(est_cfg, max_outer_iters=max_iters)
    dump = {"sweep_axis": config.sweep_axis,
            "sweep_value": float(sweep_value),
            "truth_deg": np.rad2deg(scene.angle_pairs).tolist(),
            "estimators": {}}
    for name in config.estimators:
        entry = {}
        try:
            if name == "music":
                pairs, flags = _est.music_scm(obs, config.geometry, k,
                                              est_cfg.coarse_grid_step)
                entry["theta_deg"] = np.rad2deg(pairs).tolist()
                entry["flags"] = list(flags)
            else:
                if name == "marginal":
                    res = _est.estimate_marginal_ml(obs, config.geometry,
                                                    kind, k, run_cfg)
                elif name == "conditional":
                    res = _est.estimate_texture_weighted(
                        obs, config.geometry, kind, k, run_cfg,
                        mode="conditional")
                elif name == "joint":
                    res = _est.estimate_texture_weighted(
                        obs, config.geometry, kind, k, run_cfg, mode="joint")
                elif name == "gaussian_white":
                    res = _est.estimate_gaussian_ml(obs, config.geometry, k,
                                                    est_cfg, iterative=False)
                else:
                    res = _est.estimate_gaussian_ml(obs, config.geometry, k,
                                                    run_cfg, iterative=True)
                entry["theta_deg"] = [np.rad2deg(t).tolist()
                                      for t in res.theta_hat]
                entry["ll_trace"] = [None if np.isnan(v) else float(v)
                                     for v in res.ll_trace]
                entry["converged"] = bool(res.converged)
                entry["iterations_used"] = int(res.iterations_used)
                entry["flags"] = list(res.flags)
        except _est.EstimatorError as exc:
            entry["error"] = str(exc)
        dump["estimators"][name] = entry
    text = json.dumps(dump, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        if not args.quiet:
            print(f"wrote single-trial dump to {args.out}")
    else:
        print(text)
    return 0


def _cmd_sweep(config, args) -> int:
    result = _h.sweep(config, jobs=max(args.jobs, 1))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(result.to_csv())
    if not args.quiet:
        print(f"wrote {len(result.rows)} rows to {args.out}")
    return 0


def cli_main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = _h.load_config(args.config)
        config = _apply_overrides(config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "crb":
            return _cmd_crb(config, args)
        if args.command == "simulate":
            return _cmd_simulate(config, args)
        return _cmd_sweep(config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure contract: exit 2
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
