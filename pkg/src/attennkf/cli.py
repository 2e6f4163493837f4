"""Command-line driver.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 numerical failure. ``ATTENNKF_OUT`` overrides the output directory and
``ATTENNKF_THREADS`` the torch thread count.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from attennkf import compensator as C
from attennkf import filter as F
from attennkf import pipeline as P
from attennkf.config import ConfigError, PipelineConfig, load_config
from attennkf.eval import harness as H
from attennkf.neural import NonFinite

VERBS = ("simulate", "train", "run", "eval", "ablate", "bench", "repro", "plot-data")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="attennkf", description="Slip-aware legged odometry pipeline.")
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("--config", help="INI configuration file")
    ap.add_argument("--seed", type=int, help="dataset seed, or the training seed for train/run/bench/plot-data")
    ap.add_argument("--out", help="output directory (default: $ATTENNKF_OUT, else the config out_dir)")
    ap.add_argument("--variant", choices=C.VARIANTS, help="learned variant (train, run, bench)")
    ap.add_argument("--estimator", choices=("inekf", "sr", "attennkf"), default="inekf", help="estimator for run")
    ap.add_argument("--deterministic", action="store_true", help="force deterministic torch kernels")
    ap.add_argument("--stage", choices=("1", "2", "all"), default="all", help="training stage")
    ap.add_argument("--split", choices=P.SPLITS, default="test_slip", help="dataset split for run/eval/plot-data")
    ap.add_argument("--episode", type=int, default=0, help="episode index for plot-data")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    return ap


def resolve(args) -> tuple:
    """Config and workspace after applying flags and environment overrides."""
    cfg = load_config(args.config) if args.config else PipelineConfig()
    pipe = cfg.pipeline
    if args.seed is not None and args.verb in ("simulate", "repro"):
        pipe = replace(pipe, seed=args.seed)
    if args.deterministic:
        pipe = replace(pipe, deterministic=True)
    out = args.out or os.environ.get("ATTENNKF_OUT") or pipe.out_dir
    cfg = replace(cfg, pipeline=replace(pipe, out_dir=out))
    cfg.validate()
    return cfg, P.Workspace(out, cfg)


def dispatch(args, cfg: PipelineConfig, ws: P.Workspace) -> None:
    seeds = [args.seed] if args.seed is not None else None
    variants = [args.variant] if args.variant else None
    if args.verb == "simulate":
        m = P.simulate(ws)
        print(f"wrote {sum(len(v) for v in m['splits'].values())} episodes, manifest {ws.manifest}")
    elif args.verb == "train":
        P.train(ws, args.stage, seeds, variants)
        print(f"checkpoints in {ws.root / 'models'}")
    elif args.verb == "run":
        if args.estimator == "attennkf" and args.variant is None:
            raise P.UsageError("--estimator attennkf requires --variant (and a trained checkpoint)")
        P.run(ws, args.split, args.estimator, args.variant, seeds)
        print(f"traces in {ws.root / 'traces' / args.split}")
    elif args.verb == "eval":
        names = ["InEKF", "SR", *(variants or [])]
        res = P.evaluate(ws, args.split, names)
        print(H.format_table(res.rows))
    elif args.verb == "ablate":
        res = P.ablate(ws, args.split)
        print(H.format_table(res.rows))
    elif args.verb == "bench":
        out = P.bench(ws, args.variant or "Proposed", args.seed)
        print(json.dumps(out, indent=2, sort_keys=True))
    elif args.verb == "repro":
        res = P.repro(ws)
        print(H.format_table(res.rows))
    elif args.verb == "plot-data":
        print(P.plot_data(ws, args.split, args.episode, args.seed))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(message)s")
    try:
        cfg, ws = resolve(args)
        P.set_determinism(cfg)
        dispatch(args, cfg, ws)
    except (ConfigError, P.UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (P.DataError, C.MissingStage1, C.AlignmentError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (P.NumericalError, C.Diverged, NonFinite, F.NumericalFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
