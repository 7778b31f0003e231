"""Command-line entry points.

Subcommands: generate (synthesize a dataset to files), train, eval,
analyze, and gradcheck. Exit status 0 on success, 1 on validation or
configuration errors, 2 on numeric failure.
"""

from __future__ import annotations

import argparse
import sys

from . import train as run
from .config import load_run_config
from .errors import NumericError, PaircastError
from .gradcheck import run_gradcheck


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="paircast",
        description="Scene-centric multi-agent trajectory forecasting "
                    "with agent-pair covariance prediction.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset to files")
    g.add_argument("--config", required=True, help="run configuration JSON")
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True, help="run configuration JSON")
    t.add_argument("--out", required=True, help="directory for checkpoint and log")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--horizon", required=True, type=float, choices=(3.0, 5.0),
                   help="prediction horizon in seconds")
    e.add_argument("--out", default=None, help="directory for metric CSVs")

    a = sub.add_parser("analyze", help="dependency scores and scene plots")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True, help="dataset directory")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--weighted", action="store_true",
                   help="average scores over modes by predicted probability")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--full", action="store_true",
                    help="check every parameter component end to end")
    gc.add_argument("--seed", type=int, default=0)
    return p


def _print_report(tag: str, r):
    print(f"{tag} horizon_s={r.horizon:g} min_sade={r.min_sade:.6f} "
          f"min_sfde={r.min_sfde:.6f} smr={r.smr:.6f} n_scenes={r.n_scenes}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            cfg = load_run_config(args.config)
            n_tracks, n_labels = run.generate_dataset(cfg, args.out)
            print(f"wrote {n_tracks} tracks and {n_labels} interaction labels "
                  f"to {args.out}")
        elif args.command == "train":
            cfg = load_run_config(args.config)
            result = run.train(cfg, args.out)
            for line in result.log_lines:
                print(line)
            print(f"checkpoint: {result.checkpoint_path}")
        elif args.command == "eval":
            rm, rb = run.evaluate(args.checkpoint, args.data, args.horizon,
                                  out_dir=args.out)
            _print_report("model", rm)
            _print_report("baseline", rb)
        elif args.command == "analyze":
            per_scene = run.analyze(args.checkpoint, args.data, args.out,
                                    weighted=args.weighted)
            n_records = sum(len(records) for _, records in per_scene)
            print(f"wrote {n_records} dependency records over "
                  f"{len(per_scene)} scenes to {args.out}")
        elif args.command == "gradcheck":
            results = run_gradcheck(full=args.full, seed=args.seed)
            failed = [r for r in results if not r.ok]
            for r in results:
                status = "PASS" if r.ok else "FAIL"
                print(f"{r.name:24s} max_rel_err={r.max_rel_err:.3e} "
                      f"tol={r.tol:.0e} {status}")
            if failed:
                raise NumericError(f"{len(failed)} gradient check(s) failed")
            print(f"all {len(results)} checks passed")
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 2
    except PaircastError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
