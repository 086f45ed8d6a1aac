"""Command line entry point: ``prunedistill <command> [options]``."""

from __future__ import annotations

import argparse
import sys

from prunedistill.errors import FormatError, ParameterError, RunError
from prunedistill.harness import experiment as ex
from prunedistill.harness.config import ARMS, OUTPUT_ROOT_ENV, ExperimentConfig, load_config
from prunedistill.harness.data import write_desk_digits
from prunedistill.harness.report import report
from prunedistill.models import load_snapshot
from prunedistill.pipeline import ensemble_of, evaluate


def _arms(text: str | None) -> list[str] | None:
    if text is None:
        return None
    arms = [a.strip() for a in text.split(",") if a.strip()]
    bad = [a for a in arms if a not in ARMS]
    if bad:
        raise ParameterError(f"unknown arm(s) {bad}; choose from {', '.join(ARMS)}")
    return arms


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="experiment TOML file")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--output-dir", help=f"results directory (relative paths resolve under ${OUTPUT_ROOT_ENV})")
    p.add_argument("--arms", help=f"comma-separated subset of: {', '.join(ARMS)}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prunedistill", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="baseline, pruning cycles, ensembles and distillation for every seed")
    _common(p)
    p.add_argument("--workers", type=int, default=1, help="seeds to run in parallel processes")
    for name, text in (("train", "train the baseline"), ("prune", "prune and retrain from a saved baseline"),
                       ("distill", "distill saved one-cycle snapshots")):
        _common(sub.add_parser(name, help=text))
    p = sub.add_parser("evaluate", help="test accuracy of snapshot files")
    p.add_argument("--config", required=True)
    p.add_argument("--ensemble", action="store_true", help="evaluate the files as one ensemble")
    p.add_argument("snapshots", nargs="+")
    p = sub.add_parser("report", help="comparison tables and series from a finished run")
    p.add_argument("--config")
    p.add_argument("--output-dir")
    p = sub.add_parser("make-desk-data", help="write the desk digit corpus as IDX files")
    p.add_argument("--out", required=True)
    return parser


def _setup(args):
    cfg = load_config(args.config)
    out = cfg.resolve_output_dir(args.output_dir)
    arms = _arms(args.arms) or list(cfg.arms)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    return cfg, out, arms, seeds


def _staged(args) -> int:
    cfg, out, arms, seeds = _setup(args)
    ex.write_config(cfg, out, arms)
    data = ex.load_data(cfg)
    ok = True
    for seed in seeds:
        run = ex.SeedRun(cfg, seed, out, data)
        try:
            if args.command == "train":
                run.reset()
                run.train(arms)
            elif args.command == "prune":
                run.next_stage = "cycle-1"
                run.prune(arms)
            else:
                run.next_stage = "distill"
                run.distill(arms)
        except (RunError, ParameterError, FormatError, ArithmeticError) as exc:
            run.record_failure(arms, run.next_stage, exc)
            print(f"seed {seed}: {exc}", file=sys.stderr)
            ok = False
    ex.write_summary(out, cfg, arms, seeds)
    return 0 if ok else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg, out, arms, seeds = _setup(args)
            ok = ex.run_experiment(cfg, out, arms, seeds, workers=args.workers)
            print(f"results in {out}")
            return 0 if ok else 1
        if args.command in ("train", "prune", "distill"):
            return _staged(args)
        if args.command == "evaluate":
            cfg = load_config(args.config)
            data = ex.load_data(cfg)
            snaps = [load_snapshot(p) for p in args.snapshots]
            if args.ensemble:
                print(f"ensemble of {len(snaps)}\t{evaluate(ensemble_of(snaps), data.test):.6f}")
            else:
                for path, snap in zip(args.snapshots, snaps):
                    print(f"{path}\t{evaluate(snap, data.test):.6f}")
            return 0
        if args.command == "report":
            if args.output_dir is None and args.config is None:
                raise ParameterError("report needs --output-dir or --config")
            cfg = load_config(args.config) if args.config else ExperimentConfig()
            out = cfg.resolve_output_dir(args.output_dir)
            code = report(out)
            print(f"tables written to {out}")
            return code
        paths = write_desk_digits(args.out)
        for key, path in paths.items():
            print(f"{key}\t{path}")
        return 0
    except (ParameterError, FormatError, FileNotFoundError, RunError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
