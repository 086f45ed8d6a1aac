"""Tables and plot-ready series from the metrics files of a finished experiment."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

from prunedistill.harness.experiment import (
    MetricsRecord,
    collect,
    expected_stages,
    final_stage,
    mean_std,
)

METHOD_NAMES = {
    "fixed_small_lr": "prune + fixed small LR",
    "one_cycle": "prune + one-cycle",
    "kesi": "prune + one-cycle + ensemble distillation",
    "single_teacher": "prune + one-cycle + single-teacher distillation",
}


def _cycle_of(stage: str) -> int | None:
    if stage == "baseline":
        return 0
    if stage.startswith("cycle-"):
        return int(stage[6:])
    return None


def _write_tsv(path: Path, header: list[str], rows: list[list]) -> Path:
    lines = ["\t".join(header)] + ["\t".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def _pct_down(value: float, reference: float) -> float:
    return 100.0 * (1.0 - value / reference) if reference else 0.0


def load_run(out_dir) -> tuple[dict, list[MetricsRecord]]:
    out_dir = Path(out_dir)
    cfg_path = out_dir / "config.json"
    if not cfg_path.is_file():
        raise FileNotFoundError(f"{cfg_path} not found; is this an experiment directory?")
    cfg = json.loads(cfg_path.read_text())
    return cfg, collect(out_dir, cfg["seeds"])


def missing_stages(cfg: dict, records: list[MetricsRecord]) -> list[tuple[int, str, str, str]]:
    """(seed, arm, stage, reason) for every expected stage without a successful record."""
    ok = {(r.seed, r.arm, r.stage) for r in records if r.status == "ok"}
    failed = {(r.seed, r.arm, r.stage): r.error for r in records if r.status != "ok"}
    out = []
    n = cfg["cycle"]["num_cycles"]
    for seed in cfg["seeds"]:
        for arm in cfg["arms"]:
            for stage in expected_stages(n, cfg["distill_enabled"], arm):
                if (seed, arm, stage) not in ok:
                    out.append((seed, arm, stage, failed.get((seed, arm, stage), "absent")))
    return out


def report(out_dir, stream=None) -> int:
    """Write the report tables into ``out_dir``; returns 0 iff no expected stage is missing."""
    out_dir = Path(out_dir)
    cfg, records = load_run(out_dir)
    ok = [r for r in records if r.status == "ok"]
    arms = cfg["arms"]
    n_cycles = cfg["cycle"]["num_cycles"]
    distill = cfg["distill_enabled"]

    def hits(arm, stage):
        return [r for r in ok if r.arm == arm and r.stage == stage]

    base_by_seed = {r.seed: r for r in ok if r.stage == "baseline"}

    acc_rows, size_rows = [], []
    for arm in arms:
        for c in range(n_cycles + 1):
            rs = hits(arm, "baseline" if c == 0 else f"cycle-{c}")
            if not rs:
                continue
            m, s = mean_std([r.eval_accuracy for r in rs])
            acc_rows.append([arm, c, len(rs), f"{m:.6f}", f"{s:.6f}"])
            pct_p = [_pct_down(r.param_count, base_by_seed[r.seed].param_count) for r in rs if r.seed in base_by_seed]
            pct_m = [_pct_down(r.mac_count, base_by_seed[r.seed].mac_count) for r in rs if r.seed in base_by_seed]
            size_rows.append([arm, c, f"{np.mean([r.param_count for r in rs]):.1f}",
                              f"{np.mean([r.mac_count for r in rs]):.1f}",
                              f"{np.mean(pct_p):.2f}" if pct_p else "nan",
                              f"{np.mean(pct_m):.2f}" if pct_m else "nan"])
    _write_tsv(out_dir / "accuracy_vs_cycle.tsv", ["arm", "cycle", "n", "accuracy_mean", "accuracy_std"], acc_rows)
    _write_tsv(out_dir / "size_vs_cycle.tsv",
               ["arm", "cycle", "param_count_mean", "mac_count_mean", "pct_params_down", "pct_macs_down"], size_rows)

    ens_rows = []
    for arm in arms:
        rs = hits(arm, "ensemble")
        if not rs:
            continue
        gains, bests = [], []
        for r in rs:
            members = [x.eval_accuracy for x in ok if x.arm == arm and x.seed == r.seed and _cycle_of(x.stage) is not None]
            bests.append(max(members))
            gains.append(r.eval_accuracy - max(members))
        m, s = mean_std([r.eval_accuracy for r in rs])
        ens_rows.append([arm, len(rs), f"{m:.6f}", f"{s:.6f}", f"{np.mean(bests):.6f}", f"{100 * np.mean(gains):.2f}"])
    _write_tsv(out_dir / "ensembles.tsv",
               ["arm", "n", "ensemble_accuracy_mean", "ensemble_accuracy_std", "best_member_mean", "gain_points"],
               ens_rows)

    table = []
    base = [r for r in base_by_seed.values()]
    if base:
        m, s = mean_std([r.eval_accuracy for r in base])
        table.append(["baseline", base[0].param_count, "0.00", f"{100 * m:.2f}±{100 * s:.2f}", len(base)])
    for arm in arms:
        rs = hits(arm, final_stage(n_cycles, distill, arm))
        if not rs:
            continue
        m, s = mean_std([r.eval_accuracy for r in rs])
        pct = [_pct_down(r.mac_count, base_by_seed[r.seed].mac_count) for r in rs if r.seed in base_by_seed]
        table.append([METHOD_NAMES.get(arm, arm), int(round(np.mean([r.param_count for r in rs]))),
                      f"{np.mean(pct):.2f}" if pct else "nan", f"{100 * m:.2f}±{100 * s:.2f}", len(rs)])
    _write_tsv(out_dir / "comparison.tsv", ["method", "params", "pct_macs_down", "accuracy_pct", "n"], table)

    missing = missing_stages(cfg, records)
    stream = stream if stream is not None else sys.stderr
    _write_tsv(out_dir / "missing.tsv", ["seed", "arm", "stage", "reason"], [list(m) for m in missing])
    if missing:
        print(f"{len(missing)} expected stage(s) missing:", file=stream)
        for seed, arm, stage, reason in missing:
            print(f"  seed {seed} arm {arm} stage {stage}: {reason}", file=stream)
        return 1
    return 0
