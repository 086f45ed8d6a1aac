"""Run the retraining arms for every seed and persist metrics, snapshots and a summary.

Layout under the output directory::

    config.json                   resolved configuration
    seed-<s>/metrics.jsonl        one MetricsRecord per line, appended as stages finish
    seed-<s>/timings.jsonl        wall-clock seconds per stage
    seed-<s>/snapshots/*.snap     baseline, per-arm cycle snapshots and students
    summary.tsv                   mean and std of final accuracy per arm

Wall-clock times live in the timings sidecar so that ``metrics.jsonl`` is a
pure function of config and seed.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from prunedistill.errors import ParameterError, RunError
from prunedistill.harness.config import DISTILL_ARMS, ExperimentConfig
from prunedistill.harness.data import DataSplit, blobs_split, load_idx_split, write_desk_digits
from prunedistill.models import (
    ModelSnapshot,
    build_desknet,
    build_mlp,
    build_plain_cnn,
    load_snapshot,
    save_snapshot,
)
from prunedistill.pipeline import (
    SnapshotRegistry,
    distill_student,
    ensemble_of,
    evaluate,
    run_iterative_pruning,
    train_baseline,
)

RETRAIN_ARMS = ("fixed_small_lr", "one_cycle")


@dataclass
class MetricsRecord:
    run_id: str
    seed: int
    arm: str
    stage: str  # baseline | cycle-<k> | ensemble | distill
    param_count: int = 0
    mac_count: int = 0
    train_loss: list[float] = field(default_factory=list)
    eval_accuracy: float = 0.0
    status: str = "ok"
    error: str = ""

    def __post_init__(self):
        if not 0.0 <= self.eval_accuracy <= 1.0:
            raise ParameterError(f"accuracy {self.eval_accuracy} outside [0, 1]")
        if not valid_stage(self.stage):
            raise ParameterError(f"bad stage name {self.stage!r}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        return cls(**json.loads(line))


def valid_stage(stage: str) -> bool:
    if stage in ("baseline", "ensemble", "distill"):
        return True
    return stage.startswith("cycle-") and stage[6:].isdigit() and int(stage[6:]) >= 1


def read_metrics(path) -> list[MetricsRecord]:
    """Parse a metrics file up to its last complete line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.endswith("\n"):
                break  # partial write from an interrupted run
            out.append(MetricsRecord.from_json(line))
    return out


# ---------------------------------------------------------------------------
# inputs


def load_data(cfg: ExperimentConfig) -> DataSplit:
    ds = cfg.dataset
    if ds.kind == "blobs":
        return blobs_split(ds.num_classes, ds.dim, ds.samples_per_class, ds.spread, ds.data_seed,
                           ds.test_fraction)
    if ds.kind == "desk":
        data_dir = cfg.resolve_output_dir(ds.data_dir)
        paths = {k: data_dir / n for k, n in (
            ("train_images", "train-images-idx3-ubyte"), ("train_labels", "train-labels-idx1-ubyte"),
            ("test_images", "test-images-idx3-ubyte"), ("test_labels", "test-labels-idx1-ubyte"))}
        if not all(p.is_file() for p in paths.values()):
            paths = write_desk_digits(data_dir)
    else:
        paths = {k: cfg.data_path(getattr(ds, k))
                 for k in ("train_images", "train_labels", "test_images", "test_labels")}
    return load_idx_split(paths["train_images"], paths["train_labels"], paths["test_images"],
                          paths["test_labels"], ds.downsample, ds.train_limit, ds.test_limit)


def build_model(cfg: ExperimentConfig, data: DataSplit, seed: int) -> ModelSnapshot:
    mc = cfg.model
    x = data.train.x
    if mc.kind == "mlp":
        return build_mlp([x.shape[1], *mc.hidden, data.num_classes], seed=seed)
    _, c, h, w = x.shape
    if h != w:
        raise ParameterError(f"square images expected, got {h}x{w}")
    if mc.kind == "desknet":
        return build_desknet(mc.widths, mc.blocks_per_stage, data.num_classes, c, h, seed)
    return build_plain_cnn(mc.widths, data.num_classes, c, h, seed)


# ---------------------------------------------------------------------------
# one seed


class SeedRun:
    """Stage-by-stage execution for one seed, writing into ``<out>/seed-<s>``."""

    def __init__(self, cfg: ExperimentConfig, seed: int, out_dir: Path, data: DataSplit):
        self.cfg = cfg
        self.seed = seed
        self.data = data
        self.dir = Path(out_dir) / f"seed-{seed}"
        self.snap_dir = self.dir / "snapshots"
        self.run_id = f"{Path(out_dir).name}-s{seed}"
        self.metrics_path = self.dir / "metrics.jsonl"
        self.timings_path = self.dir / "timings.jsonl"
        self.next_stage = "baseline"  # where a failure would be attributed

    def reset(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        self.metrics_path.write_text("")
        self.timings_path.write_text("")

    def _append(self, path: Path, line: str) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()

    def record(self, arm: str, stage: str, snap: ModelSnapshot | None = None, accuracy: float | None = None,
               loss: list[float] | None = None, seconds: float = 0.0) -> MetricsRecord:
        rec = MetricsRecord(
            self.run_id, self.seed, arm, stage,
            param_count=snap.meta.param_count if snap is not None else 0,
            mac_count=snap.meta.mac_count if snap is not None else 0,
            train_loss=[float(v) for v in (loss or [])],
            eval_accuracy=float(snap.meta.eval_accuracy if accuracy is None else accuracy),
        )
        self._append(self.metrics_path, rec.to_json())
        self._append(self.timings_path, json.dumps({"arm": arm, "stage": stage, "seconds": round(seconds, 3)}))
        self.next_stage = self._after(stage)
        return rec

    def _after(self, stage: str) -> str:
        if stage == "baseline":
            return "cycle-1" if self.cfg.cycle.num_cycles > 0 else "distill"
        if stage.startswith("cycle-"):
            k = int(stage[6:])
            return f"cycle-{k + 1}" if k < self.cfg.cycle.num_cycles else "ensemble"
        return "distill"

    def record_failure(self, arms: list[str], stage: str, exc: BaseException) -> None:
        for arm in arms:
            rec = MetricsRecord(self.run_id, self.seed, arm, stage, status="failed",
                                error=f"{type(exc).__name__}: {exc}")
            self._append(self.metrics_path, rec.to_json())

    def _save(self, snap: ModelSnapshot, name: str) -> None:
        if self.cfg.save_snapshots or name == "baseline" or name.startswith("one_cycle-"):
            self.snap_dir.mkdir(parents=True, exist_ok=True)
            save_snapshot(snap, self.snap_dir / f"{name}.snap")

    def _load(self, name: str) -> ModelSnapshot:
        path = self.snap_dir / f"{name}.snap"
        if not path.is_file():
            raise RunError(f"missing snapshot {path}; run the earlier stage first")
        return load_snapshot(path)

    # stages

    def train(self, arms: list[str]) -> ModelSnapshot:
        t0 = time.perf_counter()
        loss: list[float] = []
        model = build_model(self.cfg, self.data, self.seed)
        base = train_baseline(model, self.data, self.cfg.train, self.seed, loss)
        seconds = time.perf_counter() - t0
        self._save(base, "baseline")
        for arm in arms:
            self.record(arm, "baseline", base, loss=loss, seconds=seconds)
        return base

    def prune(self, arms: list[str], baseline: ModelSnapshot | None = None) -> dict[str, SnapshotRegistry]:
        """Pruning cycles for each retraining schedule the arms need."""
        baseline = baseline if baseline is not None else self._load("baseline")
        needed = [s for s in RETRAIN_ARMS if s in arms or (s == "one_cycle" and set(arms) & set(DISTILL_ARMS))]
        registries = {}
        for schedule in needed:
            cfg = dataclasses.replace(self.cfg.cycle, retrain_schedule=schedule)
            recorders = [a for a in arms if a == schedule or (schedule == "one_cycle" and a in DISTILL_ARMS)]
            t0 = time.perf_counter()

            def on_cycle(snap):
                nonlocal t0
                seconds = time.perf_counter() - t0
                self._save(snap, f"{schedule}-cycle{snap.meta.cycle_index}")
                for arm in recorders:
                    self.record(arm, f"cycle-{snap.meta.cycle_index}", snap, loss=histories[-1], seconds=seconds)
                t0 = time.perf_counter()

            histories: list[list[float]] = []
            registry = run_iterative_pruning(baseline, cfg, self.data, self.seed, histories, on_cycle)
            registries[schedule] = registry
            if len(registry) > 1:
                t0 = time.perf_counter()
                acc = evaluate(ensemble_of(registry), self.data.test)
                for arm in recorders:
                    self.record(arm, "ensemble", registry[-1], accuracy=acc, seconds=time.perf_counter() - t0)
        return registries

    def _registry(self, schedule: str) -> SnapshotRegistry:
        reg = SnapshotRegistry()
        reg.append(self._load("baseline"))
        for c in range(1, self.cfg.cycle.num_cycles + 1):
            reg.append(self._load(f"{schedule}-cycle{c}"))
        return reg

    def distill(self, arms: list[str], registry: SnapshotRegistry | None = None) -> dict[str, ModelSnapshot]:
        students = {}
        wanted = [a for a in arms if a in DISTILL_ARMS]
        if not wanted or not self.cfg.distill_enabled:
            return students
        registry = registry if registry is not None else self._registry("one_cycle")
        for arm in wanted:
            dcfg = dataclasses.replace(self.cfg.distill, teachers="ensemble" if arm == "kesi" else "single")
            t0 = time.perf_counter()
            loss: list[float] = []
            student = distill_student(registry, dcfg, self.data, self.seed, loss)
            self._save(student, f"{arm}-student")
            self.record(arm, "distill", student, loss=loss, seconds=time.perf_counter() - t0)
            students[arm] = student
        return students

    def run_all(self, arms: list[str]) -> bool:
        """Every stage in order; a failure is recorded and ends this seed."""
        self.reset()
        try:
            base = self.train(arms)
            regs = self.prune(arms, base)
            self.distill(arms, regs.get("one_cycle"))
        except Exception as exc:  # noqa: BLE001 - recorded, then the next seed runs
            self.record_failure(arms, self.next_stage, exc)
            self._append(self.timings_path, json.dumps({"error": traceback.format_exc(limit=3)}))
            return False
        return True


def expected_stages(num_cycles: int, distill_enabled: bool, arm: str) -> list[str]:
    stages = ["baseline"] + [f"cycle-{c}" for c in range(1, num_cycles + 1)]
    if num_cycles > 0:
        stages.append("ensemble")
    if arm in DISTILL_ARMS and distill_enabled:
        stages.append("distill")
    return stages


def final_stage(num_cycles: int, distill_enabled: bool, arm: str) -> str:
    if arm in DISTILL_ARMS and distill_enabled:
        return "distill"
    return f"cycle-{num_cycles}" if num_cycles > 0 else "baseline"


# ---------------------------------------------------------------------------
# whole experiment


def _run_seed(cfg: ExperimentConfig, seed: int, out_dir: str, arms: list[str]) -> bool:
    try:
        data = load_data(cfg)
    except Exception as exc:  # noqa: BLE001
        run = SeedRun(cfg, seed, Path(out_dir), None)
        run.reset()
        run.record_failure(arms, "baseline", exc)
        return False
    return SeedRun(cfg, seed, Path(out_dir), data).run_all(arms)


def write_config(cfg: ExperimentConfig, out_dir: Path, arms: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = cfg.to_dict()
    doc["arms"] = list(arms)
    (out_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, out_dir=None, arms: list[str] | None = None,
                   seeds: list[int] | None = None, workers: int = 1) -> bool:
    """Run every seed (each in its own file); returns True iff every stage completed."""
    out = Path(out_dir) if out_dir is not None else cfg.resolve_output_dir()
    arms = list(arms or cfg.arms)
    seeds = list(seeds if seeds is not None else cfg.seeds)
    write_config(cfg, out, arms)
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            ok = list(pool.map(_run_seed, [cfg] * len(seeds), seeds, [str(out)] * len(seeds),
                               [arms] * len(seeds)))
    else:
        ok = [_run_seed(cfg, s, str(out), arms) for s in seeds]
    write_summary(out, cfg, arms, seeds)
    return all(ok)


def collect(out_dir, seeds) -> list[MetricsRecord]:
    records = []
    for seed in seeds:
        path = Path(out_dir) / f"seed-{seed}" / "metrics.jsonl"
        if path.is_file():
            records.extend(read_metrics(path))
    return records


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation (ddof=0)."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def summary_rows(records: list[MetricsRecord], cfg: ExperimentConfig, arms: list[str]) -> list[dict]:
    ok = [r for r in records if r.status == "ok"]
    rows = []
    for arm in arms:
        stages = [final_stage(cfg.cycle.num_cycles, cfg.distill_enabled, arm)]
        if cfg.cycle.num_cycles > 0:
            stages.append("ensemble")
        for stage in stages:
            hits = [r for r in ok if r.arm == arm and r.stage == stage]
            if not hits:
                continue
            acc_mean, acc_std = mean_std([r.eval_accuracy for r in hits])
            rows.append({
                "arm": arm, "stage": stage, "n": len(hits),
                "accuracy_mean": acc_mean, "accuracy_std": acc_std,
                "param_count_mean": float(np.mean([r.param_count for r in hits])),
                "mac_count_mean": float(np.mean([r.mac_count for r in hits])),
            })
    return rows


def write_summary(out_dir, cfg: ExperimentConfig, arms: list[str], seeds: list[int]) -> Path:
    rows = summary_rows(collect(out_dir, seeds), cfg, arms)
    cols = ["arm", "stage", "n", "accuracy_mean", "accuracy_std", "param_count_mean", "mac_count_mean"]
    lines = ["\t".join(cols)]
    for row in rows:
        lines.append("\t".join(_fmt(row[c]) for c in cols))
    path = Path(out_dir) / "summary.tsv"
    path.write_text("\n".join(lines) + "\n")
    return path


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)
