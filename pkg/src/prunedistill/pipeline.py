"""Train -> iteratively prune and retrain -> ensemble the snapshots -> distill.

Every stage takes a ``seed``; all randomness (batch order, augmentation,
re-initialisation) is drawn from named streams under it, so a run is
bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from prunedistill import autodiff as ad
from prunedistill.errors import NumericError, ParameterError, RunError
from prunedistill.harness.data import Dataset, DataSplit, augment_batch, rng_stream
from prunedistill.losses import cross_entropy, kd_loss_avg_prob, kd_loss_mean_kl
from prunedistill.models import ModelSnapshot, Network, predict_logits
from prunedistill.optim import (
    OneCycleConfig,
    OptState,
    adaptive_moment_step,
    one_cycle_lr,
    one_cycle_momentum,
    sgd_momentum_step,
    step_schedule_lr,
)
from prunedistill.pruning import apply_filter_prune, global_magnitude_prune, make_depth_ramped_plan

SCHEDULES = ("fixed_small_lr", "one_cycle")
PRUNERS = ("l1_filter", "global_magnitude")
OBJECTIVES = ("mean_kl", "avg_prob_kl")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    augment: bool = False
    augment_pad: int = 4
    augment_flip: bool = True


@dataclass
class CycleConfig:
    num_cycles: int = 5
    retrain_epochs: int = 4
    retrain_schedule: str = "one_cycle"
    pruner: str = "l1_filter"
    base_fraction: float = 0.12
    ramp: float = 0.04
    magnitude_fraction: float = 0.2
    fixed_lr: float = 0.001
    fixed_momentum: float = 0.9
    eta_initial: float = 0.01
    eta_max: float = 0.1
    eta_min: float = 1e-4
    beta_initial: float = 0.95
    beta_max: float = 0.85
    warmup_fraction: float = 0.1
    batch_size: int = 128
    weight_decay: float = 1e-4
    augment: bool = False
    augment_pad: int = 4
    augment_flip: bool = True

    def __post_init__(self):
        if self.num_cycles < 0:
            raise ParameterError("num_cycles must be >= 0")
        if self.retrain_epochs < 1:
            raise ParameterError("retrain_epochs must be >= 1")
        if self.retrain_schedule not in SCHEDULES:
            raise ParameterError(f"retrain_schedule must be one of {SCHEDULES}")
        if self.pruner not in PRUNERS:
            raise ParameterError(f"pruner must be one of {PRUNERS}")


@dataclass
class DistillConfig:
    tau: float = 5.0
    objective: str = "mean_kl"
    epochs: int = 4
    eta_initial: float = 1e-4
    eta_max: float = 1e-3
    eta_min: float = 1e-6
    warmup_fraction: float = 0.1
    batch_size: int = 128
    teachers: str = "ensemble"  # "ensemble" or "single" (baseline only)
    include_baseline: bool = True
    warm_start: bool = True
    joint_supervised: bool = False
    augment: bool = False
    augment_pad: int = 4
    augment_flip: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError("tau must be positive")
        if self.objective not in OBJECTIVES:
            raise ParameterError(f"objective must be one of {OBJECTIVES}")
        if self.teachers not in ("ensemble", "single"):
            raise ParameterError("teachers must be 'ensemble' or 'single'")
        if self.epochs < 1:
            raise ParameterError("distillation needs at least one epoch")


@dataclass
class SnapshotRegistry:
    """Snapshots of one pruning run; index 0 is the unpruned baseline."""

    snapshots: list[ModelSnapshot] = field(default_factory=list)

    def append(self, snap: ModelSnapshot) -> None:
        if self.snapshots and snap.meta.param_count > self.snapshots[-1].meta.param_count:
            raise ParameterError("param_count must not increase across cycles")
        self.snapshots.append(snap)

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, i):
        return self.snapshots[i]

    def __iter__(self):
        return iter(self.snapshots)


@dataclass
class SnapshotEnsemble:
    members: list[ModelSnapshot]
    tau: float = 1.0

    def __post_init__(self):
        if not self.members:
            raise ParameterError("an ensemble needs at least one member")
        classes = {m.num_classes for m in self.members}
        if len(classes) != 1:
            raise ParameterError(f"ensemble members disagree on class count: {sorted(classes)}")


# ---------------------------------------------------------------------------
# training loop

LossFn = Callable[[ad.Tensor, np.ndarray, np.ndarray], ad.Tensor]
UpdateFn = Callable[[Network, int], None]


def _fit(net: Network, data: Dataset, epochs: int, batch_size: int, seed: int, stage: str,
         loss_fn: LossFn, update: UpdateFn, cfg, history: list | None) -> None:
    n = len(data)
    steps = math.ceil(n / batch_size)
    step = 0
    params = list(net.parameters().values())
    for epoch in range(epochs):
        order = rng_stream(seed, stage, "shuffle", epoch).permutation(n)
        aug_rng = rng_stream(seed, stage, "augment", epoch)
        total = 0.0
        for b in range(steps):
            idx = order[b * batch_size:(b + 1) * batch_size]
            xb = data.x[idx]
            if cfg.augment:
                xb = augment_batch(xb, aug_rng, cfg.augment_pad, cfg.augment_flip)
            logits = net.forward(xb, train=True)
            loss = loss_fn(logits, idx, xb)
            value = loss.item()
            if not math.isfinite(value):
                raise RunError(f"{stage}: loss became {value} at epoch {epoch}, step {step}")
            ad.zero_grads(params)
            ad.backward(loss)
            try:
                update(net, step)
            except NumericError as exc:
                raise RunError(f"{stage}: {exc} at epoch {epoch}, step {step}") from exc
            total += value * len(idx)
            step += 1
        if history is not None:
            history.append(total / n)


def _grads(net: Network) -> dict[str, np.ndarray | None]:
    return {k: t.grad for k, t in net.parameters().items()}


def _arrays(net: Network) -> dict[str, np.ndarray]:
    return {k: t.data for k, t in net.parameters().items()}


def _supervised(data: Dataset) -> LossFn:
    return lambda logits, idx, xb: cross_entropy(logits, data.y[idx])


def train_baseline(model: ModelSnapshot, data: DataSplit, cfg: TrainConfig, seed: int,
                   history: list | None = None) -> ModelSnapshot:
    """SGD with momentum and a step-decay schedule; returns the cycle-0 snapshot."""
    if len(data.train) == 0:
        raise ParameterError("training data is empty")
    net = Network(model)
    net.apply_masks()
    state = OptState()
    steps = math.ceil(len(data.train) / cfg.batch_size)

    def update(net, step):
        lr = step_schedule_lr(cfg.lr, step // steps, cfg.epochs)
        sgd_momentum_step(_arrays(net), _grads(net), state, lr, cfg.momentum, cfg.weight_decay, net.masks)

    _fit(net, data.train, cfg.epochs, cfg.batch_size, seed, "baseline", _supervised(data.train),
         update, cfg, history)
    snap = net.snapshot(cycle_index=0, schedule_name="step", seed=seed)
    return snap.with_meta(eval_accuracy=evaluate(snap, data.test))


def retrain(model: ModelSnapshot, data: DataSplit, cfg: CycleConfig, seed: int, stage: str,
            history: list | None = None) -> ModelSnapshot:
    """Fine-tune a pruned snapshot with the configured schedule."""
    net = Network(model)
    net.apply_masks()
    state = OptState()
    total = cfg.retrain_epochs * math.ceil(len(data.train) / cfg.batch_size)
    if cfg.retrain_schedule == "one_cycle":
        oc = OneCycleConfig.for_steps(
            total, cfg.warmup_fraction, eta_initial=cfg.eta_initial, eta_max=cfg.eta_max,
            eta_min=cfg.eta_min, beta_initial=cfg.beta_initial, beta_max=cfg.beta_max)

        def update(net, step):
            sgd_momentum_step(_arrays(net), _grads(net), state, one_cycle_lr(oc, step),
                              one_cycle_momentum(oc, step), cfg.weight_decay, net.masks)
    else:
        def update(net, step):
            sgd_momentum_step(_arrays(net), _grads(net), state, cfg.fixed_lr,
                              cfg.fixed_momentum, cfg.weight_decay, net.masks)

    _fit(net, data.train, cfg.retrain_epochs, cfg.batch_size, seed, stage, _supervised(data.train),
         update, cfg, history)
    return net.snapshot()


def prune_once(model: ModelSnapshot, cfg: CycleConfig) -> ModelSnapshot:
    if cfg.pruner == "l1_filter":
        return apply_filter_prune(model, make_depth_ramped_plan(model, cfg.base_fraction, cfg.ramp))
    return global_magnitude_prune(model, cfg.magnitude_fraction)


def run_iterative_pruning(baseline: ModelSnapshot, cfg: CycleConfig, data: DataSplit, seed: int,
                          histories: list | None = None,
                          on_cycle: Callable[[ModelSnapshot], None] | None = None) -> SnapshotRegistry:
    """``cfg.num_cycles`` rounds of prune-then-retrain, each snapshot evaluated and kept."""
    registry = SnapshotRegistry()
    registry.append(baseline)
    current = baseline
    for c in range(1, cfg.num_cycles + 1):
        pruned = prune_once(current, cfg)
        hist: list[float] = []
        trained = retrain(pruned, data, cfg, seed, f"cycle{c}", hist)
        current = trained.with_meta(cycle_index=c, schedule_name=cfg.retrain_schedule,
                                    eval_accuracy=evaluate(trained, data.test), seed=seed)
        registry.append(current)
        if histories is not None:
            histories.append(hist)
        if on_cycle is not None:
            on_cycle(current)
    return registry


# ---------------------------------------------------------------------------
# ensembles and evaluation


def member_probs(model: ModelSnapshot, x: np.ndarray, tau: float) -> np.ndarray:
    logits = predict_logits(model, x)
    return ad.softmax_with_temperature(ad.Tensor(logits), tau).data


def ensemble_predict(ens: SnapshotEnsemble, inputs: np.ndarray, tau: float | None = None) -> np.ndarray:
    """Mean of the members' temperature-softened probabilities, summed in member order."""
    tau = ens.tau if tau is None else tau
    total = None
    for member in ens.members:
        p = member_probs(member, inputs, tau)
        total = p if total is None else total + p
    return total / len(ens.members)


def _accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def evaluate(model, data: Dataset) -> float:
    """Top-1 accuracy of a snapshot, network or ensemble (at temperature 1)."""
    if len(data) == 0:
        raise ParameterError("cannot evaluate on an empty dataset")
    if isinstance(model, SnapshotEnsemble):
        scores = ensemble_predict(model, data.x, 1.0)
    else:
        scores = predict_logits(model, data.x)
    m = scores.shape[1]
    if data.y.min() < 0 or data.y.max() >= m:
        raise ParameterError(f"labels must lie in [0, {m})")
    return _accuracy(scores, data.y)


# ---------------------------------------------------------------------------
# distillation


def teacher_members(registry: SnapshotRegistry, dcfg: DistillConfig) -> list[ModelSnapshot]:
    if dcfg.teachers == "single":
        return [registry[0]]
    members = list(registry.snapshots)
    if not dcfg.include_baseline and len(members) > 1:
        members = members[1:]
    return members


def reinitialize(model: ModelSnapshot, seed: int) -> ModelSnapshot:
    """Fresh weights with the builders' init scheme; masks are kept and applied."""
    rng = rng_stream(seed, "reinit")
    out = model.copy()
    for spec in out.graph:
        w = f"{spec.name}.weight"
        if spec.kind == "conv":
            f, _, k, _ = out.params[w].shape
            out.params[w] = rng.normal(0.0, np.sqrt(2.0 / (f * k * k)), out.params[w].shape)
        elif spec.kind == "dense":
            bound = 1.0 / np.sqrt(out.params[w].shape[1])
            out.params[w] = rng.uniform(-bound, bound, out.params[w].shape)
            out.params[f"{spec.name}.bias"] = rng.uniform(-bound, bound, out.params[f"{spec.name}.bias"].shape)
        elif spec.kind == "batchnorm":
            out.params[w][:] = 1.0
            out.params[f"{spec.name}.bias"][:] = 0.0
            out.buffers[f"{spec.name}.running_mean"][:] = 0.0
            out.buffers[f"{spec.name}.running_var"][:] = 1.0
    for table in (out.params, out.buffers):
        for k in table:
            table[k] = table[k] * out.masks[k]
    return out


def distill_student(registry: SnapshotRegistry, dcfg: DistillConfig, data: DataSplit, seed: int,
                    history: list | None = None) -> ModelSnapshot:
    """Distill the snapshot ensemble into the last (smallest) snapshot.

    Teachers are evaluated once, in eval mode, on the un-augmented training
    inputs; with augmentation on they are re-evaluated per batch instead.
    The student's masks are never changed.
    """
    if len(registry) == 0:
        raise ParameterError("registry is empty")
    teachers = teacher_members(registry, dcfg)
    final = registry[-1]
    start = final if dcfg.warm_start else reinitialize(final, seed)
    net = Network(start)
    net.apply_masks()
    train = data.train
    cache = None if dcfg.augment else [member_probs(t, train.x, dcfg.tau) for t in teachers]
    objective = kd_loss_mean_kl if dcfg.objective == "mean_kl" else kd_loss_avg_prob

    def loss_fn(logits, idx, xb):
        if cache is not None:
            qs = [q[idx] for q in cache]
        else:
            qs = [member_probs(t, xb, dcfg.tau) for t in teachers]
        loss = objective(logits, qs, dcfg.tau)
        if dcfg.joint_supervised:
            loss = ad.add(loss, cross_entropy(logits, train.y[idx]))
        return loss

    total = dcfg.epochs * math.ceil(len(train) / dcfg.batch_size)
    oc = OneCycleConfig.for_steps(total, dcfg.warmup_fraction, eta_initial=dcfg.eta_initial,
                                  eta_max=dcfg.eta_max, eta_min=dcfg.eta_min)
    state = OptState()

    def update(net, step):
        adaptive_moment_step(_arrays(net), _grads(net), state, one_cycle_lr(oc, step), masks=net.masks)

    # one stream name for every teacher choice, so arms see the same batches
    _fit(net, train, dcfg.epochs, dcfg.batch_size, seed, "distill", loss_fn,
         update, dcfg, history)
    snap = net.snapshot(schedule_name=f"distill-{dcfg.objective}", seed=seed)
    return snap.with_meta(eval_accuracy=evaluate(snap, data.test))


def run_pipeline(model: ModelSnapshot, data: DataSplit, train_cfg: TrainConfig, cycle_cfg: CycleConfig,
                 distill_cfg: DistillConfig, seed: int) -> tuple[SnapshotRegistry, ModelSnapshot]:
    """Baseline, pruning cycles and distillation in one call."""
    baseline = train_baseline(model, data, train_cfg, seed)
    registry = run_iterative_pruning(baseline, cycle_cfg, data, seed)
    return registry, distill_student(registry, distill_cfg, data, seed)


def ensemble_of(registry: SnapshotRegistry | Sequence[ModelSnapshot], tau: float = 1.0) -> SnapshotEnsemble:
    return SnapshotEnsemble(list(registry), tau)
