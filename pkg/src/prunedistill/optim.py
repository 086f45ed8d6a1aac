"""Optimizers and learning-rate / momentum schedules.

Schedules are evaluated per optimizer step. Both optimizers re-apply the
prune masks after every update, so pruned entries stay exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from prunedistill.errors import NumericError, ParameterError


@dataclass(frozen=True)
class OneCycleConfig:
    eta_initial: float = 0.01
    eta_max: float = 0.1
    eta_min: float = 1e-4
    beta_initial: float = 0.95
    beta_max: float = 0.85
    warmup: int = 1  # T
    total: int = 10  # L

    def __post_init__(self):
        if not 0 < self.warmup < self.total:
            raise ParameterError(f"need 0 < T < L, got T={self.warmup}, L={self.total}")
        if min(self.eta_initial, self.eta_max, self.eta_min) <= 0:
            raise ParameterError("learning rates must be positive")
        if not self.eta_min <= self.eta_initial <= self.eta_max:
            raise ParameterError("need eta_min <= eta_initial <= eta_max")
        for b in (self.beta_initial, self.beta_max):
            if not 0 <= b < 1:
                raise ParameterError(f"momentum {b} outside [0, 1)")

    @classmethod
    def for_steps(cls, total: int, warmup_fraction: float = 0.1, **kwargs) -> "OneCycleConfig":
        """Config over ``total`` steps with warmup a fraction of it (at least 1 step)."""
        warmup = min(max(1, int(round(warmup_fraction * total))), total - 1)
        return cls(warmup=warmup, total=total, **kwargs)


def _cos_ramp(start: float, end: float, frac: float) -> float:
    return end + (start - end) / 2.0 * (1.0 + math.cos(frac * math.pi))


def _check_step(cfg: OneCycleConfig, i: int) -> None:
    if not 0 <= i <= cfg.total:
        raise ParameterError(f"step {i} outside [0, {cfg.total}]")


def one_cycle_lr(cfg: OneCycleConfig, i: int) -> float:
    _check_step(cfg, i)
    if i <= cfg.warmup:
        return _cos_ramp(cfg.eta_initial, cfg.eta_max, i / cfg.warmup)
    return _cos_ramp(cfg.eta_max, cfg.eta_min, (i - cfg.warmup) / (cfg.total - cfg.warmup))


def one_cycle_momentum(cfg: OneCycleConfig, i: int) -> float:
    """Momentum goes beta_initial -> beta_max during warmup, then back to beta_initial."""
    _check_step(cfg, i)
    if i <= cfg.warmup:
        return cfg.beta_max + (cfg.beta_initial - cfg.beta_max) / 2.0 * (1.0 + math.cos(i / cfg.warmup * math.pi))
    frac = (i - cfg.warmup) / (cfg.total - cfg.warmup)
    return cfg.beta_initial + (cfg.beta_max - cfg.beta_initial) / 2.0 * (1.0 + math.cos(frac * math.pi))


def step_schedule_lr(base: float, epoch: int, total: int) -> float:
    """``base`` for the first half, ``base/10`` until 75%, then ``base/100``."""
    if total < 1 or not 0 <= epoch < total:
        raise ParameterError(f"epoch {epoch} outside [0, {total})")
    if epoch < 0.5 * total:
        return base
    if epoch < 0.75 * total:
        return base / 10.0
    return base / 100.0


@dataclass
class OptState:
    """Per-parameter optimizer buffers keyed like the parameter dict."""

    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def _check_finite(name: str, g: np.ndarray) -> None:
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient in {name}")


def sgd_momentum_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: OptState,
    lr: float,
    momentum: float,
    weight_decay: float = 0.0,
    masks: dict[str, np.ndarray] | None = None,
) -> OptState:
    """In-place heavy-ball SGD with coupled L2 weight decay.

    ``v = momentum * v + (grad + weight_decay * param)``; ``param -= lr * v``.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        _check_finite(name, g)
        mask = masks.get(name) if masks else None
        d = g + weight_decay * p if weight_decay else g.copy()
        if mask is not None:
            d *= mask
        v = state.velocity.get(name)
        if v is None:
            v = d
        else:
            v = momentum * v + d
        state.velocity[name] = v
        p -= lr * v
        if mask is not None:
            p *= mask
    state.step += 1
    return state


def adaptive_moment_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: OptState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    masks: dict[str, np.ndarray] | None = None,
) -> OptState:
    """In-place bias-corrected Adam update."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        _check_finite(name, g)
        mask = masks.get(name) if masks else None
        if mask is not None:
            g = g * mask
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if mask is not None:
            p *= mask
    return state
