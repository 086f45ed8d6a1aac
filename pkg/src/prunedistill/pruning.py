"""Structured l1-norm filter pruning and global magnitude pruning.

Pruning only ever edits masks (and zeroes the masked entries). A filter of
a conv layer, or a unit of a hidden dense layer, is removed by masking its
weights, the matching batch-norm entries downstream of it, and the matching
input channels of every layer that consumes it. :func:`compact` turns such
a masked network into a physically smaller dense one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from prunedistill.errors import ParameterError, ShapeError
from prunedistill.models import (
    LayerSpec,
    ModelSnapshot,
    count_macs,
    count_params,
)

# guards floor() against representation error, e.g. 10 * 0.3 = 2.9999999999999996
_FLOOR_SLACK = 1e-9


@dataclass(frozen=True)
class ChannelFlow:
    """Layers touched when output channel j of ``layer`` is removed."""

    layer: str
    batchnorms: tuple[str, ...]
    consumers: tuple[str, ...]


@dataclass(frozen=True)
class PlanEntry:
    layer: str
    filters_to_prune: int
    depth_rank: int


@dataclass(frozen=True)
class FilterPrunePlan:
    entries: tuple[PlanEntry, ...]

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def _consumers_of(graph: list[LayerSpec], name: str) -> list[LayerSpec]:
    return [s for s in graph if name in s.inputs]


def channel_flow(model: ModelSnapshot, layer: str) -> ChannelFlow | None:
    """Follow ``layer``'s output channels to the layers that read them.

    Returns ``None`` when the channels reach a residual add (or the network
    output), where removing one would need matching surgery on another
    branch.
    """
    graph = model.graph
    bns: list[str] = []
    consumers: list[str] = []
    frontier = [layer]
    while frontier:
        name = frontier.pop()
        users = _consumers_of(graph, name)
        if not users:
            return None
        for spec in users:
            if spec.kind == "batchnorm":
                bns.append(spec.name)
                frontier.append(spec.name)
            elif spec.kind in ("relu", "global-avg-pool"):
                frontier.append(spec.name)
            elif spec.kind in ("conv", "dense"):
                consumers.append(spec.name)
            else:
                return None
    return ChannelFlow(layer, tuple(bns), tuple(consumers))


def filter_prunable_layers(model: ModelSnapshot) -> list[str]:
    """Prunable conv/dense layers whose outputs can be removed in isolation, in graph order."""
    out = []
    for spec in model.graph:
        if spec.prunable and spec.kind in ("conv", "dense") and channel_flow(model, spec.name) is not None:
            out.append(spec.name)
    return out


def prunable_conv_layers(model: ModelSnapshot) -> list[str]:
    return [n for n in filter_prunable_layers(model) if model.layer(n).kind == "conv"]


def _unit_axes(w: np.ndarray) -> tuple[int, ...]:
    return tuple(range(1, w.ndim))


def alive_filters(model: ModelSnapshot, layer: str) -> np.ndarray:
    mask = model.masks[f"{layer}.weight"]
    return mask.any(axis=_unit_axes(mask))


def l1_filter_scores(layer_weights, mask=None) -> list[float]:
    """Sum of |w| over each filter's alive entries; fully pruned filters score -inf."""
    w = np.asarray(layer_weights.data if hasattr(layer_weights, "data") else layer_weights, dtype=np.float64)
    if w.ndim != 4:
        raise ShapeError(f"expected an (F, C, k, k) conv weight, got shape {w.shape}")
    m = np.ones_like(w) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != w.shape:
        raise ShapeError(f"mask shape {m.shape} does not match weights {w.shape}")
    scores = (np.abs(w) * m).sum(axis=(1, 2, 3))
    dead = ~m.any(axis=(1, 2, 3))
    scores[dead] = -np.inf
    return scores.tolist()


def _unit_scores(model: ModelSnapshot, layer: str) -> np.ndarray:
    w = model.params[f"{layer}.weight"]
    m = model.masks[f"{layer}.weight"]
    scores = (np.abs(w) * m).sum(axis=_unit_axes(w))
    scores[~m.any(axis=_unit_axes(m))] = -np.inf
    return scores


def select_smallest(scores, count: int) -> list[int]:
    """Indices of the ``count`` smallest finite scores; ties go to the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    candidates = np.flatnonzero(np.isfinite(s))
    if count > len(candidates):
        raise ParameterError(f"cannot select {count} of {len(candidates)} alive units")
    order = candidates[np.argsort(s[candidates], kind="stable")]
    return sorted(order[:count].tolist())


def make_depth_ramped_plan(model: ModelSnapshot, base_fraction: float, ramp: float) -> FilterPrunePlan:
    """Prune ``floor(alive * (base_fraction + rank * ramp))`` filters per layer.

    ``rank`` is the 0-based position among the filter-prunable layers (convs,
    and hidden dense layers of an MLP), so deeper layers lose a larger
    share. At least one filter always survives.
    """
    if not 0 < base_fraction < 1:
        raise ParameterError(f"base_fraction must be in (0, 1), got {base_fraction}")
    if ramp < 0:
        raise ParameterError(f"ramp must be >= 0, got {ramp}")
    layers = filter_prunable_layers(model)
    bad = [(n, base_fraction + d * ramp) for d, n in enumerate(layers) if base_fraction + d * ramp >= 1]
    if bad:
        listing = ", ".join(f"{n} ({f:.3g})" for n, f in bad)
        raise ParameterError(f"per-layer prune fraction reaches 1 at: {listing}")
    entries = []
    for d, name in enumerate(layers):
        alive = int(alive_filters(model, name).sum())
        count = math.floor(alive * (base_fraction + d * ramp) + _FLOOR_SLACK)
        entries.append(PlanEntry(name, min(count, alive - 1), d))
    return FilterPrunePlan(tuple(entries))


def _mask_units(model: ModelSnapshot, layer: str, units: list[int]) -> None:
    flow = channel_flow(model, layer)
    if flow is None:
        raise ParameterError(f"layer {layer!r} cannot be filter-pruned in isolation")
    idx = np.asarray(units, dtype=np.int64)
    keys = [f"{layer}.weight"]
    if f"{layer}.bias" in model.params:
        keys.append(f"{layer}.bias")
    for bn in flow.batchnorms:
        keys += [f"{bn}.weight", f"{bn}.bias", f"{bn}.running_mean", f"{bn}.running_var"]
    for key in keys:
        model.masks[key][idx] = 0.0
    for consumer in flow.consumers:
        model.masks[f"{consumer}.weight"][:, idx] = 0.0
    _zero_masked(model)


def _zero_masked(model: ModelSnapshot) -> None:
    for table in (model.params, model.buffers):
        for key, arr in table.items():
            arr *= model.masks[key]


def apply_filter_prune(model: ModelSnapshot, plan: FilterPrunePlan) -> ModelSnapshot:
    """Mask the lowest-l1 filters of each planned layer; returns a new snapshot."""
    valid = set(filter_prunable_layers(model))
    out = model.copy()
    for entry in plan:
        if entry.layer not in valid:
            raise ParameterError(f"plan names {entry.layer!r}, which is not filter-prunable in this model")
        if entry.filters_to_prune < 0:
            raise ParameterError(f"negative prune count for {entry.layer!r}")
        if entry.filters_to_prune == 0:
            continue
        scores = _unit_scores(out, entry.layer)
        alive = int(np.isfinite(scores).sum())
        if entry.filters_to_prune >= alive:
            raise ParameterError(
                f"plan prunes {entry.filters_to_prune} of {alive} alive filters in {entry.layer!r}")
        _mask_units(out, entry.layer, select_smallest(scores, entry.filters_to_prune))
    return out.refresh_counts()


def conv_weight_keys(model: ModelSnapshot) -> list[str]:
    return [f"{s.name}.weight" for s in model.graph if s.kind == "conv"]


def global_magnitude_prune(model: ModelSnapshot, fraction: float) -> ModelSnapshot:
    """Mask the ``floor(fraction * alive)`` smallest-magnitude alive conv weights.

    All conv layers are pooled. Ties are broken by layer order, then flat index.
    """
    if not 0 <= fraction < 1:
        raise ParameterError(f"fraction must be in [0, 1), got {fraction}")
    out = model.copy()
    keys = conv_weight_keys(out)
    mags, layer_ids, flat_ids = [], [], []
    for li, key in enumerate(keys):
        alive = np.flatnonzero(out.masks[key].ravel())
        mags.append(np.abs(out.params[key].ravel()[alive]))
        layer_ids.append(np.full(len(alive), li))
        flat_ids.append(alive)
    mag = np.concatenate(mags)
    lid = np.concatenate(layer_ids)
    fid = np.concatenate(flat_ids)
    count = math.floor(fraction * len(mag) + _FLOOR_SLACK)
    if count == 0:
        return out.refresh_counts()
    order = np.lexsort((fid, lid, mag))[:count]
    for li, key in enumerate(keys):
        chosen = fid[order[lid[order] == li]]
        out.masks[key].ravel()[chosen] = 0.0
    _zero_masked(out)
    return out.refresh_counts()


def sparsity_report(model: ModelSnapshot, reference: ModelSnapshot | None = None) -> dict:
    """Alive counts per layer and in total, and reductions against ``reference``.

    ``reference`` defaults to the model itself with every mask set to one,
    which is the cycle-0 network for anything built by this package.
    """
    if reference is None:
        reference = ModelSnapshot(model.graph, model.params, model.buffers,
                                  {k: np.ones_like(v) for k, v in model.masks.items()}, model.meta)
    layers = {}
    for spec in model.graph:
        keys = [k for k in model.params if k.rsplit(".", 1)[0] == spec.name]
        if not keys:
            continue
        alive = sum(int(np.count_nonzero(model.masks[k])) for k in keys)
        total = sum(int(reference.masks[k].size) for k in keys)
        layers[spec.name] = {"alive": alive, "total": total}
    params = count_params(model)
    ref_params = count_params(reference)
    shape = model.meta.input_shape
    macs = count_macs(model, shape) if shape else 0
    ref_macs = count_macs(reference, shape) if shape else 0
    return {
        "layers": layers,
        "param_count": params,
        "reference_param_count": ref_params,
        "pct_params_pruned": 100.0 * (1.0 - params / ref_params) if ref_params else 0.0,
        "mac_count": macs,
        "reference_mac_count": ref_macs,
        "pct_macs_pruned": 100.0 * (1.0 - macs / ref_macs) if ref_macs else 0.0,
    }


def compact(model: ModelSnapshot) -> ModelSnapshot:
    """Physically drop fully pruned filters/units, yielding a smaller dense network."""
    out = model.copy()
    keep: dict[str, np.ndarray] = {}
    for name in filter_prunable_layers(model):
        alive = alive_filters(model, name)
        if not alive.all():
            keep[name] = np.flatnonzero(alive)
    if not keep:
        return out
    graph = {s.name: s for s in out.graph}
    for layer, idx in keep.items():
        flow = channel_flow(model, layer)
        spec = graph[layer]
        _take(out, f"{layer}.weight", idx, axis=0)
        if f"{layer}.bias" in out.params:
            _take(out, f"{layer}.bias", idx, axis=0)
        if spec.kind == "conv":
            spec.dims["out_channels"] = len(idx)
        else:
            spec.dims["out_features"] = len(idx)
        for bn in flow.batchnorms:
            for suffix in ("weight", "bias", "running_mean", "running_var"):
                _take(out, f"{bn}.{suffix}", idx, axis=0)
            graph[bn].dims["channels"] = len(idx)
        for consumer in flow.consumers:
            _take(out, f"{consumer}.weight", idx, axis=1)
            cspec = graph[consumer]
            if cspec.kind == "conv":
                cspec.dims["in_channels"] = len(idx)
            else:
                cspec.dims["in_features"] = len(idx)
    return out.refresh_counts()


def _take(model: ModelSnapshot, key: str, idx: np.ndarray, axis: int) -> None:
    table = model.params if key in model.params else model.buffers
    table[key] = np.take(table[key], idx, axis=axis)
    model.masks[key] = np.take(model.masks[key], idx, axis=axis)
