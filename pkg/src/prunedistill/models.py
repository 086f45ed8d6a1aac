"""Prunable network definitions, parameter/MAC accounting and snapshot files.

A network is a :class:`ModelSnapshot`: a topologically ordered list of
:class:`LayerSpec` (each naming its input layers), flat float64 arrays for
parameters and batch-norm buffers, and a 0/1 mask per array. Masks are the
only record of sparsity; pruned entries are also held at exactly zero.

:class:`Network` wraps a snapshot with autodiff tensors for training.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from prunedistill import autodiff as ad
from prunedistill.autodiff.ops import conv_output_size
from prunedistill.errors import FormatError, ParameterError, ShapeError

INPUT = "input"
LAYER_KINDS = ("dense", "conv", "batchnorm", "relu", "residual-add", "global-avg-pool", "flatten")


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...]
    dims: dict = field(default_factory=dict)
    prunable: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ParameterError(f"unknown layer kind {self.kind!r}")
        self.inputs = tuple(self.inputs)

    def to_json(self) -> dict:
        return {"name": self.name, "kind": self.kind, "inputs": list(self.inputs),
                "dims": self.dims, "prunable": self.prunable}

    @classmethod
    def from_json(cls, d: dict) -> "LayerSpec":
        return cls(d["name"], d["kind"], tuple(d["inputs"]), dict(d["dims"]), bool(d["prunable"]))


@dataclass
class SnapshotMeta:
    cycle_index: int = 0
    schedule_name: str = "init"
    eval_accuracy: float = 0.0
    param_count: int = 0
    mac_count: int = 0
    seed: int = 0
    input_shape: tuple[int, ...] = ()

    def __post_init__(self):
        if self.cycle_index < 0:
            raise ParameterError("cycle_index must be >= 0")
        if not 0.0 <= self.eval_accuracy <= 1.0:
            raise ParameterError(f"eval_accuracy {self.eval_accuracy} outside [0, 1]")
        self.input_shape = tuple(int(s) for s in self.input_shape)


@dataclass
class ModelSnapshot:
    graph: list[LayerSpec]
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    meta: SnapshotMeta

    def __post_init__(self):
        for key, arr in {**self.params, **self.buffers}.items():
            m = self.masks.get(key)
            if m is None or m.shape != arr.shape:
                raise ShapeError(f"mask for {key!r} missing or mis-shaped")

    def layer(self, name: str) -> LayerSpec:
        for spec in self.graph:
            if spec.name == name:
                return spec
        raise KeyError(name)

    @property
    def num_classes(self) -> int:
        return int(self.graph[-1].dims["out_features"])

    def copy(self) -> "ModelSnapshot":
        return ModelSnapshot(
            copy.deepcopy(self.graph),
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            {k: v.copy() for k, v in self.masks.items()},
            dataclasses.replace(self.meta),
        )

    def with_meta(self, **changes) -> "ModelSnapshot":
        out = self.copy()
        out.meta = dataclasses.replace(out.meta, **changes)
        return out

    def refresh_counts(self) -> "ModelSnapshot":
        """Recompute ``param_count`` and ``mac_count`` from the masks."""
        return self.with_meta(
            param_count=count_params(self),
            mac_count=count_macs(self, self.meta.input_shape) if self.meta.input_shape else 0,
        )


# ---------------------------------------------------------------------------
# construction


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.graph: list[LayerSpec] = []
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def conv(self, name, src, c_in, c_out, kernel, stride=1, padding=None):
        padding = (kernel - 1) // 2 if padding is None else padding
        fan_out = c_out * kernel * kernel
        self.params[f"{name}.weight"] = self.rng.normal(0.0, np.sqrt(2.0 / fan_out), (c_out, c_in, kernel, kernel))
        self.graph.append(LayerSpec(name, "conv", (src,), dict(
            in_channels=c_in, out_channels=c_out, kernel=kernel, stride=stride, padding=padding), prunable=True))
        return name

    def bn(self, name, src, channels):
        self.params[f"{name}.weight"] = np.ones(channels)
        self.params[f"{name}.bias"] = np.zeros(channels)
        self.buffers[f"{name}.running_mean"] = np.zeros(channels)
        self.buffers[f"{name}.running_var"] = np.ones(channels)
        self.graph.append(LayerSpec(name, "batchnorm", (src,), dict(channels=channels)))
        return name

    def relu(self, name, src):
        self.graph.append(LayerSpec(name, "relu", (src,)))
        return name

    def dense(self, name, src, n_in, n_out, prunable):
        bound = 1.0 / np.sqrt(n_in)
        self.params[f"{name}.weight"] = self.rng.uniform(-bound, bound, (n_out, n_in))
        self.params[f"{name}.bias"] = self.rng.uniform(-bound, bound, n_out)
        self.graph.append(LayerSpec(name, "dense", (src,), dict(in_features=n_in, out_features=n_out), prunable))
        return name

    def add(self, name, a, b):
        self.graph.append(LayerSpec(name, "residual-add", (a, b)))
        return name

    def pool(self, name, src):
        self.graph.append(LayerSpec(name, "global-avg-pool", (src,)))
        return name

    def finish(self, input_shape, seed) -> ModelSnapshot:
        masks = {k: np.ones_like(v) for k, v in {**self.params, **self.buffers}.items()}
        snap = ModelSnapshot(self.graph, self.params, self.buffers, masks,
                             SnapshotMeta(seed=seed, input_shape=input_shape))
        return snap.refresh_counts()


def build_desknet(
    widths, blocks_per_stage: int = 1, num_classes: int = 10,
    in_channels: int = 3, image_size: int = 32, seed: int = 0,
) -> ModelSnapshot:
    """Three-stage residual CNN in the ResNet-for-CIFAR mould.

    Stem: conv3x3-bn-relu. Each block: conv-bn-relu-conv-bn plus an identity
    or projection shortcut, then relu. Stages 2 and 3 halve the resolution in
    their first block. Conv output sizes must divide exactly, so the
    downsampling kernels depend on the parity of the incoming size: even
    sizes use a 4x4/pad-1 conv and a 2x2 projection, odd sizes a 3x3/pad-1
    conv and a 1x1 projection (all stride 2).
    """
    widths = [int(w) for w in widths]
    if len(widths) != 3 or min(widths) < 1:
        raise ParameterError(f"widths must be 3 positive ints, got {widths}")
    if blocks_per_stage < 1:
        raise ParameterError("blocks_per_stage must be >= 1")
    if num_classes < 2:
        raise ParameterError("num_classes must be >= 2")
    b = _Builder(np.random.default_rng(seed))
    x = b.relu("stem.relu", b.bn("stem.bn", b.conv("stem.conv", INPUT, in_channels, widths[0], 3), widths[0]))
    c_in, size = widths[0], image_size
    for s, width in enumerate(widths):
        for blk in range(blocks_per_stage):
            p = f"s{s + 1}b{blk}"
            down = s > 0 and blk == 0
            stride = 2 if down else 1
            even = size % 2 == 0
            h = b.conv(f"{p}.conv1", x, c_in, width, 4 if down and even else 3, stride, 1)
            h = b.relu(f"{p}.relu1", b.bn(f"{p}.bn1", h, width))
            h = b.bn(f"{p}.bn2", b.conv(f"{p}.conv2", h, width, width, 3), width)
            if down or c_in != width:
                k = 2 if down and even else 1
                sc = b.bn(f"{p}.proj_bn", b.conv(f"{p}.proj", x, c_in, width, k, stride, 0), width)
            else:
                sc = x
            x = b.relu(f"{p}.relu", b.add(f"{p}.add", h, sc))
            c_in = width
            if down:
                size = size // 2 + size % 2
    b.dense("fc", b.pool("pool", x), c_in, num_classes, prunable=False)
    return b.finish((in_channels, image_size, image_size), seed)


def build_plain_cnn(widths, num_classes: int = 10, in_channels: int = 3,
                    image_size: int = 32, seed: int = 0) -> ModelSnapshot:
    """Sequential conv3x3-bn-relu stack, global pooling and a classifier.

    Every conv feeds the next directly, so all of them are filter-prunable.
    """
    widths = [int(w) for w in widths]
    if not widths or min(widths) < 1:
        raise ParameterError(f"widths must be positive, got {widths}")
    if num_classes < 2:
        raise ParameterError("num_classes must be >= 2")
    b = _Builder(np.random.default_rng(seed))
    x, c_in = INPUT, in_channels
    for i, w in enumerate(widths):
        x = b.relu(f"l{i}.relu", b.bn(f"l{i}.bn", b.conv(f"l{i}.conv", x, c_in, w, 3), w))
        c_in = w
    b.dense("fc", b.pool("pool", x), c_in, num_classes, prunable=False)
    return b.finish((in_channels, image_size, image_size), seed)


def build_mlp(layer_sizes, seed: int = 0) -> ModelSnapshot:
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ParameterError(f"need >= 2 positive layer sizes, got {sizes}")
    if sizes[-1] < 2:
        raise ParameterError("output layer needs >= 2 classes")
    b = _Builder(np.random.default_rng(seed))
    x = INPUT
    last = len(sizes) - 2
    for i in range(len(sizes) - 1):
        x = b.dense(f"fc{i}", x, sizes[i], sizes[i + 1], prunable=i < last)
        if i < last:
            x = b.relu(f"relu{i}", x)
    return b.finish((sizes[0],), seed)


# ---------------------------------------------------------------------------
# accounting


def is_learnable(model: ModelSnapshot, key: str) -> bool:
    return key in model.params


def count_params(model: ModelSnapshot) -> int:
    """Number of mask-alive learnable parameters."""
    return int(sum(int(np.count_nonzero(model.masks[k])) for k in model.params))


def layer_output_shapes(model: ModelSnapshot, input_shape) -> dict[str, tuple[int, ...]]:
    """Per-sample output shape of every layer (batch axis omitted)."""
    shapes: dict[str, tuple[int, ...]] = {INPUT: tuple(int(s) for s in input_shape)}
    for spec in model.graph:
        src = shapes[spec.inputs[0]]
        d = spec.dims
        if spec.kind == "conv":
            if len(src) != 3 or src[0] != d["in_channels"]:
                raise ShapeError(f"{spec.name}: expects {d['in_channels']} channels, got input {src}")
            ho = conv_output_size(src[1], d["kernel"], d["stride"], d["padding"])
            wo = conv_output_size(src[2], d["kernel"], d["stride"], d["padding"])
            shapes[spec.name] = (d["out_channels"], ho, wo)
        elif spec.kind == "dense":
            if len(src) != 1 or src[0] != d["in_features"]:
                raise ShapeError(f"{spec.name}: expects {d['in_features']} features, got input {src}")
            shapes[spec.name] = (d["out_features"],)
        elif spec.kind == "global-avg-pool":
            if len(src) != 3:
                raise ShapeError(f"{spec.name}: expects a CHW input, got {src}")
            shapes[spec.name] = (src[0],)
        elif spec.kind == "flatten":
            shapes[spec.name] = (int(np.prod(src)),)
        elif spec.kind == "residual-add":
            other = shapes[spec.inputs[1]]
            if other != src:
                raise ShapeError(f"{spec.name}: adding {src} and {other}")
            shapes[spec.name] = src
        else:
            shapes[spec.name] = src
    return shapes


def count_macs(model: ModelSnapshot, input_shape=None) -> int:
    """Multiply-accumulates for one sample, counting only mask-alive weights.

    A conv contributes ``H_out * W_out`` times its alive kernel entries, which
    for structured masks equals ``H_out * W_out * C_out_alive * C_in_alive * k^2``.
    A dense layer contributes its alive weight count. Other layers are free.
    """
    shapes = layer_output_shapes(model, input_shape if input_shape is not None else model.meta.input_shape)
    total = 0
    for spec in model.graph:
        if spec.kind == "conv":
            _, ho, wo = shapes[spec.name]
            total += ho * wo * int(np.count_nonzero(model.masks[f"{spec.name}.weight"]))
        elif spec.kind == "dense":
            total += int(np.count_nonzero(model.masks[f"{spec.name}.weight"]))
    return total


# ---------------------------------------------------------------------------
# runtime


class Network:
    """Autodiff view of a snapshot; parameters are trainable leaf tensors."""

    def __init__(self, snapshot: ModelSnapshot):
        self.graph = snapshot.graph
        self.meta = snapshot.meta
        self.params = {k: ad.Tensor(v.copy(), requires_grad=True, name=k) for k, v in snapshot.params.items()}
        self.buffers = {k: v.copy() for k, v in snapshot.buffers.items()}
        self.masks = {k: v.copy() for k, v in snapshot.masks.items()}

    def parameters(self) -> dict[str, ad.Tensor]:
        return self.params

    def forward(self, x, train: bool = False) -> ad.Tensor:
        x = ad.as_tensor(x)
        acts: dict[str, ad.Tensor] = {INPUT: x}
        p = self.params
        for spec in self.graph:
            src = acts[spec.inputs[0]]
            kind, d, n = spec.kind, spec.dims, spec.name
            if kind == "conv":
                out = ad.conv2d(src, p[f"{n}.weight"], d["stride"], d["padding"])
            elif kind == "batchnorm":
                out = ad.batch_norm(src, p[f"{n}.weight"], p[f"{n}.bias"],
                                    self.buffers[f"{n}.running_mean"], self.buffers[f"{n}.running_var"], train)
            elif kind == "relu":
                out = ad.relu(src)
            elif kind == "dense":
                out = ad.linear(src, p[f"{n}.weight"], p.get(f"{n}.bias"))
            elif kind == "residual-add":
                out = ad.add(src, acts[spec.inputs[1]])
            elif kind == "global-avg-pool":
                out = ad.global_avg_pool(src)
            else:
                out = ad.flatten(src)
            acts[n] = out
        return acts[self.graph[-1].name]

    __call__ = forward

    def apply_masks(self) -> None:
        for k, t in self.params.items():
            t.data *= self.masks[k]
        for k, b in self.buffers.items():
            b *= self.masks[k]

    def snapshot(self, **meta_changes) -> ModelSnapshot:
        snap = ModelSnapshot(
            copy.deepcopy(self.graph),
            {k: t.data.copy() for k, t in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            {k: v.copy() for k, v in self.masks.items()},
            dataclasses.replace(self.meta, **meta_changes),
        )
        return snap.refresh_counts()


def predict_logits(model: ModelSnapshot | Network, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Eval-mode logits, computed in fixed-size chunks."""
    net = model if isinstance(model, Network) else Network(model)
    chunks = [net.forward(ad.Tensor(x[i:i + batch_size]), train=False).data for i in range(0, len(x), batch_size)]
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# snapshot files
#
# layout: MAGIC (8) | version u32 LE | header length u64 LE | header JSON (UTF-8)
#         | arrays as little-endian float64, in header order

MAGIC = b"\x89PDSNAP\n"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_snapshot(model: ModelSnapshot, path) -> None:
    arrays = []
    for group, table in (("param", model.params), ("buffer", model.buffers), ("mask", model.masks)):
        for key, arr in table.items():
            arrays.append((group, key, arr))
    header = {
        "graph": [s.to_json() for s in model.graph],
        "meta": dataclasses.asdict(model.meta),
        "arrays": [{"group": g, "name": k, "shape": list(a.shape)} for g, k, a in arrays],
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(text)))
        fh.write(text)
        for _, _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_snapshot(path) -> ModelSnapshot:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise FormatError("file shorter than snapshot prefix", len(blob))
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError("bad magic bytes, not a snapshot file", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported snapshot version {version}", 8)
    pos = _PREFIX.size
    if pos + hlen > len(blob):
        raise FormatError("header truncated", len(blob))
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}", pos) from None
    pos += hlen
    tables: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "mask": {}}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise FormatError(f"array {entry['name']!r} truncated", len(blob))
        arr = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64).reshape(shape)
        tables[entry["group"]][entry["name"]] = arr
        pos += nbytes
    if pos != len(blob):
        raise FormatError("trailing bytes after last array", pos)
    meta = header["meta"]
    meta["input_shape"] = tuple(meta["input_shape"])
    return ModelSnapshot(
        [LayerSpec.from_json(s) for s in header["graph"]],
        tables["param"], tables["buffer"], tables["mask"], SnapshotMeta(**meta),
    )
