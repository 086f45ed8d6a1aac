"""Datasets: IDX ingestion, synthetic blobs, augmentation and seeded streams."""

from __future__ import annotations

import gzip
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from prunedistill.errors import FormatError, ParameterError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    x: np.ndarray  # (N, C, H, W) images or (N, D) features, float64
    y: np.ndarray  # (N,) int64 labels

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ParameterError(f"{len(self.x)} inputs but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


@dataclass
class DataSplit:
    train: Dataset
    test: Dataset
    num_classes: int


def rng_stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for a named purpose under a run seed.

    The stream depends only on ``seed`` and ``names``, so adding or
    replacing one stage's draws never shifts another stage's.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for name in names:
        words.append(zlib.crc32(str(name).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(words))


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path, expected_magic: int, what: str) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise FormatError(f"{what} file too short for a magic number", 0)
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic != expected_magic:
        raise FormatError(f"{what} file has magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(blob) < header_end:
        raise FormatError(f"{what} header truncated", len(blob))
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) < header_end + count:
        raise FormatError(f"{what} data truncated: need {count} bytes", len(blob))
    if len(blob) > header_end + count:
        raise FormatError(f"{what} has trailing bytes", header_end + count)
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    return _read_idx(path, IDX_IMAGES_MAGIC, "images")


def read_idx_labels(path) -> np.ndarray:
    return _read_idx(path, IDX_LABELS_MAGIC, "labels")


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ParameterError("IDX writer only supports unsigned bytes")
    magic = (0x08 << 8) | arr.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _raw_idx_dataset(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    if images.ndim == 3:
        images = images[:, None, :, :]
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def downsample(x: np.ndarray, factor: int) -> np.ndarray:
    """Mean-pool NCHW images by an integer factor."""
    if factor == 1:
        return x
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ParameterError(f"image size {h}x{w} not divisible by {factor}")
    return x.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


def standardize(train: np.ndarray, *others: np.ndarray) -> list[np.ndarray]:
    """Per-channel standardisation with statistics from ``train`` only."""
    axes = (0, 2, 3) if train.ndim == 4 else (0,)
    mu = train.mean(axis=axes, keepdims=True)
    sd = train.std(axis=axes, keepdims=True)
    sd = np.where(sd > 0, sd, 1.0)
    return [(a - mu) / sd for a in (train, *others)]


def load_idx_dataset(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label pair; pixels scaled to [0, 1], no standardisation."""
    x, y = _raw_idx_dataset(images_path, labels_path)
    return Dataset(x, y)


def load_idx_split(train_images, train_labels, test_images, test_labels,
                   downsample_factor: int = 1, train_limit: int | None = None,
                   test_limit: int | None = None) -> DataSplit:
    """Train/test IDX pairs, standardised per channel with train statistics."""
    train = load_idx_dataset(train_images, train_labels)
    test = load_idx_dataset(test_images, test_labels)
    if train_limit is not None:
        train = train.subset(slice(0, train_limit))
    if test_limit is not None:
        test = test.subset(slice(0, test_limit))
    xtr = downsample(train.x, downsample_factor)
    xte = downsample(test.x, downsample_factor)
    xtr, xte = standardize(xtr, xte)
    m = int(max(train.y.max(), test.y.max())) + 1
    return DataSplit(Dataset(xtr, train.y), Dataset(xte, test.y), m)


# ---------------------------------------------------------------------------
# synthetic data


def make_blobs(num_classes: int, dim: int, samples_per_class: int, spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian clusters around fixed, well separated centres.

    Class ``c`` sits on coordinate axis ``c % dim`` at distance ``3 * (1 + c // dim)``,
    alternating sign between rings. Rows are shuffled with the seed.
    """
    if num_classes < 1 or dim < 1 or samples_per_class < 1 or spread < 0:
        raise ParameterError("make_blobs needs positive counts and non-negative spread")
    centers = np.zeros((num_classes, dim))
    for c in range(num_classes):
        centers[c, c % dim] = 3.0 * (1 + c // dim) * (1 if (c // dim) % 2 == 0 else -1)
    rng = rng_stream(seed, "blobs")
    noise = rng.normal(0.0, 1.0, (num_classes, samples_per_class, dim)) * spread
    x = (centers[:, None, :] + noise).reshape(-1, dim)
    y = np.repeat(np.arange(num_classes), samples_per_class)
    order = rng.permutation(len(y))
    return Dataset(x[order], y[order].astype(np.int64))


def blobs_split(num_classes, dim, samples_per_class, spread, seed, test_fraction: float = 0.2) -> DataSplit:
    data = make_blobs(num_classes, dim, samples_per_class, spread, seed)
    n_test = int(round(test_fraction * len(data)))
    return DataSplit(data.subset(slice(n_test, None)), data.subset(slice(0, n_test)), num_classes)


# ---------------------------------------------------------------------------
# augmentation


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 4, flip: bool = True) -> np.ndarray:
    """Random crop after zero padding, plus optional horizontal flip."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    out = np.empty_like(x)
    for i in range(n):
        img = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = img[:, :, ::-1] if flips[i] else img
    return out


# ---------------------------------------------------------------------------
# desk digit corpus


def write_desk_digits(out_dir, test_every: int = 5) -> dict[str, Path]:
    """Write the bundled 5,000-image MNIST subset from ``mlxtend`` as IDX files.

    Every ``test_every``-th image (by index) goes to the test split, the
    rest to train: 4,000 / 1,000 images, 400 / 100 per class.
    """
    try:
        from importlib.resources import files
        src = files("mlxtend.data") / "data" / "mnist_5k.csv.gz"
        raw = src.read_bytes()
    except (ModuleNotFoundError, FileNotFoundError) as exc:
        raise FileNotFoundError("the desk digit corpus needs the optional 'mlxtend' package") from exc
    table = np.loadtxt(gzip.decompress(raw).decode("ascii").splitlines(), delimiter=",")
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    idx = np.arange(len(labels))
    test = idx % test_every == 0
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "train_images": out / "train-images-idx3-ubyte",
        "train_labels": out / "train-labels-idx1-ubyte",
        "test_images": out / "test-images-idx3-ubyte",
        "test_labels": out / "test-labels-idx1-ubyte",
    }
    write_idx(paths["train_images"], images[~test])
    write_idx(paths["train_labels"], labels[~test])
    write_idx(paths["test_images"], images[test])
    write_idx(paths["test_labels"], labels[test])
    return paths
