"""Dataset containers, file formats and the synthetic generator.

Labels live on :class:`Dataset` for evaluation only. Training code receives
an :class:`UnlabeledView`, which exposes samples and their indices and has
no attribute through which labels could leak.
"""

from __future__ import annotations

import glob
import hashlib
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, CorruptionError, DataError, FormatError, ParameterError

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
EIRD_MAGIC = b"EIRD"

PathLike = Union[str, os.PathLike]


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    split: str = "train"
    stats: Optional[NormStats] = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim < 2:
            raise DataError("samples must have a leading instance axis")
        if len(self.labels) != len(self.samples):
            raise DataError(f"{len(self.samples)} samples but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def unlabeled(self) -> "UnlabeledView":
        return UnlabeledView(self.samples, self.name)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.samples, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class UnlabeledView:
    """Samples addressed by instance index; the only thing a trainer sees."""

    samples: np.ndarray
    name: str = "dataset"

    def __len__(self) -> int:
        return len(self.samples)

    def batch(self, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices, dtype=np.intp)
        return self.samples[idx], idx

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.samples, dtype="<f8").tobytes()).hexdigest()


# CIFAR-10 binary layout


def _cifar_files(path: Path, split: str) -> list[Path]:
    if path.is_file():
        return [path]
    if path.is_dir():
        pattern = "data_batch_*.bin" if split == "train" else "test_batch.bin"
        files = sorted(Path(p) for p in glob.glob(str(path / pattern)))
        if not files:
            files = sorted(Path(p) for p in glob.glob(str(path / "*" / pattern)))
        if files:
            return files
        raise DataError(f"no CIFAR-10 {split} batch files under {path}")
    raise DataError(f"dataset path does not exist: {path}")


def parse_cifar10_bytes(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        complete = len(raw) // CIFAR_RECORD
        raise FormatError(
            f"{source}: truncated record at byte offset {complete * CIFAR_RECORD} "
            f"(file size {len(raw)} is not a multiple of {CIFAR_RECORD})"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        k = int(bad[0])
        raise CorruptionError(f"{source}: label byte {labels[k]} > 9 in record {k} at byte offset {k * CIFAR_RECORD}")
    samples = rec[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float64) / 255.0
    return samples, labels


def parse_cifar10(path: PathLike, split: str = "train") -> Dataset:
    """Read a CIFAR-10 binary batch file, or every batch of a split in a directory."""
    files = _cifar_files(Path(path), split)
    xs, ys = [], []
    for f in files:
        try:
            raw = f.read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read {f}: {exc}") from exc
        x, y = parse_cifar10_bytes(raw, str(f))
        xs.append(x)
        ys.append(y)
    return Dataset(np.concatenate(xs), np.concatenate(ys), name="cifar10", split=split)


def write_cifar10(path: PathLike, samples: np.ndarray, labels: np.ndarray) -> None:
    """Write samples in [0, 1] as CIFAR-10 records (fixtures and tests)."""
    px = np.clip(np.round(np.asarray(samples).reshape(len(samples), -1) * 255), 0, 255).astype(np.uint8)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], px], axis=1)
    Path(path).write_bytes(rec.tobytes())


# generic raw-array format


def write_eird(path: PathLike, dataset: Dataset) -> None:
    shape = dataset.sample_shape
    head = EIRD_MAGIC + struct.pack("<II", len(dataset), len(shape)) + struct.pack(f"<{len(shape)}Q", *shape)
    body = np.ascontiguousarray(dataset.samples, dtype="<f4").tobytes()
    tail = np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(head + body + tail)
    os.replace(tmp, path)


def read_eird(path: PathLike, name: Optional[str] = None, split: str = "train") -> Dataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"dataset path does not exist: {path}") from None
    if raw[:4] != EIRD_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at byte offset 0")
    if len(raw) < 12:
        raise FormatError(f"{path}: header truncated at byte offset {len(raw)}")
    count, rank = struct.unpack_from("<II", raw, 4)
    off = 12
    if len(raw) < off + 8 * rank:
        raise FormatError(f"{path}: shape header truncated at byte offset {len(raw)}")
    dims = struct.unpack_from(f"<{rank}Q", raw, off)
    off += 8 * rank
    n_vals = count * int(np.prod(dims, dtype=np.int64))
    need = off + 4 * n_vals + 4 * count
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(raw)} (payload starts at byte offset {off})")
    samples = np.frombuffer(raw, dtype="<f4", count=n_vals, offset=off).astype(np.float64).reshape(count, *dims)
    labels = np.frombuffer(raw, dtype="<u4", count=count, offset=off + 4 * n_vals).astype(np.int64)
    return Dataset(samples, labels, name=name or path.stem, split=split)


def load_dataset(path: PathLike, split: str = "train") -> Dataset:
    """Dispatch on file type: ``.eird`` files, CIFAR-10 ``.bin`` files or directories."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"dataset path does not exist: {p}")
    if p.is_file() and p.suffix != ".bin":
        return read_eird(p, split=split)
    return parse_cifar10(p, split=split)


# synthetic clustered data


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 8
    samples_per_class: int = 64
    test_per_class: Optional[int] = None
    dim: int = 64
    image_side: Optional[int] = None
    separation: float = 1.0
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("synthetic data needs at least two classes")
        if not self.separation > 0:
            raise ConfigError("separation must be positive")
        if self.samples_per_class <= 0 or self.noise_std < 0:
            raise ConfigError("samples_per_class must be positive and noise_std non-negative")

    @property
    def sample_shape(self) -> tuple[int, ...]:
        if self.image_side:
            return (1, self.image_side, self.image_side)
        return (self.dim,)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Gaussian clusters around random centres, offset into [0, 1] and clipped.

    Centres are random unit directions scaled by ``separation``; every
    sample is ``0.5 + centre + N(0, noise_std^2)``, clipped to [0, 1].
    """
    rng = np.random.default_rng(spec.seed)
    shape = spec.sample_shape
    d = int(np.prod(shape))
    centers = rng.standard_normal((spec.num_classes, d))
    centers *= spec.separation / np.linalg.norm(centers, axis=1, keepdims=True)

    def draw(per_class: int, split: str) -> Dataset:
        labels = np.repeat(np.arange(spec.num_classes), per_class)
        noise = rng.normal(0.0, spec.noise_std, size=(len(labels), d)) if spec.noise_std > 0 else np.zeros((len(labels), d))
        x = np.clip(0.5 + centers[labels] + noise, 0.0, 1.0)
        return Dataset(x.reshape(len(labels), *shape), labels, name="synthetic", split=split)

    train = draw(spec.samples_per_class, "train")
    test = draw(spec.test_per_class or spec.samples_per_class, "test")
    return train, test


# normalisation


def _channel_axes(samples: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Reduction axes and broadcast shape; images normalise per channel, vectors as one channel."""
    if samples.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    return tuple(range(samples.ndim)), (1,) * samples.ndim


def fit_stats(dataset: Dataset) -> NormStats:
    axes, _ = _channel_axes(dataset.samples)
    return NormStats(np.atleast_1d(dataset.samples.mean(axis=axes)), np.atleast_1d(dataset.samples.std(axis=axes)))


def _check_stats(stats: NormStats) -> None:
    if not (np.all(np.isfinite(stats.mean)) and np.all(np.isfinite(stats.std))):
        raise ParameterError("normalisation stats must be finite")
    if np.any(stats.std <= 0):
        raise ParameterError("normalisation std must be positive")


def normalize(dataset: Dataset, stats: NormStats) -> Dataset:
    _check_stats(stats)
    _, view = _channel_axes(dataset.samples)
    x = (dataset.samples - stats.mean.reshape(view)) / stats.std.reshape(view)
    return replace(dataset, samples=x, stats=stats)


def denormalize(dataset: Dataset, stats: NormStats) -> Dataset:
    _check_stats(stats)
    _, view = _channel_axes(dataset.samples)
    return replace(dataset, samples=dataset.samples * stats.std.reshape(view) + stats.mean.reshape(view), stats=None)
