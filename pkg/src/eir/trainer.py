"""SGD training loop, learning-rate schedule and checkpoint files."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from . import encoder as enc
from . import tensor as T
from .augment import AugmentPolicy, InterpolationSpec, augment_batch, interpolate_batch
from .errors import ConfigError, DataError, FormatError, NumericError, VersionError
from .losses import LossReport, combine, interpolation_targets, l_inter, l_intra, l_iraug
from .memory_bank import EmbeddingBank, init_bank
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EIRC"
CHECKPOINT_VERSION = 1
METRIC_FIELDS = ("epoch", "l_iraug", "l_intra", "l_inter", "total", "lr")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    rounds: int = 1
    batch_size: int = 128
    lr: float = 0.03
    lr_milestones: tuple[int, ...] = (120, 160)
    lr_factors: tuple[float, ...] = (0.1, 0.01)
    sgd_momentum: float = 0.9
    weight_decay: float = 0.0005
    tau: float = 0.1
    intra_tau: Optional[float] = None
    bank_momentum: float = 0.5
    lambda1: float = 15.0
    lambda2: float = 2.0
    avg_views: bool = False
    inter_literal: bool = False
    stop_grad_target: bool = False
    architecture: str = "mlp"
    hidden_widths: tuple[int, ...] = (256,)
    embed_dim: int = 128
    seed: int = 0
    knn_k: int = 200
    standardize_inputs: bool = True
    eval_every: int = 0
    interpolation: InterpolationSpec = field(default_factory=InterpolationSpec)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        for name in ("lr_milestones", "hidden_widths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        object.__setattr__(self, "lr_factors", tuple(float(v) for v in self.lr_factors))
        if isinstance(self.interpolation, dict):
            object.__setattr__(self, "interpolation", InterpolationSpec(**self.interpolation))
        if isinstance(self.augment, dict):
            object.__setattr__(self, "augment", AugmentPolicy(**self.augment))
        if self.epochs <= 0 or self.rounds <= 0:
            raise ConfigError("epochs and rounds must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if len(self.lr_milestones) != len(self.lr_factors):
            raise ConfigError("lr_milestones and lr_factors must have equal length")
        if list(self.lr_milestones) != sorted(self.lr_milestones):
            raise ConfigError("lr_milestones must be increasing")
        if not self.tau > 0 or (self.intra_tau is not None and not self.intra_tau > 0):
            raise ConfigError("temperatures must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be non-negative")
        if not 0.0 <= self.bank_momentum <= 1.0:
            raise ConfigError("bank_momentum must lie in [0, 1]")
        if self.embed_dim <= 0:
            raise ConfigError("embed_dim must be positive")

    @property
    def total_epochs(self) -> int:
        return self.epochs * self.rounds

    @property
    def effective_intra_tau(self) -> float:
        return self.tau if self.intra_tau is None else self.intra_tau

    def encoder_spec(self, input_shape: tuple[int, ...]) -> enc.EncoderSpec:
        return enc.EncoderSpec(
            architecture=self.architecture,
            layer_widths=tuple(self.hidden_widths) + (self.embed_dim,),
            embed_dim=self.embed_dim,
            input_shape=tuple(input_shape),
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        d["augment"]["crop_scale"] = list(d["augment"]["crop_scale"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        _check_keys(cls, d, "")
        for sub, sub_cls in (("interpolation", InterpolationSpec), ("augment", AugmentPolicy)):
            if sub in d:
                if not isinstance(d[sub], dict):
                    raise ConfigError(f"config key {sub!r} must be an object")
                _check_keys(sub_cls, d[sub], sub + ".")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def with_overrides(self, overrides: Iterable[str]) -> "TrainConfig":
        """Apply ``key=value`` strings; dotted keys reach nested sections."""
        d = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            parts = key.strip().split(".")
            node = d
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = _parse_value(raw)
        return TrainConfig.from_dict(d)


def _check_keys(cls, d: dict, prefix: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    for k in d:
        if k not in known:
            raise ConfigError(f"unknown config key {prefix + k!r}")


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Learning rate for the 1-based ``epoch``; the schedule restarts every round."""
    within = (epoch - 1) % config.epochs + 1
    factor = 1.0
    for milestone, f in zip(config.lr_milestones, config.lr_factors):
        if within >= milestone:
            factor = f
    return config.lr * factor


def sgd_update(params: dict, grads: dict, velocity: dict, lr: float, momentum: float, weight_decay: float) -> None:
    """In-place momentum SGD: ``vel = mu*vel + g + wd*p``, ``p -= lr*vel``."""
    for name, p in params.items():
        data = p.data if isinstance(p, Tensor) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        vel = velocity.get(name)
        if vel is None:
            vel = np.zeros_like(data)
        vel = momentum * vel + g + weight_decay * data
        velocity[name] = vel
        data -= lr * vel


@dataclass
class Checkpoint:
    """Complete resumable training state."""

    config: TrainConfig
    params: enc.EncoderParams
    bank: EmbeddingBank
    velocity: dict[str, np.ndarray]
    epoch: int
    rngs: dict[str, np.random.Generator]
    version: int = CHECKPOINT_VERSION

    @property
    def spec(self) -> enc.EncoderSpec:
        return self.params.spec

    def quantize(self) -> None:
        """Round every float array to float32 precision, as stored on disk."""
        for t in self.params.tensors.values():
            t.data = t.data.astype(np.float32).astype(np.float64)
        for k in self.velocity:
            self.velocity[k] = self.velocity[k].astype(np.float32).astype(np.float64)
        self.bank.bank = self.bank.bank.astype(np.float32).astype(np.float64)
        self.params.input_mean = self.params.input_mean.astype(np.float32).astype(np.float64)
        self.params.input_std = self.params.input_std.astype(np.float32).astype(np.float64)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<H", self.version))
        state = {
            "epoch": self.epoch,
            "bank_momentum": self.bank.momentum,
            "rngs": {k: g.bit_generator.state for k, g in sorted(self.rngs.items())},
        }
        _write_text(buf, "encoder_spec", self.spec.to_json())
        _write_text(buf, "config", self.config.to_json())
        _write_text(buf, "state", json.dumps(state, sort_keys=True))
        for name, t in self.params:
            _write_array(buf, f"param/{name}", t.data)
        _write_array(buf, "input/mean", self.params.input_mean)
        _write_array(buf, "input/std", self.params.input_std)
        for name in self.params.tensors:
            if name in self.velocity:
                _write_array(buf, f"velocity/{name}", self.velocity[name])
        _write_array(buf, "bank", self.bank.bank)
        return buf.getvalue()

    def save(self, path) -> str:
        """Atomically write the checkpoint; returns its sha256."""
        blob = self.to_bytes()
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        try:
            tmp.write_bytes(blob)
            os.replace(tmp, path)
        except OSError as exc:
            raise DataError(f"cannot write checkpoint {path}: {exc}") from exc
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> "Checkpoint":
        if raw[:4] != CHECKPOINT_MAGIC:
            raise FormatError(f"{source}: not a checkpoint (bad magic at byte offset 0)")
        (version,) = struct.unpack_from("<H", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"{source}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        sections = _read_sections(raw, 6, source)
        try:
            spec = enc.EncoderSpec.from_dict(json.loads(sections["encoder_spec"]))
            config = TrainConfig.from_dict(json.loads(sections["config"]))
            state = json.loads(sections["state"])
            bank_arr = sections["bank"]
        except KeyError as exc:
            raise FormatError(f"{source}: missing section {exc}") from None
        expected = enc.init(spec, 0)
        tensors = {}
        velocity = {}
        for name, t in expected:
            arr = sections.get(f"param/{name}")
            if arr is None or arr.shape != t.shape:
                got = None if arr is None else arr.shape
                raise VersionError(f"{source}: parameter {name} has shape {got}, encoder spec needs {t.shape}")
            tensors[name] = Tensor(arr, requires_grad=True, name=name)
            if f"velocity/{name}" in sections:
                velocity[name] = sections[f"velocity/{name}"]
        if bank_arr.ndim != 2 or bank_arr.shape[1] != spec.embed_dim:
            raise VersionError(f"{source}: bank shape {bank_arr.shape} does not match embed_dim {spec.embed_dim}")
        rngs = {}
        for k, st in state["rngs"].items():
            g = np.random.Generator(np.random.PCG64())
            g.bit_generator.state = st
            rngs[k] = g
        params = enc.EncoderParams(spec, tensors)
        if "input/mean" in sections:
            params.set_input_stats(sections["input/mean"], sections["input/std"])
        return cls(
            config=config,
            params=params,
            bank=EmbeddingBank(bank_arr, state["bank_momentum"]),
            velocity=velocity,
            epoch=int(state["epoch"]),
            rngs=rngs,
            version=version,
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(raw, str(path))


def _write_section(buf, name: str, kind: int, payload: bytes) -> None:
    nb = name.encode()
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<BQ", kind, len(payload)))
    buf.write(payload)


def _write_text(buf, name: str, text: str) -> None:
    _write_section(buf, name, 0, text.encode())


def _write_array(buf, name: str, arr: np.ndarray) -> None:
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    _write_section(buf, name, 1, head + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_sections(raw: bytes, off: int, source: str) -> dict:
    out = {}
    n = len(raw)
    while off < n:
        start = off
        try:
            (ln,) = struct.unpack_from("<H", raw, off)
            name = raw[off + 2 : off + 2 + ln].decode()
            off += 2 + ln
            kind, size = struct.unpack_from("<BQ", raw, off)
            off += 9
        except (struct.error, UnicodeDecodeError):
            raise FormatError(f"{source}: corrupt section header at byte offset {start}") from None
        if off + size > n:
            raise FormatError(f"{source}: section {name!r} truncated at byte offset {start}")
        payload = raw[off : off + size]
        off += size
        if kind == 0:
            out[name] = payload.decode()
        elif kind == 1:
            (rank,) = struct.unpack_from("<I", payload, 0)
            dims = struct.unpack_from(f"<{rank}Q", payload, 4)
            data = np.frombuffer(payload, dtype="<f4", offset=4 + 8 * rank)
            out[name] = data.astype(np.float64).reshape(dims)
        else:
            raise FormatError(f"{source}: unknown section kind {kind} at byte offset {start}")
    return out


def input_stats(samples: np.ndarray, per_channel: bool) -> tuple[np.ndarray, np.ndarray]:
    axes = (0, 2, 3) if per_channel else None
    mean = np.atleast_1d(samples.mean(axis=axes))
    std = np.atleast_1d(samples.std(axis=axes))
    return mean, np.where(std > 0, std, 1.0)


def new_state(config: TrainConfig, samples: np.ndarray) -> Checkpoint:
    """Fresh parameters, bank and rng streams derived from ``config.seed``."""
    n, sample_shape = len(samples), samples.shape[1:]
    seeds = np.random.SeedSequence(config.seed).spawn(5)
    params = enc.init(config.encoder_spec(sample_shape), int(seeds[0].generate_state(1)[0]))
    if config.standardize_inputs:
        params.set_input_stats(*input_stats(samples, config.architecture == "small_cnn"))
    bank = init_bank(n, config.embed_dim, int(seeds[1].generate_state(1)[0]), config.bank_momentum)
    rngs = {name: np.random.Generator(np.random.PCG64(s)) for name, s in zip(("shuffle", "augment", "interp"), seeds[2:])}
    state = Checkpoint(config, params, bank, {}, 0, rngs)
    state.quantize()
    return state


def sample_partners(b: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random partner ``j != k`` for every batch position ``k``."""
    return (np.arange(b) + rng.integers(1, b, size=b)) % b


def train_step(state: Checkpoint, xs: np.ndarray, indices: np.ndarray, lr: float) -> LossReport:
    """One optimisation step on a batch of (sample, instance index) pairs.

    Loss terms whose weight is zero are still evaluated for reporting but
    kept off the tape, so a zero weight reproduces the plain
    instance-recognition objective exactly.
    """
    cfg = state.config
    idx = np.asarray(indices, dtype=np.intp)
    if len(np.unique(idx)) != len(idx):
        raise DataError("duplicate instance indices in one batch")
    if len(idx) < 2:
        raise DataError("a batch needs at least two samples")
    params = state.params
    params.zero_grad()

    x1, x2 = augment_batch(xs, cfg.augment, state.rngs["augment"])
    v = enc.forward(params, x1)
    vh = enc.forward(params, x2)
    mem = state.bank.as_tensor()

    loss_ir = l_iraug(v, vh, idx, mem, cfg.tau, cfg.avg_views)
    total = loss_ir

    if cfg.lambda1 > 0:
        loss_intra = l_intra(v, vh, mem, cfg.effective_intra_tau)
        total = total + T.scale(loss_intra, cfg.lambda1)
    else:
        with no_grad():
            loss_intra = l_intra(v.detach(), vh.detach(), mem, cfg.effective_intra_tau)

    irng = state.rngs["interp"]
    partners = sample_partners(len(idx), irng)
    ratios = cfg.interpolation.sample_ratios(len(idx), irng)
    mixed, r_eff = interpolate_batch(x1, partners, ratios, cfg.interpolation, irng)
    if cfg.lambda2 > 0:
        v_mix = enc.forward(params, mixed)
        target = interpolation_targets(v, partners, r_eff, cfg.stop_grad_target)
        loss_inter = l_inter(v_mix, target, cfg.tau, cfg.inter_literal)
        total = total + T.scale(loss_inter, cfg.lambda2)
    else:
        with no_grad():
            v_mix = enc.forward(params, mixed)
            loss_inter = l_inter(v_mix, interpolation_targets(v.detach(), partners, r_eff), cfg.tau, cfg.inter_literal)

    report = combine(loss_ir.item(), loss_intra.item(), loss_inter.item(), cfg.lambda1, cfg.lambda2)
    total.backward()
    grads = {k: t.grad for k, t in params}
    sgd_update(params.tensors, grads, state.velocity, lr, cfg.sgd_momentum, cfg.weight_decay)
    state.bank.update_many(idx, v.data)
    return report


@dataclass
class EpochMetrics:
    epoch: int
    l_iraug: float
    l_intra: float
    l_inter: float
    total: float
    lr: float
    knn_acc: Optional[float] = None

    def row(self) -> dict:
        d = dataclasses.asdict(self)
        if d["knn_acc"] is None:
            del d["knn_acc"]
        return d


def _reject_labels(data) -> np.ndarray:
    if hasattr(data, "labels"):
        raise TypeError("the trainer accepts unlabeled data only; pass dataset.unlabeled()")
    samples = getattr(data, "samples", data)
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) == 0:
        raise DataError("cannot train on an empty dataset")
    return samples


def train(
    data,
    config: TrainConfig,
    *,
    resume: Optional[Checkpoint] = None,
    evaluator: Optional[Callable[[enc.EncoderParams], float]] = None,
    stop_after: Optional[int] = None,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
) -> tuple[Checkpoint, list[EpochMetrics]]:
    """Run the epoch loop; returns the final state and per-epoch metrics.

    ``data`` is an :class:`~eir.data.UnlabeledView` or a bare sample array.
    ``evaluator`` maps encoder parameters to a kNN accuracy and is called
    every ``config.eval_every`` epochs and after the final epoch.
    ``stop_after`` halts once that many epochs are complete (for resume).
    """
    samples = _reject_labels(data)
    n = len(samples)
    if resume is not None:
        state = resume
        if state.bank.n != n:
            raise DataError(f"checkpoint bank holds {state.bank.n} instances, dataset has {n}")
        config = state.config
    else:
        state = new_state(config, samples)
    metrics: list[EpochMetrics] = []
    bs = config.batch_size
    while state.epoch < config.total_epochs:
        epoch = state.epoch + 1
        lr = lr_at(config, epoch)
        perm = state.rngs["shuffle"].permutation(n)
        reports = []
        for s in range(0, n, bs):
            idx = perm[s : s + bs]
            if len(idx) < 2:
                continue
            reports.append(train_step(state, samples[idx], idx, lr))
        state.quantize()
        state.epoch = epoch
        means = {k: float(np.mean([getattr(r, k) for r in reports])) for k in ("l_iraug", "l_intra", "l_inter", "total")}
        for k, val in means.items():
            if not math.isfinite(val):
                raise NumericError(f"epoch {epoch}: {k} is not finite")
        m = EpochMetrics(epoch=epoch, lr=lr, **means)
        if evaluator is not None and (
            (config.eval_every and epoch % config.eval_every == 0) or epoch == config.total_epochs
        ):
            m.knn_acc = float(evaluator(state.params))
        metrics.append(m)
        log.info("epoch %d total %.4f lr %g%s", epoch, m.total, lr, "" if m.knn_acc is None else f" knn {m.knn_acc:.4f}")
        if on_epoch is not None:
            on_epoch(m)
        if stop_after is not None and epoch >= stop_after:
            break
    return state, metrics


def write_metrics_csv(path, metrics: list[EpochMetrics]) -> None:
    with_knn = any(m.knn_acc is not None for m in metrics)
    fields = METRIC_FIELDS + (("knn_acc",) if with_knn else ())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for m in metrics:
            d = m.row()
            w.writerow([_fmt(d.get(f, "")) for f in fields])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
