"""Stochastic two-view augmentation and pixel-space interpolation.

Samples are either images ``(C, H, W)`` or flat vectors ``(L,)``. Image
transforms follow the usual crop / flip / colour-jitter / grayscale menu.
Vector samples get positional analogues that keep coordinates aligned:
a crop keeps a random cyclic window and fills the rest with the sample
mean, flipping reverses the vector, jitter rescales contrast and
brightness, and grayscale is a no-op.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DimensionError, ParameterError

_GRAY = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentPolicy:
    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    jitter_strength: float = 0.4
    grayscale_prob: float = 0.2
    noise_std: float = 0.0
    crop: bool = True
    flip: bool = True
    jitter: bool = True
    grayscale: bool = True
    noise: bool = True

    def __post_init__(self):
        object.__setattr__(self, "crop_scale", tuple(float(s) for s in self.crop_scale))
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        for name in ("flip_prob", "grayscale_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {p}")
        if self.jitter_strength < 0 or self.noise_std < 0:
            raise ConfigError("jitter_strength and noise_std must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(crop=False, flip=False, jitter=False, grayscale=False, noise=False)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class InterpolationSpec:
    mode: str = "mixup"
    ratio_policy: str = "uniform"
    r: float = 0.5
    lo: float = 0.3
    hi: float = 0.7

    def __post_init__(self):
        if self.mode not in ("mixup", "cutmix"):
            raise ConfigError(f"unknown interpolation mode {self.mode!r}")
        if self.ratio_policy not in ("fixed", "uniform"):
            raise ConfigError(f"unknown ratio policy {self.ratio_policy!r}")
        if not 0.0 <= self.r <= 1.0:
            raise ConfigError(f"ratio r must lie in [0, 1], got {self.r}")
        if not 0.0 <= self.lo <= self.hi <= 1.0:
            raise ConfigError(f"ratio range must satisfy 0 <= lo <= hi <= 1, got ({self.lo}, {self.hi})")

    def sample_ratios(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.ratio_policy == "fixed":
            return np.full(n, float(self.r))
        return rng.uniform(self.lo, self.hi, size=n)

    def to_dict(self) -> dict:
        return asdict(self)


def _is_image(x: np.ndarray) -> bool:
    return x.ndim == 3


def _resized_crop(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    c, h, w = x.shape
    area = h * w
    for _ in range(10):
        target = rng.uniform(*policy.crop_scale) * area
        aspect = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3)))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            break
    else:
        ch, cw = h, w
    top = rng.integers(0, h - ch + 1)
    left = rng.integers(0, w - cw + 1)
    # bilinear resample of the crop back to h x w
    ys = top + (np.arange(h) + 0.5) * ch / h - 0.5
    xs = left + (np.arange(w) + 0.5) * cw / w - 0.5
    ys = np.clip(ys, top, top + ch - 1)
    xs = np.clip(xs, left, left + cw - 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([ndimage.map_coordinates(x[k], [yy, xx], order=1, mode="nearest") for k in range(c)])


def _window_crop(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    keep = max(1, int(round(rng.uniform(*policy.crop_scale) * n)))
    window = (rng.integers(0, n) + np.arange(keep)) % n
    out = np.full_like(x, x.mean())
    out[window] = x[window]
    return out


def _jitter_image(x: np.ndarray, s: float, rng: np.random.Generator) -> np.ndarray:
    b = rng.uniform(max(0.0, 1 - s), 1 + s)
    c = rng.uniform(max(0.0, 1 - s), 1 + s)
    sat = rng.uniform(max(0.0, 1 - s), 1 + s)
    x = np.clip(x * b, 0.0, 1.0)
    x = np.clip((x - x.mean()) * c + x.mean(), 0.0, 1.0)
    if x.shape[0] == 3:
        gray = np.tensordot(_GRAY, x, axes=1)
        x = np.clip((x - gray) * sat + gray, 0.0, 1.0)
    return x


def _jitter_vector(x: np.ndarray, s: float, rng: np.random.Generator) -> np.ndarray:
    b = rng.uniform(max(0.0, 1 - s), 1 + s)
    c = rng.uniform(max(0.0, 1 - s), 1 + s)
    m = x.mean()
    return np.clip((x - m) * c + m * b, 0.0, 1.0)


def augment_one(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    img = _is_image(x)
    out = x.copy()
    if policy.crop:
        out = _resized_crop(out, policy, rng) if img else _window_crop(out, policy, rng)
    if policy.flip and rng.random() < policy.flip_prob:
        out = out[..., ::-1].copy()
    if policy.jitter and policy.jitter_strength > 0:
        out = _jitter_image(out, policy.jitter_strength, rng) if img else _jitter_vector(out, policy.jitter_strength, rng)
    if policy.grayscale and img and out.shape[0] == 3 and rng.random() < policy.grayscale_prob:
        out = np.broadcast_to(np.tensordot(_GRAY, out, axes=1), out.shape).copy()
    if policy.noise and policy.noise_std > 0:
        out = np.clip(out + rng.normal(0.0, policy.noise_std, size=out.shape), 0.0, 1.0)
    return out


def two_views(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    return augment_one(x, policy, rng), augment_one(x, policy, rng)


def augment_batch(xs: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two views for every sample; the rng is consumed sample by sample."""
    v1 = np.empty(xs.shape)
    v2 = np.empty(xs.shape)
    for k in range(len(xs)):
        v1[k], v2[k] = two_views(xs[k], policy, rng)
    return v1, v2


def _check_pair(x_i: np.ndarray, x_j: np.ndarray, r: float) -> None:
    if np.shape(x_i) != np.shape(x_j):
        raise DimensionError(f"interpolation needs equal shapes, got {np.shape(x_i)} and {np.shape(x_j)}")
    if not 0.0 <= r <= 1.0:
        raise ParameterError(f"interpolation ratio must lie in [0, 1], got {r}")


def mixup(x_i: np.ndarray, x_j: np.ndarray, r: float) -> np.ndarray:
    """Element-wise ``r * x_i + (1 - r) * x_j``."""
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    _check_pair(x_i, x_j, r)
    if r == 1.0:
        return x_i.copy()
    if r == 0.0:
        return x_j.copy()
    return r * x_i + (1.0 - r) * x_j


def cutmix(x_i: np.ndarray, x_j: np.ndarray, r: float, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Paste a block of ``x_j`` covering about ``1 - r`` of ``x_i``.

    The block has the aspect ratio of the sample and is placed uniformly
    among the positions where it fits. Returns the mixed sample and the
    realised ratio ``1 - pasted / total`` (which differs from ``r`` by
    rounding of the block size).
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    _check_pair(x_i, x_j, r)
    out = x_i.copy()
    if x_i.ndim == 3:
        _, h, w = x_i.shape
        frac = np.sqrt(1.0 - r)
        ch, cw = int(round(h * frac)), int(round(w * frac))
        top = rng.integers(0, h - ch + 1)
        left = rng.integers(0, w - cw + 1)
        out[:, top : top + ch, left : left + cw] = x_j[:, top : top + ch, left : left + cw]
        return out, 1.0 - (ch * cw) / (h * w)
    if x_i.ndim == 1:
        n = x_i.shape[0]
        length = int(round(n * (1.0 - r)))
        start = rng.integers(0, n - length + 1)
        out[start : start + length] = x_j[start : start + length]
        return out, 1.0 - length / n
    raise ConfigError(f"cutmix supports images (C, H, W) or vectors (L,), got shape {x_i.shape}")


def interpolate_batch(
    xs: np.ndarray, partners: np.ndarray, ratios: np.ndarray, spec: InterpolationSpec, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Mix each ``xs[k]`` with ``xs[partners[k]]``; returns samples and realised ratios."""
    out = np.empty(xs.shape)
    eff = np.empty(len(xs))
    for k, (j, r) in enumerate(zip(partners, ratios)):
        if spec.mode == "mixup":
            out[k], eff[k] = mixup(xs[k], xs[j], r), r
        else:
            out[k], eff[k] = cutmix(xs[k], xs[j], r, rng)
    return out, eff
