"""Instance-recognition, multi-view alignment and interpolation losses.

All losses take unit-norm feature rows and reduce by batch mean. Memory
bank features enter as constants; gradients flow only into the features
produced by the encoder.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError, ParameterError
from .memory_bank import EmbeddingBank
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    lambda1: float = 15.0
    lambda2: float = 2.0
    intra_tau: Optional[float] = None
    avg_views: bool = False
    inter_literal: bool = False
    stop_grad_target: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.intra_tau is not None and not self.intra_tau > 0:
            raise ConfigError(f"intra_tau must be positive, got {self.intra_tau}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")

    @property
    def effective_intra_tau(self) -> float:
        return self.tau if self.intra_tau is None else self.intra_tau


@dataclass(frozen=True)
class LossReport:
    l_iraug: float
    l_intra: float
    l_inter: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def _bank_matrix(bank) -> Tensor:
    if isinstance(bank, EmbeddingBank):
        return bank.as_tensor()
    return bank if isinstance(bank, Tensor) else Tensor(bank)


def _rows(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return T.reshape(x, (1, -1)) if x.ndim == 1 else x


def instance_probability(v, bank, i: int, tau: float) -> float:
    """Softmax probability that feature ``v`` is recognised as bank instance ``i``."""
    mem = _bank_matrix(bank)
    if not 0 <= i < mem.shape[0]:
        raise IndexError(f"instance {i} out of range [0, {mem.shape[0]})")
    probs = T.softmax(_rows(v) @ mem.T, tau)
    return float(probs.data[0, i])


def l_iraug(v_batch, vhat_batch, indices, bank, tau: float, avg_views: bool = False) -> Tensor:
    """Mean of ``-log(P(i|v) + P(i|v_hat))`` with each ``P`` a softmax over the bank.

    The sum of two probabilities can exceed one, so the loss may be negative.
    ``avg_views`` halves the sum to keep it a probability.
    """
    mem = _bank_matrix(bank)
    v, vh = _rows(v_batch), _rows(vhat_batch)
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if idx.shape[0] != v.shape[0] or v.shape != vh.shape:
        raise DimensionError(f"views {v.shape}, {vh.shape} and {idx.shape[0]} indices disagree")
    if idx.size and (idx.min() < 0 or idx.max() >= mem.shape[0]):
        raise IndexError(f"instance index out of range [0, {mem.shape[0]})")
    memT = mem.T
    p = T.pick(T.softmax(v @ memT, tau), idx)
    ph = T.pick(T.softmax(vh @ memT, tau), idx)
    both = p + ph
    if avg_views:
        both = T.scale(both, 0.5)
    return T.scale(T.mean(T.log(both)), -1.0)


def intra_distributions(v, vhat, bank, intra_tau: float) -> tuple[Tensor, Tensor]:
    """Similarity distributions of two views over the bank rows."""
    memT = _bank_matrix(bank).T
    p = T.softmax(_rows(v) @ memT, intra_tau)
    q = T.softmax(_rows(vhat) @ memT, intra_tau)
    if np.ndim(v.data if isinstance(v, Tensor) else v) == 1:
        p, q = T.reshape(p, (-1,)), T.reshape(q, (-1,))
    return p, q


def l_intra(v_batch, vhat_batch, bank, intra_tau: float) -> Tensor:
    """Batch mean of ``KL(P || Q)`` between the views' bank distributions.

    Both arguments receive gradients; the divergence is evaluated in log
    space so sharp temperatures do not underflow.
    """
    memT = _bank_matrix(bank).T
    v, vh = _rows(v_batch), _rows(vhat_batch)
    if v.shape != vh.shape:
        raise DimensionError(f"view shapes differ: {v.shape} vs {vh.shape}")
    log_p = T.log_softmax(v @ memT, intra_tau)
    log_q = T.log_softmax(vh @ memT, intra_tau)
    kl_rows = T.sum(T.exp(log_p) * (log_p - log_q), axis=1)
    return T.mean(kl_rows)


def interpolation_targets(v_batch, partners, ratios, stop_grad: bool = False) -> Tensor:
    """Rows ``normalize(r_k * v[k] + (1 - r_k) * v[partners[k]])``."""
    v = _rows(v_batch)
    ratios = np.asarray(ratios, dtype=np.float64)
    own = T.row_scale(v, ratios)
    other = T.row_scale(T.index_rows(v, partners), 1.0 - ratios)
    target = T.l2_normalize(own + other, axis=1)
    return target.detach() if stop_grad else target


def l_inter(interp_feats, target_feats, tau: float, literal: bool = False) -> Tensor:
    """Contrastive agreement between interpolated-sample features and targets.

    Row ``k`` is scored against every interpolated feature in the batch:
    ``s[k, j] = interp[j] . target[k] / tau``, and the loss is the mean
    cross-entropy of picking ``j = k``. With ``literal`` the per-row
    probabilities are summed inside a single log instead.
    """
    v, t = _rows(interp_feats), _rows(target_feats)
    if v.shape != t.shape:
        raise DimensionError(f"interpolated {v.shape} and target {t.shape} shapes differ")
    b = v.shape[0]
    if b < 2:
        raise ParameterError("interpolation loss needs at least two samples for negatives")
    logits = t @ v.T
    diag = np.arange(b)
    if literal:
        return T.scale(T.log(T.sum(T.pick(T.softmax(logits, tau), diag))), -1.0)
    return T.scale(T.mean(T.pick(T.log_softmax(logits, tau), diag)), -1.0)


def combine(l_ir: float, l_in: float, l_it: float, lambda1: float, lambda2: float) -> LossReport:
    parts = (float(l_ir), float(l_in), float(l_it))
    if not all(math.isfinite(p) for p in parts):
        raise NumericError(f"non-finite loss component in {parts}")
    return LossReport(*parts, total=parts[0] + lambda1 * parts[1] + lambda2 * parts[2])
