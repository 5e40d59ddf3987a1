"""Evaluation protocols: weighted kNN, linear probe, Recall@K, projections.

Everything here is read-only with respect to encoder parameters and the
memory bank. Ties are broken towards the smallest index or label id.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import encoder as enc
from .augment import AugmentPolicy, augment_batch
from .errors import ConfigError, ParameterError
from .losses import l_intra
from .memory_bank import EmbeddingBank
from .tensor import no_grad


@dataclass
class EvalIndex:
    features: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ConfigError(f"features {self.features.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return len(self.labels)


def _topk(sims: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k largest entries per row; equal values keep index order."""
    order = np.argsort(-sims, axis=1, kind="stable")
    return order[:, :k]


def _vote(nbr_sims: np.ndarray, nbr_labels: np.ndarray, num_classes: int, tau: float, weighted: bool) -> np.ndarray:
    w = np.exp(nbr_sims / tau) if weighted else np.ones_like(nbr_sims)
    scores = np.zeros((len(nbr_sims), num_classes))
    np.add.at(scores, (np.arange(len(nbr_sims))[:, None], nbr_labels), w)
    return scores.argmax(axis=1)


def knn_predict(queries: np.ndarray, index: EvalIndex, k: int, tau: float = 0.1, weighted: bool = True, chunk: int = 1024) -> np.ndarray:
    if len(index) == 0:
        raise ConfigError("kNN index is empty")
    if not 1 <= k <= len(index):
        raise ParameterError(f"k must lie in [1, {len(index)}], got {k}")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    num_classes = int(index.labels.max()) + 1
    preds = []
    for s in range(0, len(queries), chunk):
        sims = queries[s : s + chunk] @ index.features.T
        nbr = _topk(sims, k)
        nbr_sims = np.take_along_axis(sims, nbr, axis=1)
        preds.append(_vote(nbr_sims, index.labels[nbr], num_classes, tau, weighted))
    return np.concatenate(preds)


def knn_classify(query: np.ndarray, index: EvalIndex, k: int, tau: float = 0.1, weighted: bool = True) -> int:
    """Label with the largest exp(sim/tau)-weighted vote among the k nearest rows."""
    return int(knn_predict(np.asarray(query)[None, :], index, k, tau, weighted)[0])


def knn_accuracy(test: EvalIndex, train: EvalIndex, k: int, tau: float = 0.1, weighted: bool = True) -> float:
    preds = knn_predict(test.features, train, k, tau, weighted)
    return float(np.mean(preds == test.labels))


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    lr: float = 0.1
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 0.0
    standardize: bool = True
    seed: int = 0


def linear_probe(train_feats, train_labels, test_feats, test_labels, config: ProbeConfig = ProbeConfig()) -> float:
    """Softmax-regression probe on frozen features; returns test top-1 accuracy.

    Weights start at zero, so an untrained probe predicts class 0 for every
    input.
    """
    xtr = np.asarray(train_feats, dtype=np.float64)
    xte = np.asarray(test_feats, dtype=np.float64)
    ytr = np.asarray(train_labels, dtype=np.int64)
    yte = np.asarray(test_labels, dtype=np.int64)
    if config.standardize:
        mu, sd = xtr.mean(axis=0), xtr.std(axis=0) + 1e-8
        xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    c = int(max(ytr.max(), yte.max())) + 1
    w = np.zeros((xtr.shape[1], c))
    b = np.zeros(c)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    rng = np.random.default_rng(config.seed)
    onehot = np.eye(c)[ytr]
    for _ in range(config.epochs):
        perm = rng.permutation(len(xtr))
        for s in range(0, len(xtr), config.batch_size):
            idx = perm[s : s + config.batch_size]
            x = xtr[idx]
            z = x @ w + b
            z -= z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot[idx]) / len(idx)
            gw = x.T @ g + config.weight_decay * w
            gb = g.sum(axis=0)
            vw = config.momentum * vw + gw
            vb = config.momentum * vb + gb
            w -= config.lr * vw
            b -= config.lr * vb
    preds = (xte @ w + b).argmax(axis=1)
    return float(np.mean(preds == yte))


def retrieval_ranking(features: np.ndarray, k: int) -> np.ndarray:
    """Top-k neighbour ids for every row, excluding the row itself."""
    sims = features @ features.T
    np.fill_diagonal(sims, -np.inf)
    return _topk(sims, k)


def recall_at_k(index: EvalIndex, ks: Sequence[int]) -> dict[int, float]:
    """Fraction of queries with a same-label item among their top-k neighbours."""
    m = len(index)
    ks = [int(k) for k in ks]
    if not ks:
        raise ParameterError("need at least one k")
    if any(k < 1 or k >= m for k in ks):
        raise ParameterError(f"every k must lie in [1, {m - 1}] for {m} items, got {ks}")
    ranked = retrieval_ranking(index.features, max(ks))
    hits = index.labels[ranked] == index.labels[:, None]
    first = np.cumsum(hits, axis=1) > 0
    return {k: float(first[:, k - 1].mean()) for k in ks}


def project_2d(features: np.ndarray) -> np.ndarray:
    """Coordinates on the top two principal axes of the centred features.

    Each axis is signed so its largest-magnitude loading is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ParameterError("projection needs at least two feature rows")
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    axes = vt[:2]
    if axes.shape[0] < 2:
        axes = np.vstack([axes, np.zeros((2 - axes.shape[0], x.shape[1]))])
    for a in axes:
        j = np.argmax(np.abs(a))
        if a[j] < 0:
            a *= -1
    return xc @ axes.T


def intra_alignment_diagnostic(
    params: enc.EncoderParams,
    bank: EmbeddingBank,
    samples: np.ndarray,
    policy: AugmentPolicy,
    intra_tau: float,
    seed: int = 0,
    batch: int = 256,
) -> float:
    """Mean KL divergence between two augmented views' bank distributions."""
    rng = np.random.default_rng(seed)
    mem = bank.as_tensor()
    total, count = 0.0, 0
    with no_grad():
        for s in range(0, len(samples), batch):
            xs = samples[s : s + batch]
            x1, x2 = augment_batch(xs, policy, rng)
            val = l_intra(enc.forward(params, x1), enc.forward(params, x2), mem, intra_tau).item()
            total += val * len(xs)
            count += len(xs)
    return total / count


def make_knn_evaluator(train_samples, train_labels, test_samples, test_labels, k: int, tau: float = 0.1) -> Callable[[enc.EncoderParams], float]:
    """Closure computing test kNN accuracy against encoder features of the train split."""

    def evaluate(params: enc.EncoderParams) -> float:
        tr = EvalIndex(enc.embed(params, train_samples), train_labels)
        te = EvalIndex(enc.embed(params, test_samples), test_labels, split="test")
        return knn_accuracy(te, tr, min(k, len(tr)), tau)

    return evaluate


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def report_json(protocol: str, ks: Optional[Sequence[int]], accuracies: dict, config: dict, checkpoint_hash: str) -> str:
    doc = {
        "protocol": protocol,
        "k": list(ks) if ks is not None else None,
        "accuracy": {str(k): v for k, v in accuracies.items()},
        "config": config,
        "checkpoint_sha256": checkpoint_hash,
    }
    return json.dumps(doc, indent=2, sort_keys=True)
