"""Per-instance feature store with momentum updates."""

from __future__ import annotations

import threading
from typing import Sequence

import numpy as np

from .errors import DegenerateNormError, NumericError, ParameterError
from .tensor import NORM_EPS, Tensor


class EmbeddingBank:
    """N x D matrix of unit-norm instance features.

    ``update`` blends a fresh feature into a stored row as
    ``normalize((1 - m) * v_new + m * v_old)``; ``m`` is the weight kept on
    the stored feature.
    """

    def __init__(self, bank: np.ndarray, momentum: float = 0.5):
        bank = np.array(bank, dtype=np.float64)
        if bank.ndim != 2 or bank.shape[0] == 0 or bank.shape[1] == 0:
            raise ParameterError(f"bank must be a non-empty N x D matrix, got {bank.shape}")
        if not 0.0 <= momentum <= 1.0:
            raise ParameterError(f"bank momentum must lie in [0, 1], got {momentum}")
        self.bank = bank
        self.momentum = float(momentum)
        self._lock = threading.Lock()

    @property
    def n(self) -> int:
        return self.bank.shape[0]

    @property
    def dim(self) -> int:
        return self.bank.shape[1]

    def _check(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.intp).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n):
            raise IndexError(f"bank index out of range [0, {self.n})")
        return idx

    def lookup(self, indices: Sequence[int]) -> Tensor:
        idx = self._check(indices)
        with self._lock:
            return Tensor(self.bank[idx].copy())

    def as_tensor(self) -> Tensor:
        """The whole bank as a gradient-free constant."""
        with self._lock:
            return Tensor(self.bank.copy())

    def update(self, index: int, v_new) -> None:
        self.update_many([index], np.asarray(v_new, dtype=np.float64).reshape(1, -1))

    def update_many(self, indices: Sequence[int], v_new: np.ndarray) -> None:
        idx = self._check(indices)
        v_new = np.asarray(v_new.data if isinstance(v_new, Tensor) else v_new, dtype=np.float64)
        if v_new.shape != (idx.size, self.dim):
            raise ParameterError(f"update rows of shape {v_new.shape} do not match {idx.size} x {self.dim}")
        if not np.all(np.isfinite(v_new)):
            raise NumericError("non-finite feature passed to bank update")
        if len(np.unique(idx)) != idx.size:
            raise ParameterError("duplicate indices in one bank update")
        m = self.momentum
        with self._lock:
            blended = (1.0 - m) * v_new + m * self.bank[idx]
            norm = np.sqrt((blended * blended).sum(axis=1, keepdims=True))
            if np.any(norm <= NORM_EPS):
                raise DegenerateNormError("bank update blended to a near-zero vector")
            self.bank[idx] = blended / norm

    def copy(self) -> "EmbeddingBank":
        return EmbeddingBank(self.bank.copy(), self.momentum)


def init_bank(n: int, d: int, seed: int, momentum: float = 0.5) -> EmbeddingBank:
    """Independent uniformly random unit directions, one per instance."""
    if n <= 0 or d <= 0:
        raise ParameterError(f"bank size must be positive, got n={n}, d={d}")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, d))
    return EmbeddingBank(g / np.linalg.norm(g, axis=1, keepdims=True), momentum)
