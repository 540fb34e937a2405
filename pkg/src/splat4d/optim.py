"""Adaptive moment estimation with bias correction, for growable parameters."""

from __future__ import annotations

import numpy as np


class Adam:
    """One optimizer state per parameter family; `step` returns the delta.

    Rows can be appended (new primitives start with zero moments) or remapped
    after prune/densify passes via an index map with -1 marking fresh rows.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        grad = np.asarray(grad, dtype=float)
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def ensure_rows(self, n: int):
        """Grow the leading axis to n rows, zero-initializing new state."""
        if self.m is None or n <= self.m.shape[0]:
            return
        pad = (n - self.m.shape[0],) + self.m.shape[1:]
        self.m = np.concatenate([self.m, np.zeros(pad)])
        self.v = np.concatenate([self.v, np.zeros(pad)])

    def remap_rows(self, index_map: np.ndarray):
        """Reorder state rows; index_map[i] = old row or -1 for a fresh row."""
        if self.m is None:
            return
        new_m = np.zeros((len(index_map),) + self.m.shape[1:])
        new_v = np.zeros_like(new_m)
        keep = index_map >= 0
        new_m[keep] = self.m[index_map[keep]]
        new_v[keep] = self.v[index_map[keep]]
        self.m, self.v = new_m, new_v

    def reset(self):
        self.m = None
        self.v = None
        self.t = 0


class AdamGroup:
    """Dict of named Adam states sharing one step loop."""

    def __init__(self, lrs: dict):
        self.opts = {name: Adam(lr) for name, lr in lrs.items()}

    def __getitem__(self, name: str) -> Adam:
        return self.opts[name]

    def step(self, name: str, grad: np.ndarray) -> np.ndarray:
        return self.opts[name].step(grad)
