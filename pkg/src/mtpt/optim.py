"""Optimizers used by pretraining and both adaptation loops.

Both update numpy parameter arrays in place; gradients are supplied
explicitly (the autodiff leaves are ephemeral, parameters persist as plain
arrays).
"""

from __future__ import annotations

import numpy as np


class SGD:
    """Plain gradient descent, kept around for tests and sanity baselines."""

    def __init__(self, params: list[np.ndarray], lr: float) -> None:
        self.params = list(params)
        self.lr = float(lr)

    def step(self, grads: list[np.ndarray | None]) -> None:
        _check_aligned(self.params, grads)
        for p, g in zip(self.params, grads):
            if g is None:
                continue
            p -= self.lr * g


class AdamW:
    """Adaptive-moment estimation with decoupled weight decay."""

    def __init__(
        self,
        params: list[np.ndarray],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> None:
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: list[np.ndarray | None]) -> None:
        _check_aligned(self.params, grads)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps))
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p


def make_optimizer(kind: str, params: list[np.ndarray], lr: float, weight_decay: float = 0.0):
    if kind == "adamw":
        return AdamW(params, lr, weight_decay=weight_decay)
    if kind == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer kind: {kind!r}")


def _check_aligned(params, grads) -> None:
    if len(params) != len(grads):
        raise ValueError(f"optimizer got {len(grads)} grads for {len(params)} params")
    for p, g in zip(params, grads):
        if g is not None and p.shape != g.shape:
            raise ValueError(f"grad shape {g.shape} does not match param shape {p.shape}")
