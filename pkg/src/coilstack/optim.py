"""Gradient-descent update rules."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


class Optimizer:
    def step(self, params, grads=None):
        """Update ``params`` in place.

        ``grads`` defaults to each parameter's ``.grad``; parameters without a
        gradient are skipped.
        """
        if grads is None:
            grads = [p.grad for p in params]
        if len(grads) != len(params):
            raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.data.shape:
                raise DimensionError(f"parameter {i} has shape {p.data.shape} but gradient {g.shape}")
            p.data = self._update(i, p.data, g)

    def _update(self, i, value, grad):
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, lr=0.01):
        self.lr = lr

    def _update(self, i, value, grad):
        return value - self.lr * grad


class Adam(Optimizer):
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = {}

    def _update(self, i, value, grad):
        m = self.m.get(i, np.zeros_like(value))
        v = self.v.get(i, np.zeros_like(value))
        t = self.t.get(i, 0) + 1
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad * grad
        self.m[i], self.v[i], self.t[i] = m, v, t
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        return value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name, lr, **kwargs):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr, **kwargs)
    raise ValueError(f"unknown optimizer {name!r}")


def optimizer_step(params, grads, optimizer):
    """Functional form: apply one update of ``optimizer``."""
    optimizer.step(params, grads)
    return params
