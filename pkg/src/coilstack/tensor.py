"""Minimal reverse-mode differentiation over dense numpy arrays.

Operations record themselves on the active :class:`GradTape` whenever one of
their inputs requires a gradient. ``tape.backward(loss)`` replays the recorded
adjoints in reverse execution order and accumulates ``.grad`` on every tensor
that asked for one.

Only what the coil networks need is here: matmul, bias add, 3x3 convolution,
2x2 pooling, relu, softmax, batch normalization, dropout, reshape and two
cross-entropy losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DimensionError

PROB_FLOOR = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_active_tapes: list["GradTape"] = []


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    output: Tensor
    inputs: tuple
    vjp: object  # callable: output grad -> tuple of input grads (or None)


@dataclass
class GradTape:
    """Ordered log of executed operations.

    Use as a context manager; operations executed inside the block whose
    inputs need gradients are appended to ``records``.
    """

    records: list = field(default_factory=list)

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def backward(self, loss: Tensor, seed=None):
        if seed is None:
            if loss.size != 1:
                raise DimensionError(f"backward needs a scalar loss or an explicit seed, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        grads = {id(loss): np.asarray(seed, dtype=np.float64)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
        # every popped id was an op output; what remains belongs to leaves
        leaves = {id(t): t for rec in self.records for t in rec.inputs}
        leaves[id(loss)] = loss
        for key, g in grads.items():
            t = leaves.get(key)
            if t is not None and t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
        self.records.clear()


def _record(out_data, inputs, vjp):
    out = Tensor(out_data)
    if _active_tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active_tapes[-1].records.append(_Record(out, tuple(inputs), vjp))
    return out


# --------------------------------------------------------------------- dense


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return _record(A @ B, (a, b), vjp)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def bias_add(x, b):
    """Add a bias along the last axis (dense features or channels-last maps)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or x.data.ndim < 2 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias shape {b.shape} does not fit input {x.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    return _record(A * B, (a, b), lambda g: (g * B, g * A))


def sum_all(x):
    x = as_tensor(x)
    shape = x.shape
    return _record(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x):
    """Collapse everything after the batch axis."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------- activations


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x):
    """Softmax over the last axis, max-shifted."""
    x = as_tensor(x)
    y = _softmax(x.data)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), vjp)


# ------------------------------------------------------------------- conv/pool
# The numerical core works channels-last (B, H, W, C); conv2d and pool2d wrap
# it for the (C, H, W) / (B, C, H, W) layout.


def transpose(x, axes):
    x = as_tensor(x)
    inv = tuple(np.argsort(axes))
    return _record(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def _im2col(xp, ho, wo):
    """(B, Hp, Wp, C) -> (B*ho*wo, 9*C), columns ordered (ki, kj, c)."""
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, 3, 3, c))
    for i in range(3):
        for j in range(3):
            cols[:, :, :, i, j, :] = xp[:, i:i + ho, j:j + wo, :]
    return cols.reshape(n * ho * wo, 9 * c)


def _pad_hw(x, p):
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x


def conv2d_nhwc(x, kernels, padding="same"):
    """3x3 stride-1 cross-correlation of a (B, H, W, C_in) batch with (C_out, C_in, 3, 3) kernels."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.data.ndim != 4:
        raise DimensionError(f"expected a (B, H, W, C) batch, got {x.shape}")
    if kernels.data.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise DimensionError(f"kernels must be (C_out, C_in, 3, 3), got {kernels.shape}")
    n, h, w, c = x.shape
    c_out = kernels.shape[0]
    if kernels.shape[1] != c:
        raise DimensionError(f"kernel input channels {kernels.shape[1]} != input channels {c} (input {x.shape})")
    if padding == "same":
        pad = 1
    elif padding == "valid":
        if h < 3 or w < 3:
            raise DimensionError(f"input {x.shape} is smaller than the 3x3 kernel under valid padding")
        pad = 0
    else:
        raise ContractViolation(f"unknown padding {padding!r}")
    ho, wo = h + 2 * pad - 2, w + 2 * pad - 2
    K = kernels.data
    cols = _im2col(_pad_hw(x.data, pad), ho, wo)
    wmat = K.transpose(2, 3, 1, 0).reshape(9 * c, c_out)
    out = (cols @ wmat).reshape(n, ho, wo, c_out)

    def vjp(g):
        g2 = g.reshape(-1, c_out)
        dk = (cols.T @ g2).reshape(3, 3, c, c_out).transpose(3, 2, 0, 1)
        if not x.requires_grad:
            return None, np.ascontiguousarray(dk)
        # input gradient: correlate the padded output gradient with flipped kernels
        flipped = K[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(9 * c_out, c)
        gcols = _im2col(_pad_hw(g, 2 - pad), h, w)
        dx = (gcols @ flipped).reshape(n, h, w, c)
        return dx, np.ascontiguousarray(dk)

    return _record(out, (x, kernels), vjp)


def pool2d_nhwc(x, kind="max"):
    """Non-overlapping 2x2 pooling of a (B, H, W, C) batch; odd trailing rows/columns are dropped."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"expected a (B, H, W, C) batch, got {x.shape}")
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise DimensionError(f"input {x.shape} too small for 2x2 pooling")
    X = x.data
    # window members in row-major order, so argmax ties go to the first
    blocks = np.stack(
        [X[:, 0:2 * ho:2, 0:2 * wo:2], X[:, 0:2 * ho:2, 1:2 * wo:2], X[:, 1:2 * ho:2, 0:2 * wo:2], X[:, 1:2 * ho:2, 1:2 * wo:2]],
        axis=-1,
    )
    if kind == "max":
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        route = (arg[..., None] == np.arange(4)).astype(np.float64)
    elif kind == "average":
        out = blocks.mean(axis=-1)
        route = None
    else:
        raise ContractViolation(f"unknown pooling kind {kind!r}")

    def vjp(g):
        gb = np.repeat(g[..., None], 4, axis=-1) * 0.25 if route is None else route * g[..., None]
        dx = np.zeros((n, h, w, c))
        dx[:, 0:2 * ho:2, 0:2 * wo:2] = gb[..., 0]
        dx[:, 0:2 * ho:2, 1:2 * wo:2] = gb[..., 1]
        dx[:, 1:2 * ho:2, 0:2 * wo:2] = gb[..., 2]
        dx[:, 1:2 * ho:2, 1:2 * wo:2] = gb[..., 3]
        return (dx,)

    return _record(out, (x,), vjp)


def _to_nhwc(x):
    x = as_tensor(x)
    if x.data.ndim == 3:
        return transpose(reshape(x, (1,) + x.shape), (0, 2, 3, 1)), True
    if x.data.ndim != 4:
        raise DimensionError(f"expected (C, H, W) or (B, C, H, W), got shape {x.shape}")
    return transpose(x, (0, 2, 3, 1)), False


def _from_nhwc(y, unbatch):
    y = transpose(y, (0, 3, 1, 2))
    return reshape(y, y.shape[1:]) if unbatch else y


def conv2d(x, kernels, padding="same"):
    """3x3 cross-correlation, stride 1.

    ``x`` is (C_in, H, W) or batched (B, C_in, H, W); ``kernels`` is
    (C_out, C_in, 3, 3). ``same`` zero-pads by one pixel, ``valid`` does not.
    """
    h, unbatch = _to_nhwc(x)
    return _from_nhwc(conv2d_nhwc(h, kernels, padding), unbatch)


def pool2d(x, kind="max", window=(2, 2)):
    """2x2 pooling with stride 2 on (C, H, W) or (B, C, H, W) input."""
    if tuple(window) != (2, 2):
        raise ContractViolation(f"only (2, 2) pooling windows are supported, got {window}")
    h, unbatch = _to_nhwc(x)
    return _from_nhwc(pool2d_nhwc(h, kind), unbatch)

# --------------------------------------------------------- normalization/noise


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, features):
        return cls(np.zeros(features), np.ones(features))


def batchnorm(x, gamma, beta, state: BatchNormState, mode="train"):
    """Batch normalization over axis 0 of a (batch, features) input.

    Train mode uses population batch statistics and updates ``state`` in
    place; infer mode uses the running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 2:
        raise DimensionError(f"batchnorm expects (batch, features), got {x.shape}")
    if mode == "train":
        n = x.shape[0]
        if n < 2:
            raise ContractViolation("batchnorm in train mode needs a batch of at least 2")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        m = state.momentum
        state.running_mean = m * state.running_mean + (1 - m) * mu
        state.running_var = m * state.running_var + (1 - m) * var
    elif mode == "infer":
        mu, var = state.running_mean, state.running_var
    else:
        raise ContractViolation(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mu) * inv_std
    G = gamma.data

    def vjp(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * G
        if mode == "infer":
            return dxhat * inv_std, dgamma, dbeta
        k = x.shape[0]
        dx = inv_std / k * (k * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, dgamma, dbeta

    return _record(xhat * G + beta.data, (x, gamma, beta), vjp)


def dropout(x, rate, mode="train", rng=None):
    """Inverted dropout; identity in infer mode or at rate 0."""
    x = as_tensor(x)
    if not 0 <= rate < 1:
        raise ContractViolation(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "infer" or rate == 0:
        return x
    if rng is None:
        raise ContractViolation("dropout in train mode needs a seeded generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------- losses


def _check_labels(labels, n):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ContractViolation(f"labels must be 0 or 1, got {sorted(set(labels.tolist()) - {0, 1})}")
    return labels.astype(np.intp)


def cross_entropy(probs, labels):
    """Mean negative log-probability of the true class, floored at 1e-12."""
    probs = as_tensor(probs)
    if probs.data.ndim != 2 or probs.shape[1] != 2:
        raise DimensionError(f"cross_entropy expects (batch, 2) probabilities, got {probs.shape}")
    n = probs.shape[0]
    labels = _check_labels(labels, n)
    rows = np.arange(n)
    p = probs.data[rows, labels]
    clamped = np.maximum(p, PROB_FLOOR)
    loss = -np.log(clamped).mean()

    def vjp(g):
        d = np.zeros(probs.shape)
        d[rows, labels] = np.where(p >= PROB_FLOOR, -1.0 / (n * clamped), 0.0)
        return (g * d,)

    return _record(np.array(loss), (probs,), vjp)


def softmax_cross_entropy(logits, labels, class_weights=None):
    """Fused softmax + cross-entropy on logits; gradient (p - onehot) / batch."""
    logits = as_tensor(logits)
    n = logits.shape[0]
    labels = _check_labels(labels, n)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    w = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=float)[labels]
    loss = -(w * logp[rows, labels]).sum() / n

    def vjp(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (g * d * (w / n)[:, None],)

    return _record(np.array(loss), (logits,), vjp)


# ---------------------------------------------------------------------- init


def glorot_uniform(shape, rng):
    """Uniform(+-sqrt(6 / (fan_in + fan_out))) for dense (in, out) or conv (out, in, kh, kw)."""
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        receptive = math.prod(shape[2:])
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
