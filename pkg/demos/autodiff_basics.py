"""
Reverse-mode gradients on a tape
================================

Every op records a closure that maps the output gradient back onto its
inputs. GradTape.backward replays them in reverse.
"""

import numpy as np

from coilstack import tensor as T

rng = np.random.default_rng(0)

# a two-layer classifier on four inputs
x = T.Tensor(rng.normal(size=(8, 4)))
w1 = T.Tensor(rng.normal(size=(4, 5)) * 0.5, requires_grad=True)
w2 = T.Tensor(rng.normal(size=(5, 2)) * 0.5, requires_grad=True)
labels = rng.integers(0, 2, size=8)

with T.GradTape() as tape:
    hidden = T.relu(T.matmul(x, w1))
    loss = T.softmax_cross_entropy(T.matmul(hidden, w2), labels)
print("loss", float(loss.data))
print("ops on the tape:", len(tape.records))
tape.backward(loss)

# compare one weight's gradient with a central difference
i, j, h = 2, 3, 1e-5


def loss_at(value):
    w = w1.data.copy()
    w[i, j] = value
    hid = np.maximum(x.data @ w, 0)
    return float(T.softmax_cross_entropy(T.Tensor(hid @ w2.data), labels).data)


numeric = (loss_at(w1.data[i, j] + h) - loss_at(w1.data[i, j] - h)) / (2 * h)
print(f"tape grad {w1.grad[i, j]:.8f}  finite difference {numeric:.8f}")

# convolutions take (batch, channels, height, width)
img = T.Tensor(rng.normal(size=(1, 1, 20, 20)))
kernels = T.Tensor(rng.normal(size=(6, 1, 3, 3)), requires_grad=True)
with T.GradTape() as tape:
    maps = T.pool2d(T.relu(T.conv2d(img, kernels, "same")), "average")
    total = T.sum_all(maps)
tape.backward(total)
print("feature maps", maps.shape, "kernel grad", kernels.grad.shape)
