"""
Checking a convolution against finite differences
=================================================

Every layer's backward pass can be checked numerically: perturb each input
by +-h, difference a scalar loss, and compare with the analytic gradient.
Double precision keeps the comparison meaningful.
"""

import numpy as np

from statecnn.layers import Conv2D

rng = np.random.default_rng(0)
conv = Conv2D(2, 3, (3, 3), (2, 2), "same", rng=rng, dtype=np.float64)
x = rng.normal(size=(2, 5, 5, 2))

# a random weighting turns the output into a scalar loss
out = conv.forward(x, training=True)
w = rng.normal(size=out.shape)
dx = conv.backward(w)


def loss():
    return float((conv.forward(x) * w).sum())


h = 1e-6
numeric = np.zeros_like(x)
for idx in np.ndindex(x.shape):
    old = x[idx]
    x[idx] = old + h
    up = loss()
    x[idx] = old - h
    down = loss()
    x[idx] = old
    numeric[idx] = (up - down) / (2 * h)

err = np.linalg.norm(dx - numeric) / max(np.linalg.norm(dx), np.linalg.norm(numeric))
print(f"relative error of dL/dx: {err:.2e}")
