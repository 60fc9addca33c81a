"""
Tensors, broadcasting and sliding windows
=========================================

Tensors are plain numpy arrays. This walk-through shows seeded creation,
the per-channel broadcast used for biases, and the window view every
convolution and pooling layer is built on.
"""

import numpy as np

from statecnn import tensor

# seeded fills are reproducible byte for byte
a = tensor.create([2, 3], tensor.Uniform(-1, 1, seed=42))
b = tensor.create([2, 3], tensor.Uniform(-1, 1, seed=42))
print("same bytes:", a.tobytes() == b.tobytes())

# a rank-1 tensor broadcasts along the trailing (channel) axis
images = tensor.create([1, 2, 2, 3], 1.0)
bias = np.array([0.1, 0.2, 0.3], dtype=np.float32)
print(tensor.elementwise(images, bias, "add")[0, 0, 0])

# population variance over every axis except channels
x = np.random.default_rng(0).normal(size=(4, 5, 5, 3))
print("per-channel variance:", tensor.reduce(x, (0, 1, 2), "variance").round(3))

###############################################################################
# Windows
# -------
# ``pad_and_window`` returns a strided view of shape (N, Ho, Wo, C, kh, kw).
# With "same" padding the extra row or column, when needed, goes at the
# bottom or right.

img = np.arange(25, dtype=np.float64).reshape(1, 5, 5, 1)
view = tensor.pad_and_window(img, (3, 3), (2, 2), "same")
print("output size:", view.out_hw, "pads (top, bottom, left, right):", view.pads)
print(view.windows[0, 0, 0, 0])
