"""The displacement convolution as a generalized convolution.

With zero flow it is an ordinary 'same' convolution. With a constant
integer flow it is the ordinary convolution of a shifted image. Its
gradients (input, weights, bias and flow) agree with central differences.
"""

import numpy as np

from frameinterp.gradcheck import run_suite
from frameinterp.layers import conv2d_forward, dcl_forward

rng = np.random.default_rng(0)
x = rng.random((2, 3, 12, 12))
w = rng.normal(size=(4, 3, 3, 3))
b = rng.normal(size=4)

zero = np.zeros((2, 2, 12, 12))
print("zero flow vs conv:", np.max(np.abs(dcl_forward(x, w, b, zero) - conv2d_forward(x, w, b, 1, 1))))

shift = np.zeros((2, 2, 12, 12))
shift[:, 0] = 2.0  # sample two pixels to the right
moved = np.roll(x, -2, axis=3)
diff = dcl_forward(x, w, b, shift) - conv2d_forward(moved, w, b, 1, 1)
print("shifted flow vs shifted conv (interior):", np.max(np.abs(diff[..., 2:-4])))

for name, err in run_suite(seed=1).items():
    print(f"{name:28s} {err:.2e}")
