"""The CoST operation on a toy clip: three views, one kernel, fused coefficients.

Run with ``python3 demos/01_three_views.py``.
"""
import numpy as np

from costconv import cost as C
from costconv import tensor as T
from costconv.baseline import cost_support_mask, cost_to_masked_c3d_kernel, receptive_field_count

rng = np.random.default_rng(0)

# a clip of 6 frames, 8x8 pixels, 2 channels (channels-last: n, t, h, w, c)
x = rng.random((1, 6, 8, 8, 2))
kernel = rng.standard_normal((3, 2, 3, 3))          # c_out, c_in, k, k

# the same 3x3 kernel slides over H-W, T-W and T-H planes
x_hw, x_tw, x_th = C.conv_three_views(x, kernel)
print("view outputs:", x_hw.shape, x_tw.shape, x_th.shape)

# per output channel, a row of three coefficients summing to one
alpha = np.array([[0.6, 0.2, 0.2], [0.1, 0.45, 0.45], [1 / 3, 1 / 3, 1 / 3]])
y = C.fuse_views(x_hw, x_tw, x_th, alpha)

# the fused output is an ordinary 3D convolution with a masked 3x3x3 kernel
K = cost_to_masked_c3d_kernel(kernel, alpha)
print("masked-C3D max abs diff:", np.abs(T.conv3d(x, K) - y).max())
print("support mask (t-slices of the 3x3x3 cube):")
print(cost_support_mask(3).astype(int))

for k in (3, 5, 7):
    print(f"k={k}: receptive field CoST {receptive_field_count('cost', k)}, "
          f"C3D {receptive_field_count('c3d333', k)}")

# CoST(b) predicts coefficients per sample; at init they are uniform
layer = C.CostConv(2, 3, variant="b", rng=rng)
layer.forward(x)
print("CoST(b) alpha at init:", layer.last_alpha[0, 0])
