#!/usr/bin/env python
# A dilated 3x3 kernel is the same as a dense kernel with zeros between
# the taps.  Then check the hand-written backward passes against finite
# differences.
import numpy as np

from advseg import tensor as T
from advseg.gradcheck import check_named, numeric_grad, rel_error

rng = np.random.default_rng(0)
x = rng.normal(size=(1, 2, 40, 40))
w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)

for d in (1, 2, 4, 8, 16):
    inflated = np.zeros((3, 2, 1 + 2 * d, 1 + 2 * d))
    inflated[:, :, ::d, ::d] = w
    a = T.conv2d_forward(x, T.ConvParams(w, b, d))
    ref = T.conv2d_forward(x, T.ConvParams(inflated, b, 1))
    print(f"dilation {d:2d}: output {a.shape[2:]}, max diff {np.abs(a - ref).max():.1e}")

# backward of a single conv against central differences
p = T.ConvParams(w, b, 2)
g = rng.normal(size=T.conv2d_forward(x, p).shape)
gx, gw, gb = T.conv2d_backward(x, p, g)
num = numeric_grad(lambda: float((T.conv2d_forward(x, p) * g).sum()), w)
print("conv weight gradient, relative error", rel_error(gw, num))

# and for whole (narrow) networks through the tape
for name in ("fcn", "dilated", "discriminator"):
    worst = max(r.error for r in check_named(name, seed=0))
    print(f"{name}: worst relative error {worst:.1e}")
