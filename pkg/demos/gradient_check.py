"""
Checking the autodiff engine
============================

Every layer backpropagates by hand-written rules. Central finite
differences are the independent witness.
"""

import numpy as np

from pktseg.architectures import PocketUNet, PocketUNetConfig
from pktseg.nn import functional as F
from pktseg.nn.gradcheck import gradient_report

rng = np.random.default_rng(0)
x = rng.standard_normal((1, 2, 4, 4, 4))
w = rng.standard_normal((3, 2, 3, 3, 3))
b = rng.standard_normal(3)
weights = rng.standard_normal((1, 3, 4, 4, 4))

rep = gradient_report(lambda x, w, b: F.reduce_sum(F.conv3d(x, w, b, 1, 1), weights), [x, w, b])
print(f"conv3d, float64: worst relative error {rep.worst:.2e} over {rep.checked} coordinates")

# float32 gradients against float64 differences
x32, w32, b32 = (a.astype(np.float32) for a in (x, w, b))
rep = gradient_report(lambda x, w, b: F.reduce_sum(F.conv3d(x, w, b, 1, 1), weights),
                      [x32, w32, b32], reference_dtype=np.float64)
print(f"conv3d, float32: worst relative error {rep.worst:.2e}")

# %%
# A whole Pocket U-Net. ReLU and max pooling have kinks; coordinates
# that straddle one are detected and reported rather than counted.

net = PocketUNet(PocketUNetConfig(in_channels=1, channels=2, depth=1), ["T1C"], seed=1).astype(np.float64)
inp = rng.standard_normal((1, 1, 8, 8, 8))
wout = rng.standard_normal((1, 2, 8, 8, 8))
params = [t for name, t in net.named_parameters() if not name.endswith("conv.bias")]
rep = gradient_report(lambda x, *_: F.reduce_sum(net.forward([x]), wout), [inp, *params],
                      max_coords=4, kink_tol=1e-3)
print(f"pocket u-net: worst {rep.worst:.2e}, {rep.checked} checked, {rep.nonsmooth} on a kink")
