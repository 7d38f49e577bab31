"""Parameter containers and the small layer vocabulary used by the networks."""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import functional as F
from .tensor import DiffTensor


class LayerParams:
    """Named trainable tensors plus non-trainable buffers and momentum slots.

    Every trainable parameter owns a same-shape ``velocity`` array used by
    :func:`pktseg.nn.optim.sgd_momentum_step`.
    """

    def __init__(self):
        self.params: OrderedDict[str, DiffTensor] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self.velocity: dict[str, np.ndarray] = {}

    def add_param(self, name, values):
        t = DiffTensor(np.asarray(values), requires_grad=True, name=name)
        self.params[name] = t
        self.velocity[name] = np.zeros_like(t.values)
        return t

    def add_buffer(self, name, values):
        self.buffers[name] = np.array(values)
        return self.buffers[name]

    def __getitem__(self, name):
        if name in self.params:
            return self.params[name]
        return self.buffers[name]

    def num_trainable(self):
        return sum(int(t.values.size) for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def astype(self, dtype):
        for name, t in self.params.items():
            t.values = t.values.astype(dtype)
            t.zero_grad()
            self.velocity[name] = self.velocity[name].astype(dtype)
        for name, b in self.buffers.items():
            self.buffers[name] = b.astype(dtype)


class Module:
    """Tree of layers. Children are registered in construction order, which
    fixes parameter naming (``enc0.conv1.weight``) and checkpoint layout."""

    def __init__(self):
        self._children: OrderedDict[str, Module] = OrderedDict()
        self.training = True

    def add(self, name, module):
        self._children[name] = module
        setattr(self, name, module)
        return module

    def children(self):
        return self._children.items()

    def named_layers(self, prefix=""):
        """Yield (qualified_name, LayerParams) for every leaf layer."""
        own = getattr(self, "lp", None)
        if own is not None:
            yield prefix.rstrip("."), own
        for name, child in self._children.items():
            yield from child.named_layers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, child in self._children.items():
            yield from child.modules()

    def named_parameters(self):
        for lname, lp in self.named_layers():
            for pname, t in lp.params.items():
                yield f"{lname}.{pname}", t

    def named_buffers(self):
        for lname, lp in self.named_layers():
            for bname, b in lp.buffers.items():
                yield f"{lname}.{bname}", b

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for _, lp in self.named_layers():
            lp.zero_grad()

    def astype(self, dtype):
        for _, lp in self.named_layers():
            lp.astype(dtype)
        return self


def kaiming_normal(rng, shape, fan_in, dtype=np.float32):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Conv3d(Module):
    def __init__(self, c_in, c_out, kernel=3, padding=None, stride=1, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        self.lp = LayerParams()
        self.lp.add_param("weight", kaiming_normal(rng, (c_out, c_in, kernel, kernel, kernel),
                                                   c_in * kernel ** 3))
        self.lp.add_param("bias", np.zeros(c_out, dtype=np.float32))

    def __call__(self, x):
        return F.conv3d(x, self.lp["weight"], self.lp["bias"], self.stride, self.padding)


class ConvTranspose3d(Module):
    def __init__(self, c_in, c_out, kernel=2, stride=2, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        fan_in = max(1, c_in * kernel ** 3 // stride ** 3)
        self.lp = LayerParams()
        self.lp.add_param("weight", kaiming_normal(rng, (c_in, c_out, kernel, kernel, kernel), fan_in))
        self.lp.add_param("bias", np.zeros(c_out, dtype=np.float32))

    def __call__(self, x):
        return F.conv_transpose3d(x, self.lp["weight"], self.lp["bias"], self.stride)


class BatchNorm3d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.lp = LayerParams()
        self.lp.add_param("gamma", np.ones(channels, dtype=np.float32))
        self.lp.add_param("beta", np.zeros(channels, dtype=np.float32))
        self.lp.add_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.lp.add_buffer("running_var", np.ones(channels, dtype=np.float32))

    def __call__(self, x):
        lp = self.lp
        return F.batchnorm3d(x, lp["gamma"], lp["beta"], lp.buffers["running_mean"],
                             lp.buffers["running_var"], self.training, self.momentum, self.eps)


class ConvBNReLU(Module):
    def __init__(self, c_in, c_out, kernel=3, rng=None):
        super().__init__()
        self.add("conv", Conv3d(c_in, c_out, kernel, rng=rng))
        self.add("bn", BatchNorm3d(c_out))

    def __call__(self, x):
        return F.relu(self.bn(self.conv(x)))


class DoubleConv(Module):
    """Two conv+BN+ReLU units; the first maps c_in -> c_out."""

    def __init__(self, c_in, c_out, kernel=3, rng=None):
        super().__init__()
        self.add("block1", ConvBNReLU(c_in, c_out, kernel, rng))
        self.add("block2", ConvBNReLU(c_out, c_out, kernel, rng))

    def __call__(self, x):
        return self.block2(self.block1(x))
