"""The finite-difference suite behind ``pktseg gradcheck``.

Every differentiable op, plus whole Pocket and Double U-Nets (L=1, C=2, 8^3
input), is checked against central differences on random inputs. Each op's
output is reduced to a scalar with a fixed random weighting so every output
coordinate contributes a distinct gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..architectures import DoubleUNet, DoubleUNetConfig, PocketUNet, PocketUNetConfig
from ..nn import functional as F
from ..nn.gradcheck import gradient_report
from ..nn.tensor import DiffTensor

TOLERANCE = 1e-3
PRECISION_FLOOR = 1e-8
ABSOLUTE_FLOOR = 1e-4
KINK_TOL = 1e-3  # whole networks only; an undetected kink shifts the central difference by < KINK_TOL/2
MAX_NONSMOOTH = 0.1  # share of sampled coordinates that may straddle a kink
SCALE_FLOOR = 1e-3  # below float64: floor relative to the largest gradient in the graph


@dataclass
class GradResult:
    op: str
    seed: int
    error: float
    checked: int = 0
    nonsmooth: int = 0

    @property
    def passed(self):
        total = self.checked + self.nonsmooth
        return self.error < TOLERANCE and self.checked > 0 and self.nonsmooth <= MAX_NONSMOOTH * total


def _distinct(rng, shape, gap=0.05):
    """Values whose pairwise gaps are at least ``gap`` (no ties, no kinks nearby)."""
    n = int(np.prod(shape))
    v = (rng.permutation(n) - n / 2 + 0.5) * gap
    return v.reshape(shape)


def op_cases(rng, dtype):
    """(name, op, inputs) triples for one seed."""
    f = lambda *s: rng.standard_normal(s).astype(dtype)  # noqa: E731
    cases = []

    x, w, b = f(1, 2, 4, 4, 4), f(3, 2, 3, 3, 3), f(3)
    wc = f(1, 3, 4, 4, 4)
    cases.append(("conv3d", lambda x, w, b: F.reduce_sum(F.conv3d(x, w, b, 1, 1), wc), [x, w, b]))

    x, w, b = f(1, 2, 3, 3, 3), f(2, 3, 2, 2, 2), f(3)
    wt = f(1, 3, 6, 6, 6)
    cases.append(("conv_transpose3d",
                  lambda x, w, b: F.reduce_sum(F.conv_transpose3d(x, w, b, 2), wt), [x, w, b]))

    x, g, be = f(2, 3, 3, 3, 3), f(3), f(3)
    wb = f(2, 3, 3, 3, 3)
    rm, rv = np.zeros(3, dtype), np.ones(3, dtype)
    cases.append(("batchnorm3d",
                  lambda x, g, be: F.reduce_sum(F.batchnorm3d(x, g, be, rm.copy(), rv.copy(), True), wb),
                  [x, g, be]))

    x = f(2, 2, 3, 3, 3)
    x = np.where(np.abs(x) < 0.1, x + np.sign(x + 1e-12) * 0.1, x).astype(dtype)  # off the kink
    wr = f(2, 2, 3, 3, 3)
    cases.append(("relu", lambda x: F.reduce_sum(F.relu(x), wr), [x]))

    x = _distinct(rng, (1, 2, 4, 4, 4)).astype(dtype)
    wd = f(1, 2, 2, 2, 2)
    cases.append(("downsample", lambda x: F.reduce_sum(F.downsample(x), wd), [x]))

    x = f(2, 2, 3, 3, 3)
    ws = f(2, 2, 3, 3, 3)
    cases.append(("softmax_channels", lambda x: F.reduce_sum(F.softmax_channels(x), ws), [x]))

    a, b = f(1, 2, 2, 2, 2), f(1, 3, 2, 2, 2)
    wcat = f(1, 5, 2, 2, 2)
    cases.append(("concat_channels", lambda a, b: F.reduce_sum(F.concat_channels(a, b), wcat), [a, b]))

    logits = f(2, 2, 4, 4, 4)
    target = F.one_hot(rng.integers(0, 2, (2, 4, 4, 4)), 2, dtype)
    cases.append(("dice_ce_loss",
                  lambda z: F.dice_ce_loss(F.softmax_channels(z), target), [logits]))
    return cases


def _split_pre_bn_biases(net):
    """(checked parameters, biases of convs feeding a batch norm).

    A conv bias directly followed by batch normalization is cancelled by the
    mean subtraction, so its true gradient is exactly zero and a relative error
    is meaningless there; those biases are checked on an absolute scale.
    """
    checked, pre_bn = [], []
    for name, t in net.named_parameters():
        (pre_bn if name.endswith("conv.bias") else checked).append(t)
    return checked, pre_bn


def network_cases(rng, dtype, seed, max_coords=(3, 2)):
    """Whole-network checks over the input and every parameter tensor (sampled).

    Yields (name, op, inputs, max_coords, floor, constants); ``max_coords``
    gives the per-tensor sample size for the Pocket and Double U-Net and
    ``constants`` are the remaining tensors the op closes over. The
    ``*_pre_bn_bias`` cases use a floor of 1e-4, i.e. in float64 they assert
    |analytic - numeric| < 1e-7.
    """
    cfg = PocketUNetConfig(in_channels=2, channels=2, depth=1)
    pocket = PocketUNet(cfg, ["T1", "T1C"], seed=seed).astype(dtype)
    x = DiffTensor(rng.standard_normal((1, 2, 8, 8, 8)).astype(dtype))
    wp = rng.standard_normal((1, 2, 8, 8, 8)).astype(dtype)
    checked, pre_bn = _split_pre_bn_biases(pocket)
    op = lambda x, *_: F.reduce_sum(pocket.forward([x]), wp)  # noqa: E731
    cases = [("pocket_unet", op, [x, *checked], max_coords[0], PRECISION_FLOOR, pre_bn),
             ("pocket_unet_pre_bn_bias", lambda *_: op(x), pre_bn, None, ABSOLUTE_FLOOR, [x, *checked])]

    dcfg = DoubleUNetConfig(PocketUNetConfig(2, 2, 1), PocketUNetConfig(1, 2, 1),
                            ["T1", "T1C"], ["T1C"], 2)
    double = DoubleUNet(dcfg, seed=seed).astype(dtype)
    xa = DiffTensor(rng.standard_normal((1, 2, 8, 8, 8)).astype(dtype))
    xb = DiffTensor(rng.standard_normal((1, 1, 8, 8, 8)).astype(dtype))
    wd = rng.standard_normal((1, 2, 8, 8, 8)).astype(dtype)
    checked, pre_bn = _split_pre_bn_biases(double)
    dop = lambda xa, xb, *_: F.reduce_sum(double.forward([xa, xb]), wd)  # noqa: E731
    cases += [("double_unet", dop, [xa, xb, *checked], max_coords[1], PRECISION_FLOOR, pre_bn),
              ("double_unet_pre_bn_bias", lambda *_: dop(xa, xb), pre_bn, None, ABSOLUTE_FLOOR,
               [xa, xb, *checked])]
    return cases


def run_suite(seeds=range(20), dtype=np.float64, eps=1e-6, networks=True, reference_dtype=None):
    """List of GradResult, one per (op, seed).

    ``dtype`` is the precision of the forward/backward pass. Differences are
    taken at ``reference_dtype`` when given (float32 analytic vs float64
    numeric), else at ``dtype``.

    A float32 gradient carries rounding error relative to the largest
    gradient in the graph, not to each coordinate, so below float64 the
    floor of every case is raised to SCALE_FLOOR times that largest
    magnitude. The float64 route keeps per-coordinate floors.
    """
    dtype = np.dtype(dtype)
    scale_floor = SCALE_FLOOR if dtype.itemsize < 8 else 0.0
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        cases = [(n, op, inp, None, PRECISION_FLOOR, (), None) for n, op, inp in op_cases(rng, dtype)]
        if networks:
            cases += [c + (KINK_TOL,) for c in network_cases(rng, dtype, seed)]
        for name, op, inputs, mc, floor, consts, kink in cases:
            rep = gradient_report(op, inputs, eps=eps, max_coords=mc, seed=seed, floor=floor,
                                  reference_dtype=reference_dtype, kink_tol=kink,
                                  constants=consts, scale_floor=scale_floor)
            results.append(GradResult(name, seed, rep.worst, rep.checked, rep.nonsmooth))
    return results


def summarize_results(results):
    """{op: worst error over seeds}."""
    worst = {}
    for r in results:
        worst[r.op] = max(worst.get(r.op, 0.0), r.error)
    return worst
