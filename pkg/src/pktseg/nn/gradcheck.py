"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DiffTensor, no_grad


@dataclass
class GradCheckReport:
    worst: float  # max relative error over checked smooth coordinates
    checked: int
    nonsmooth: int  # coordinates skipped because a kink lies within +-eps


def gradient_report(op, inputs, eps=1e-6, max_coords=None, seed=0, floor=1e-8,
                    reference_dtype=None, kink_tol=None, constants=(), scale_floor=0.0) -> GradCheckReport:
    """Compare analytic gradients of ``op`` with central differences.

    ``op(*tensors)`` must return a scalar DiffTensor. ``inputs`` are arrays or
    DiffTensors; DiffTensors (e.g. network parameters) are perturbed in place
    and restored, so ``op`` may close over them. With ``max_coords`` only that
    many randomly chosen coordinates per input are checked.

    Relative error per coordinate is |a - n| / max(|a|, |n|, floor), where
    ``floor`` is raised to ``scale_floor * G`` when that is larger; G is the
    largest analytic gradient magnitude over ``inputs`` and ``constants``.

    With ``reference_dtype`` (e.g. float64) the analytic gradient is taken at
    the inputs' own precision and the differences are evaluated after casting
    every input, and every DiffTensor in ``constants`` (tensors ``op`` closes
    over but which are not checked), to ``reference_dtype``.

    With ``kink_tol`` a coordinate whose forward and backward one-sided slopes
    differ by more than ``kink_tol`` (relative) straddles a ReLU/max-pool kink;
    it is counted in ``nonsmooth`` and left out of ``worst``.
    """
    tensors = []
    for x in inputs:
        if isinstance(x, DiffTensor):
            x.requires_grad = True
            x.zero_grad()
            tensors.append(x)
        else:
            tensors.append(DiffTensor(np.array(x), requires_grad=True))
    constants = list(constants)
    for c in constants:
        c.zero_grad()
    out = op(*tensors)
    if out.values.size != 1:
        raise ValueError("op must return a scalar")
    out.backward()
    analytic = [t.grad.copy() for t in tensors]
    if scale_floor:
        scale = max(float(np.abs(g).max()) for g in analytic + [c.grad for c in constants if c.requires_grad])
        floor = max(floor, scale_floor * scale)
    for t in tensors + constants:
        t.zero_grad()

    originals = None
    if reference_dtype is not None:
        cast = tensors + constants
        originals = [t.values for t in cast]
        for t in cast:
            t.values = t.values.astype(reference_dtype)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, 0, 0)
    try:
        with no_grad():
            f0 = float(op(*tensors).values) if kink_tol is not None else None
            for t, a in zip(tensors, analytic):
                flat = t.values.reshape(-1)
                n = flat.size
                coords = np.arange(n)
                if max_coords is not None and n > max_coords:
                    coords = np.sort(rng.choice(n, size=max_coords, replace=False))
                for c in coords:
                    orig = flat[c]
                    flat[c] = orig + eps
                    fp = float(op(*tensors).values)
                    flat[c] = orig - eps
                    fm = float(op(*tensors).values)
                    flat[c] = orig
                    if kink_tol is not None:
                        up, down = (fp - f0) / eps, (f0 - fm) / eps
                        if abs(up - down) > kink_tol * max(abs(up), abs(down), floor):
                            report.nonsmooth += 1
                            continue
                    num = (fp - fm) / (2 * eps)
                    ana = float(a.reshape(-1)[c])
                    err = abs(ana - num) / max(abs(ana), abs(num), floor)
                    report.worst = max(report.worst, err)
                    report.checked += 1
    finally:
        if originals is not None:
            for t, v in zip(tensors + constants, originals):
                t.values = v
    return report


def finite_difference_check(op, inputs, eps=1e-6, max_coords=None, seed=0, floor=1e-8,
                            reference_dtype=None):
    """Worst relative error between analytic and central-difference gradients
    (see :func:`gradient_report`; every sampled coordinate counts)."""
    return gradient_report(op, inputs, eps, max_coords, seed, floor, reference_dtype).worst
