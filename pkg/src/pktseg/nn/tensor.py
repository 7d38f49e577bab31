"""DiffTensor: an ndarray with a gradient slot and a backward tape."""
from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class DiffTensor:
    """Value plus same-shape gradient.

    Network feature maps are 5-axis ``(batch, channels, depth, height, width)``;
    losses are 0-d. ``grad`` is allocated lazily and reads as zeros until
    something accumulates into it.
    """

    __slots__ = ("values", "_grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad=False, parents=(), backward=None, name=None):
        self.values = np.asarray(values)
        if self.values.dtype.kind != "f":
            self.values = self.values.astype(np.float32)
        self._grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = None if g is None else np.asarray(g, dtype=self.values.dtype)

    def accumulate(self, g):
        if self._grad is None:
            self._grad = np.array(g, dtype=self.values.dtype, copy=True)
        else:
            self._grad += g

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        return f"DiffTensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.values)

    def backward(self, seed=None):
        """Reverse-mode sweep from this tensor (seed defaults to ones)."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(np.ones_like(self.values) if seed is None else seed)
        for node in reversed(order):
            if node._backward is not None and node._grad is not None:
                node._backward(node._grad)
                if node._parents:
                    # interior node: its gradient is no longer needed
                    node._backward = None


def make_result(values, parents, backward) -> DiffTensor:
    """Wrap an op output; records the tape only when a parent needs gradients."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if needs:
        return DiffTensor(values, True, tuple(parents), backward)
    return DiffTensor(values)


def as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)
