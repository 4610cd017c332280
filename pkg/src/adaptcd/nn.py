"""Parameters, a minimal module registry and the shared layer primitives."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A named tensor that is either trainable or frozen.

    Frozen parameters never receive a gradient buffer: ``requires_grad`` is
    kept equal to ``not frozen``.
    """

    __slots__ = ("name", "_frozen")

    def __init__(self, data, frozen=False, name=""):
        super().__init__(np.array(data, copy=True), requires_grad=not frozen)
        self.name = name
        self._frozen = bool(frozen)

    @property
    def frozen(self):
        return self._frozen

    @frozen.setter
    def frozen(self, value):
        self._frozen = bool(value)
        self.requires_grad = not self._frozen
        if self._frozen:
            self.grad = None

    @property
    def tensor(self):
        return self

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) truncated to [-2std, 2std] by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class Module:
    """Attribute-walking parameter registry.

    Parameters and submodules are discovered from instance attributes in
    assignment order; parameter names are dotted attribute paths.
    """

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix=""):
        yield prefix.rstrip("."), self
        for key, value in vars(self).items():
            if isinstance(value, Module) and not key.startswith("_"):
                yield from value.named_modules(f"{prefix}{key}.")

    def assign_names(self, prefix=""):
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def freeze(self, frozen=True):
        for p in self.parameters():
            p.frozen = frozen
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast every parameter in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}


def as_param(rng, shape, std=0.02, frozen=False, dtype=np.float32):
    return Parameter(trunc_normal(rng, shape, std).astype(dtype), frozen=frozen)


def zeros_param(shape, frozen=False, dtype=np.float32):
    return Parameter(np.zeros(shape, dtype=dtype), frozen=frozen)


def ones_param(shape, frozen=False, dtype=np.float32):
    return Parameter(np.ones(shape, dtype=dtype), frozen=frozen)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-6, dtype=np.float32):
        self.gamma = ones_param((dim,), dtype=dtype)
        self.beta = zeros_param((dim,), dtype=dtype)
        self._eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self._eps)


class Linear(Module):
    """y = x W + b with W stored as [in, out]."""

    def __init__(self, rng, d_in, d_out, std=0.02, dtype=np.float32):
        self.weight = as_param(rng, (d_in, d_out), std, dtype=dtype)
        self.bias = zeros_param((d_out,), dtype=dtype)

    def __call__(self, x):
        return x @ self.weight + self.bias


class MLP(Module):
    """Two-layer feed-forward block with GELU.

    ``hidden_scale`` is an optional elementwise multiplier applied to the
    hidden activations (used by IA3).
    """

    def __init__(self, rng, dim, hidden, dtype=np.float32):
        self.fc1 = Linear(rng, dim, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, dim, dtype=dtype)
        self._hidden_scale = None

    def __call__(self, x):
        h = T.gelu(self.fc1(x))
        if self._hidden_scale is not None:
            h = h * self._hidden_scale
        return self.fc2(h)
