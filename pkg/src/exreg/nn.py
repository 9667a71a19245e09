"""Thin layer classes over the tensor ops: conv, transposed conv, linear, MLP.

Each layer owns its parameter tensors and reports them through ``params()``
as an ordered name -> Tensor mapping, which is what the optimizer and the
checkpoint format consume.  He-uniform init for ReLU trunks; heads that must
start as an exact identity are zero-initialized.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    def __init__(self, cin, cout, k, stride=1, padding=0, *, rng, dtype,
                 zero_init=False, bias_init=0.0):
        if zero_init:
            w = np.zeros((cout, cin, k, k), dtype=dtype)
        else:
            w = he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.full(cout, bias_init, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.weight, f"{prefix}.b": self.bias}


class ConvTranspose2d:
    """Transposed conv; weight keeps the (K,C,kh,kw) conv layout, maps K -> C."""

    def __init__(self, cin, cout, k, stride=1, padding=0, *, rng, dtype):
        w = he_uniform(rng, (cin, cout, k, k), cin * k * k, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.transposed_conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.weight, f"{prefix}.b": self.bias}


class Linear:
    def __init__(self, cin, cout, *, rng, dtype, zero_init=False, bias_init=0.0):
        if zero_init:
            w = np.zeros((cin, cout), dtype=dtype)
        else:
            w = he_uniform(rng, (cin, cout), cin, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.full(cout, bias_init, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        """x: (..., cin) -> (..., cout); folds leading dims through one matmul."""
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
        out = T.add(T.matmul(flat, self.weight), self.bias)
        if x.ndim != 2:
            out = T.reshape(out, lead + (self.weight.shape[1],))
        return out

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.weight, f"{prefix}.b": self.bias}


class MLP:
    """Stack of Linear layers with ReLU between; last layer is linear."""

    def __init__(self, sizes, *, rng, dtype, zero_init_last=False, bias_init=0.0):
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            self.layers.append(Linear(a, b, rng=rng, dtype=dtype,
                                      zero_init=zero_init_last and last,
                                      bias_init=0.0 if last else bias_init))

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i != len(self.layers) - 1:
                x = T.relu(x)
        return x

    def params(self, prefix: str) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}.{i}"))
        return out


def merge_params(*dicts) -> dict:
    out = {}
    for d in dicts:
        for k, v in d.items():
            if k in out:
                raise ValueError(f"duplicate parameter name {k}")
            out[k] = v
    return out


def set_trainable(params: dict, flag: bool) -> None:
    for p in params.values():
        p.requires_grad = flag


def load_into(params: dict, arrays: dict, section: str) -> None:
    """Copy ``arrays[section/name]`` into each parameter tensor, checking shapes."""
    for name, p in params.items():
        key = f"{section}/{name}"
        if key not in arrays:
            raise KeyError(f"checkpoint is missing parameter {key}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(p.shape):
            raise ValueError(f"checkpoint parameter {key} has shape {arr.shape}, expected {p.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)


def dump_params(params: dict, section: str) -> dict:
    return {f"{section}/{name}": p.data.copy() for name, p in params.items()}
