"""Parameter containers and the small layer zoo used by the models."""
from __future__ import annotations

import copy
from typing import Iterator

import numpy as np

from ..errors import DimensionError, StructureError
from . import ops
from .tensor import Tensor


class Module:
    """Base class: any ``Tensor`` attribute is a parameter, any ``Module``
    attribute (or list of modules) a child. Attribute order fixes the
    parameter order, which the checkpoint format relies on."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, child in enumerate(val):
                    yield from child.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> Module:
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def train(self, mode: bool = True) -> Module:
        for mod in self._modules():
            mod.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def _modules(self) -> Iterator[Module]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val._modules()
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for child in val:
                    yield from child._modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise StructureError(f"parameter names differ (missing={missing}, unexpected={extra})")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise StructureError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def clone(self) -> Module:
        """Deep copy with gradients dropped; shares no arrays with ``self``."""
        twin = copy.deepcopy(self)
        twin.zero_grad()
        return twin

    def astype(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _uniform(rng: np.random.Generator, bound: float, shape, dtype) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    """y = x W^T + b with weight [out, in]; uniform(+-1/sqrt(in)) init."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 dtype=np.float64, zero: bool = False):
        bound = 1.0 / np.sqrt(n_in)
        if zero:
            self.weight = Tensor(np.zeros((n_out, n_in), dtype=dtype), requires_grad=True)
            self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)
        else:
            self.weight = _uniform(rng, bound, (n_out, n_in), dtype)
            self.bias = _uniform(rng, bound, (n_out,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    if x.shape[-1] != layer.weight.shape[1]:
        raise DimensionError(
            f"linear layer expects {layer.weight.shape[1]} input features, got {x.shape[-1]}")
    return ops.matmul(x, ops.transpose(layer.weight, (1, 0))) + layer.bias


class MLP3(Module):
    """Three-layer perceptron: linear, leaky-ReLU, dropout (twice), linear.

    The output layer is zero-initialized by default so that downstream
    normalizations start at their identity value.
    """

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator,
                 drop_ratio: float = 0.0, slope: float = 0.2, dtype=np.float64,
                 zero_output: bool = True):
        self.fc1 = Linear(n_in, n_hidden, rng, dtype)
        self.fc2 = Linear(n_hidden, n_hidden, rng, dtype)
        self.fc3 = Linear(n_hidden, n_out, rng, dtype, zero=zero_output)
        self.drop_ratio = drop_ratio
        self.slope = slope

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = ops.dropout(ops.leaky_relu(self.fc1(x), self.slope), self.drop_ratio, rng, self.training)
        h = ops.dropout(ops.leaky_relu(self.fc2(h), self.slope), self.drop_ratio, rng, self.training)
        return self.fc3(h)


class Conv2d(Module):
    """3x3-style stride-1 'same' convolution on NHWC tensors."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 dtype=np.float64):
        bound = 1.0 / np.sqrt(c_in * kernel * kernel)
        self.weight = _uniform(rng, bound, (kernel, kernel, c_in, c_out), dtype)
        self.bias = _uniform(rng, bound, (c_out,), dtype)
        self.padding = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, padding=self.padding)
