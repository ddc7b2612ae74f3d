"""Parameter containers, layer building blocks and initialization."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .ops import BatchNormStats
from .tensor import Tensor


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


class Module:
    """Minimal container: parameters, buffers and submodules are found by attribute scan."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in vars(self).items():
            if isinstance(value, BatchNormStats):
                yield f"{prefix}{key}.running_mean", value.mean
                yield f"{prefix}{key}.running_var", value.var
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def _children(self) -> Iterator["Module"]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Module))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        missing = sorted(set(own) - set(arrays))
        if missing:
            raise KeyError(f"checkpoint is missing entries: {', '.join(missing[:5])}")
        for name, target in own.items():
            src = arrays[name]
            if src.shape != target.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {src.shape}, model {target.shape}")
            target[...] = src
        for module in self._walk():
            for value in vars(module).values():
                if isinstance(value, BatchNormStats):
                    value.populated = True

    def _walk(self) -> Iterator["Module"]:
        yield self
        for child in self._children():
            yield from child._walk()


class ConvBlock(Module):
    """conv3x3 -> batchnorm -> relu [-> 2x2 max pool].

    The convolution has no bias: batchnorm cancels it exactly.
    """

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, padding: int, pool: bool):
        self.kernels = kaiming(rng, (c_out, c_in, 3, 3), fan_in=c_in * 9)
        self.gamma = parameter(np.ones(c_out))
        self.beta = parameter(np.zeros(c_out))
        self.bn = BatchNormStats(c_out)
        self.padding = padding
        self.pool = pool

    def normalize(self, pre: Tensor) -> Tensor:
        """Batchnorm, relu and optional pool applied to a pre-activation."""
        out = ops.relu(ops.batchnorm(pre, self.gamma, self.beta, self.mode, self.bn))
        return ops.maxpool2d(out) if self.pool else out

    def __call__(self, x: Tensor) -> Tensor:
        return self.normalize(ops.conv2d(x, self.kernels, None, self.padding))


class Dense(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.weights = kaiming(rng, (d_out, d_in), fan_in=d_in)
        self.bias = parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.weights, self.bias)
