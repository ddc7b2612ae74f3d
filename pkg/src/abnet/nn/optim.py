from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class ParamGroup:
    params: list[Tensor]
    lr: float
    base_lr: float = field(init=False)

    def __post_init__(self) -> None:
        self.base_lr = self.lr


class Adam:
    """Adam with bias correction and per-group learning rates."""

    def __init__(self, groups: list[ParamGroup], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}
        for group in groups:
            for p in group.params:
                self.m[id(p)] = np.zeros_like(p.data)
                self.v[id(p)] = np.zeros_like(p.data)

    @property
    def params(self) -> list[Tensor]:
        return [p for g in self.groups for p in g.params]

    def set_lr_scale(self, scale: float) -> None:
        for group in self.groups:
            group.lr = group.base_lr * scale

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for group in self.groups:
            for p in group.params:
                if p.grad is None:
                    continue
                m, v = self.m[id(p)], self.v[id(p)]
                m *= self.beta1
                m += (1.0 - self.beta1) * p.grad
                v *= self.beta2
                v += (1.0 - self.beta2) * p.grad * p.grad
                p.data -= group.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self, names: dict[int, str]) -> dict[str, np.ndarray]:
        out = {}
        for p in self.params:
            out[f"adam.m.{names[id(p)]}"] = self.m[id(p)]
            out[f"adam.v.{names[id(p)]}"] = self.v[id(p)]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], names: dict[int, str], step_count: int) -> None:
        for p in self.params:
            key = names[id(p)]
            self.m[id(p)][...] = arrays[f"adam.m.{key}"]
            self.v[id(p)][...] = arrays[f"adam.v.{key}"]
        self.step_count = step_count


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: Adam) -> list[Tensor]:
    """Functional wrapper: install ``grads`` and take one step with ``state``."""
    for p, g in zip(params, grads):
        p.grad = None if g is None else np.asarray(g, dtype=np.float64)
    state.step()
    return params
