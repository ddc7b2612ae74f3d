"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, record_branches


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def finite_diff_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-4,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    skip_nonsmooth: bool = False,
    stats: Optional[dict] = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` takes no arguments and must read ``inputs`` (which are perturbed in
    place). With ``max_coords`` only that many randomly chosen coordinates of
    each input are checked.

    Central differences are meaningless across a kink. With
    ``skip_nonsmooth`` a coordinate is skipped when either perturbed
    evaluation takes a different branch (relu sign, pooling winner, warp
    cell) than the unperturbed one. ``stats`` receives checked/skipped counts.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape, record_branches() as base_branches:
        loss = fn()
    backward(loss, tape)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def evaluate() -> tuple[float, list[bytes]]:
        with record_branches() as branches:
            value = fn().item()
        return value, branches

    worst = 0.0
    checked = skipped = 0
    rng = rng if rng is not None else np.random.default_rng(0)
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            up, up_branches = evaluate()
            flat[c] = orig - epsilon
            down, down_branches = evaluate()
            flat[c] = orig
            if skip_nonsmooth and (up_branches != base_branches or down_branches != base_branches):
                skipped += 1
                continue
            checked += 1
            numeric = (up - down) / (2.0 * epsilon)
            worst = max(worst, float(relative_error(a.reshape(-1)[c], numeric)))
    for t in inputs:
        t.grad = None
    if stats is not None:
        stats["checked"] = stats.get("checked", 0) + checked
        stats["skipped"] = stats.get("skipped", 0) + skipped
    return worst
