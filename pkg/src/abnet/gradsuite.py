"""Finite-difference checks for every differentiable op and the full training loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .augment import affine_grid_sample
from .config import TrainConfig
from .data import Episode
from .engine import episode_loss
from .model import ABNet
from .nn import BatchNormStats, Tensor, finite_diff_check, ops
from .saliency import BoundingBox, PatchSet
from .backbone import patch_rasters

TOLERANCE = 1e-4
EPSILON = 1e-4


def _t(rng: np.random.Generator, *shape, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape))


def _away_from_zero(rng, *shape) -> Tensor:
    # keeps kinked ops (relu, abs) off their kinks by more than epsilon
    x = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x)


def _weighted(rng, out_shape):
    r = rng.normal(size=out_shape)
    return lambda y: ops.sum_(ops.mul(y, r))


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """``name -> (closure, inputs)``; each closure reduces its op to a scalar."""
    cases = {}

    def add_case(name, inputs, build):
        out_shape = build().shape
        w = _weighted(rng, out_shape)
        cases[name] = (lambda: w(build()), inputs)

    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    row = _t(rng, 4)
    add_case("add", [a, row], lambda: ops.add(a, row))
    add_case("sub", [a, b], lambda: ops.sub(a, b))
    add_case("mul", [a, row], lambda: ops.mul(a, row))
    add_case("neg", [a], lambda: ops.neg(a))
    add_case("square", [a], lambda: ops.square(a))
    k = _away_from_zero(rng, 3, 4)
    add_case("abs", [k], lambda: ops.absolute(k))
    add_case("relu", [k], lambda: ops.relu(k))
    s = _t(rng, 3, 4, low=-4, high=4)
    add_case("sigmoid", [s], lambda: ops.sigmoid(s))
    c = _t(rng, 2, 3, 4)
    cases["sum"] = (lambda: ops.sum_(ops.square(ops.sum_(c, axis=1))), [c])
    cases["mean"] = (lambda: ops.sum_(ops.square(ops.mean(c, axis=(0, 2)))), [c])
    add_case("reshape", [c], lambda: ops.reshape(c, (6, 4)))
    add_case("transpose", [c], lambda: ops.transpose(c, (2, 0, 1)))
    add_case("getitem", [c], lambda: ops.getitem(c, (slice(None), 1)))
    idx = np.array([0, 1, 1, 0, 1])
    add_case("take", [c], lambda: ops.take(c, idx))
    d = _t(rng, 2, 2, 4)
    add_case("concat", [c, d], lambda: ops.concat([c, d], axis=1))
    x1, x2 = _t(rng, 2, 3, 3), _t(rng, 1, 3, 3)
    add_case("concat_channels", [x1, x2], lambda: ops.concat_channels([x1, x2]))
    add_case("stack", [x1], lambda: ops.stack([x1, ops.square(x1)], axis=0))

    img = _t(rng, 2, 3, 6, 5)
    ker = _t(rng, 4, 3, 3, 3)
    bias = _t(rng, 4)
    add_case("conv2d_pad0", [img, ker, bias], lambda: ops.conv2d(img, ker, bias, padding=0))
    wide = _t(rng, 2, 3, 5, 5)
    narrow = _t(rng, 2, 3, 3, 3)
    add_case("conv2d_pad1", [wide, narrow], lambda: ops.conv2d(wide, narrow, None, padding=1))

    bx = _t(rng, 3, 2, 3, 3)
    gamma, beta = _t(rng, 2, low=0.5, high=1.5), _t(rng, 2)
    add_case("batchnorm_train", [bx, gamma, beta], lambda: ops.batchnorm(bx, gamma, beta, "train", None))
    stats = BatchNormStats(2)
    stats.update(rng.normal(size=2), rng.uniform(0.5, 2.0, size=2))
    add_case("batchnorm_eval", [bx, gamma, beta], lambda: ops.batchnorm(bx, gamma, beta, "eval", stats))

    # distinct values keep the window maximum unique under perturbation
    pool_in = Tensor(rng.permutation(2 * 2 * 5 * 4).reshape(2, 2, 5, 4) * 0.01)
    add_case("maxpool2d", [pool_in], lambda: ops.maxpool2d(pool_in))
    dx, dw, db = _t(rng, 3, 5), _t(rng, 2, 5), _t(rng, 2)
    add_case("dense", [dx, dw, db], lambda: ops.dense(dx, dw, db))
    add_case("global_avg_pool", [img], lambda: ops.global_avg_pool(img))
    add_case("flatten", [img], lambda: ops.flatten(img))

    feat = _t(rng, 3, 4, 5)
    theta = Tensor(np.eye(3, 4) + rng.uniform(-0.15, 0.15, size=(3, 4)))
    add_case("affine_grid_sample", [feat, theta], lambda: affine_grid_sample(feat, theta))
    return cases


def check_ops(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    return {name: finite_diff_check(fn, inputs, EPSILON) for name, (fn, inputs) in op_cases(rng).items()}


# ---------------------------------------------------------------- full loss on a tiny model


def tiny_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(
        way=2, shot=1, queries=2, image_size=16, n_patches=2, k_affine=2,
        backbone_channels=3, comparator_channels=3, merge_hidden=4, seed=seed,
    )


def parameter_groups(model: ABNet) -> dict[str, list[Tensor]]:
    comp = model.comparator
    groups = {
        "backbone": model.backbone.parameters(),
        "comparator.g": comp.g.parameters(),
        "comparator.h": comp.h.parameters(),
        "comparator.attention": [p for d in comp.attention for p in d.parameters()],
        "comparator.merge": [p for m in comp.merge_blocks + comp.merge_fc for p in m.parameters()],
    }
    if model.bank is not None:
        groups = {"augment": model.bank.parameters(), **groups}
    return groups


def _tiny_episode(cfg: TrainConfig, rng: np.random.Generator):
    n_images = cfg.way * (cfg.shot + cfg.queries)
    size = cfg.image_size
    rasters = []
    for _ in range(n_images):
        img = rng.uniform(0, 1, size=(size, size, 3))
        boxes = []
        for _ in range(cfg.n_patches):
            w, h = (int(v) for v in rng.integers(4, size // 2 + 1, size=2))
            x, y = int(rng.integers(0, size - w + 1)), int(rng.integers(0, size - h + 1))
            boxes.append(BoundingBox(x, y, w, h))
        ps = PatchSet(tuple(boxes), tuple(float(v) for v in rng.uniform(0, 1, cfg.n_patches)), cfg.n_patches)
        rasters.append(patch_rasters(img, ps, size))
    rasters = np.stack(rasters)
    n_sup = cfg.way * cfg.shot
    labels_s = tuple(i // cfg.shot for i in range(n_sup))
    labels_q = tuple(i // cfg.queries for i in range(cfg.way * cfg.queries))
    names = tuple(f"c{i}" for i in range(cfg.way))
    ids = tuple(str(i) for i in range(n_images))
    episode = Episode(names, ids[:n_sup], labels_s, ids[n_sup:], labels_q)
    return rasters[:n_sup], rasters[n_sup:], episode


def check_model(seed: int = 0, cfg: TrainConfig | None = None, max_coords: int = 12) -> dict[str, tuple[float, int, int]]:
    """Per parameter group: (max relative error, coordinates checked, coordinates skipped).

    Coordinates whose +-epsilon evaluations cross a kink are skipped; see
    ``finite_diff_check``.
    """
    cfg = cfg or tiny_config(seed)
    rng = np.random.default_rng([seed, 99])
    model = ABNet(cfg)
    model.train()
    # move every parameter off its initial value so no pre-activation sits
    # exactly on a kink (zero biases feeding an all-zero relu row do)
    for p in model.parameters():
        p.data += rng.uniform(-0.1, 0.1, size=p.shape)
    support, query, episode = _tiny_episode(cfg, rng)

    def loss() -> Tensor:
        return episode_loss(model, cfg, model.forward(support, query), episode).total

    report = {}
    for name, params in parameter_groups(model).items():
        stats: dict = {}
        err = finite_diff_check(loss, params, EPSILON, max_coords=max_coords, rng=rng,
                                skip_nonsmooth=True, stats=stats)
        report[name] = (err, stats["checked"], stats["skipped"])
    return report
