"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("; ".join(errors))


@dataclass(frozen=True)
class TrainConfig:
    # episode shape
    way: int = 5
    shot: int = 1
    queries: int = 5
    eval_queries: int = 15
    image_size: int = 32
    n_patches: int = 5
    k_affine: int = 4
    # objective and optimizer
    lambda_att: float = 0.1
    lambda_aug: float = 0.1
    lr_augment: float = 0.01
    lr_base: float = 0.001
    lr_halving_period: int = 2000
    episodes: int = 20000
    seed: int = 0
    # ablation switches
    handcrafted_aug: bool = False
    learn_augment: bool = True
    salient_patches: bool = True
    reweight: bool = True
    # architecture
    backbone_channels: int = 64
    comparator_channels: int = 64
    merge_hidden: int = 8
    merge_blocks: int = 1
    merge_sigmoid: bool = True
    spatial_only_affine: bool = False
    attention_on_global: bool = False
    # patches
    nms_threshold: float = 0.5
    # data
    dataset: str = "synthetic"  # or a directory with class subfolders and manifest.tsv
    synth_seed: int = 0
    synth_classes: int = 30
    synth_images_per_class: int = 20
    patch_cache: str = ""
    # bookkeeping
    eval_episodes: int = 600
    eval_split: str = "test"
    checkpoint_every: int = 1000
    log_every: int = 100

    def __post_init__(self):
        errors = validate(self)
        if errors:
            raise ConfigError(errors)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def as_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.as_text().encode()).hexdigest()[:16]

    @property
    def n_members(self) -> int:
        """Support family size seen by the comparator."""
        from .imaging import HANDCRAFTED

        return 1 + (self.k_affine if self.learn_augment else 0) + (len(HANDCRAFTED) if self.handcrafted_aug else 0)

    @property
    def patches_per_image(self) -> int:
        return self.n_patches if self.salient_patches else 0


NON_NEGATIVE = {"lambda_att", "lambda_aug", "seed", "synth_seed", "log_every", "checkpoint_every"}
CHOICES = {"eval_split": {"train", "val", "test"}}

ABLATION_PRESETS = {
    "baseline": dict(handcrafted_aug=True, learn_augment=False, salient_patches=False, reweight=False),
    "la": dict(handcrafted_aug=False, learn_augment=True, salient_patches=False, reweight=False),
    "la_sp": dict(handcrafted_aug=False, learn_augment=True, salient_patches=True, reweight=False),
    "la_sp_lr": dict(handcrafted_aug=False, learn_augment=True, salient_patches=True, reweight=True),
}


def validate(cfg: TrainConfig) -> list[str]:
    errors = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.type in ("int", "float"):
            if f.name in NON_NEGATIVE:
                if v < 0:
                    errors.append(f"{f.name} must be >= 0, got {v}")
            elif v <= 0:
                errors.append(f"{f.name} must be positive, got {v}")
        if f.name in CHOICES and v not in CHOICES[f.name]:
            errors.append(f"{f.name} must be one of {sorted(CHOICES[f.name])}, got {v!r}")
    if cfg.merge_blocks not in (1, 2):
        errors.append(f"merge_blocks must be 1 or 2, got {cfg.merge_blocks}")
    if not 0 < cfg.nms_threshold < 1:
        errors.append(f"nms_threshold must lie in (0, 1), got {cfg.nms_threshold}")
    if cfg.image_size < 10:
        errors.append(f"image_size must be >= 10, got {cfg.image_size}")
    return errors


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(kind: str, raw: str):
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_pairs(pairs: Iterable[tuple[str, str]], base: TrainConfig | None = None) -> TrainConfig:
    """Build a config from ``(key, raw value)`` pairs, reporting every problem at once."""
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    errors = []
    for key, raw in pairs:
        if key not in kinds:
            errors.append(f"unknown key {key!r}")
            continue
        try:
            values[key] = _parse(kinds[key], raw)
        except ValueError as exc:
            errors.append(f"{key}: {exc}")
    if errors:
        raise ConfigError(errors)
    base = base or TrainConfig()
    merged = {f.name: getattr(base, f.name) for f in fields(base)}
    merged.update(values)
    return TrainConfig(**merged)


def parse_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    pairs = []
    errors = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value'")
            continue
        key, raw = line.split("=", 1)
        pairs.append((key.strip(), raw.strip()))
    if errors:
        raise ConfigError(errors)
    return parse_pairs(pairs, base)


def load_config(path: str | Path | None, overrides: Iterable[str] = ()) -> TrainConfig:
    cfg = parse_text(Path(path).read_text()) if path else TrainConfig()
    pairs = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not key=value"])
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return parse_pairs(pairs, cfg) if pairs else cfg


def write_config(path: str | Path, cfg: TrainConfig) -> None:
    Path(path).write_text(cfg.as_text())
