"""Meta-training loop and the episodic evaluation protocol."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import checkpoint
from .backbone import patch_rasters
from .compare import classify_query
from .config import TrainConfig
from .data import Dataset, Episode, gen_synthetic_dataset, load_image_dataset, sample_episode
from .losses import loss_att, loss_aug, loss_cls, prob_score, total_loss
from .model import ABNet
from .nn import Adam, ParamGroup, Tape, Tensor, backward, no_record, ops
from .saliency import PatchConfig, PatchSet, extract_patch_set

log = logging.getLogger(__name__)

TRAIN_STREAM, EVAL_STREAM = 0, 1
TRAIN_HEADER = "episode,loss_cls,loss_att,loss_aug,loss_total"
EVAL_HEADER = "episode,accuracy"


class TrainingDiverged(RuntimeError):
    pass


def episode_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Independent generator per (seed, stream, episode) so runs can resume or parallelize."""
    return np.random.default_rng([seed, stream, index])


def load_dataset(cfg: TrainConfig) -> Dataset:
    """The configured dataset: the synthetic benchmark or a directory of class folders."""
    if cfg.dataset == "synthetic":
        return gen_synthetic_dataset(cfg.synth_seed, cfg.synth_classes, cfg.synth_images_per_class, cfg.image_size)
    return load_image_dataset(cfg.dataset, image_size=cfg.image_size)


def patch_config(cfg: TrainConfig) -> PatchConfig:
    return PatchConfig(nms_threshold=cfg.nms_threshold, n_patches=cfg.n_patches)


def extract_dataset_patches(dataset: Dataset, pcfg: PatchConfig, ids=None) -> dict[str, PatchSet]:
    return {i: extract_patch_set(dataset.image(i), pcfg) for i in (ids or dataset.all_ids())}


class RasterCache:
    """Per-image ``[1+P, 3, s, s]`` inputs (whole image first), built once."""

    def __init__(self, dataset: Dataset, cfg: TrainConfig, patches: Optional[dict[str, PatchSet]]):
        if cfg.salient_patches and patches is None:
            raise ValueError("salient_patches is enabled but no patch cache was supplied; run extract-patches first")
        self.dataset, self.cfg, self.patches = dataset, cfg, patches
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, image_id: str) -> np.ndarray:
        if image_id not in self._cache:
            img = self.dataset.image(image_id)
            if self.cfg.salient_patches:
                if image_id not in self.patches:
                    raise KeyError(f"patch cache has no entry for {image_id!r}")
                r = patch_rasters(img, self.patches[image_id], self.cfg.image_size)
            else:
                r = patch_rasters(img, PatchSet((), (), 0), self.cfg.image_size)
            self._cache[image_id] = r
        return self._cache[image_id]

    def batch(self, ids) -> np.ndarray:
        return np.stack([self(i) for i in ids])


def predictions(scores: np.ndarray, support_labels, way: int) -> np.ndarray:
    return np.array([classify_query(row, support_labels, way)[0] for row in scores])


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: ABNet
    losses: list[tuple[int, float, float, float, float]]
    accuracies: list[float]
    optimizer: Adam


def _lr_scale(cfg: TrainConfig, episode: int) -> float:
    return 0.5 ** (episode // cfg.lr_halving_period)


def episode_loss(model: ABNet, cfg: TrainConfig, out, episode: Episode):
    scores = out.scores.scores
    l_cls = loss_cls(prob_score(scores), episode.query_labels, episode.support_labels)
    l_att = loss_att(out.scores.weights) if out.scores.weights is not None else Tensor(0.0)
    if out.support.learned:
        q_global = ops.getitem(out.query, (slice(None), 0))
        learned_global = [ops.getitem(m, (slice(None), 0)) for m in out.support.learned]
        l_aug = loss_aug(q_global, learned_global, episode.query_labels, episode.support_labels)
    else:
        l_aug = Tensor(0.0)
    return total_loss(l_cls, l_att, l_aug, cfg.lambda_att, cfg.lambda_aug)


def make_optimizer(model: ABNet, cfg: TrainConfig) -> Adam:
    bank, rest = model.param_groups()
    groups = [ParamGroup(rest, cfg.lr_base)]
    if bank:
        groups.append(ParamGroup(bank, cfg.lr_augment))
    return Adam(groups)


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    patches: Optional[dict[str, PatchSet]] = None,
    out_dir: Optional[str | Path] = None,
    episodes: Optional[int] = None,
    model: Optional[ABNet] = None,
    optimizer: Optional[Adam] = None,
    start_episode: int = 0,
    callback: Optional[Callable[[int, TrainResult], bool]] = None,
) -> TrainResult:
    """Episodic training.

    ``callback(episode, result)`` runs after every episode; returning True
    stops training early. Metrics and checkpoints go to ``out_dir`` if given.
    """
    episodes = cfg.episodes if episodes is None else episodes
    rasters = RasterCache(dataset, cfg, patches)
    model = model or ABNet(cfg)
    model.train()
    optimizer = optimizer or make_optimizer(model, cfg)
    result = TrainResult(model, [], [], optimizer)
    out = Path(out_dir) if out_dir else None
    metrics = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        mpath = out / "train_metrics.csv"
        if start_episode and mpath.exists():
            kept = mpath.read_text().splitlines()[: start_episode + 1]
            mpath.write_text("\n".join(kept) + "\n")
            metrics = mpath.open("a")
        else:
            metrics = mpath.open("w")
            metrics.write(TRAIN_HEADER + "\n")

    try:
        for ep in range(start_episode, episodes):
            rng = episode_rng(cfg.seed, TRAIN_STREAM, ep)
            episode = sample_episode(dataset, "train", cfg.way, cfg.shot, cfg.queries, rng)
            optimizer.set_lr_scale(_lr_scale(cfg, ep))
            with Tape() as tape:
                fwd = model.forward(rasters.batch(episode.support), rasters.batch(episode.query))
                losses = episode_loss(model, cfg, fwd, episode)
            vals = losses.values()
            if not np.all(np.isfinite(vals)):
                raise TrainingDiverged(
                    f"non-finite loss {vals} at episode {ep} (episode seed [{cfg.seed}, {TRAIN_STREAM}, {ep}])"
                )
            optimizer.zero_grad()
            backward(losses.total, tape)
            optimizer.step()
            del tape

            pred = predictions(fwd.scores.scores.data, episode.support_labels, cfg.way)
            acc = float(np.mean(pred == np.asarray(episode.query_labels)))
            result.losses.append((ep,) + vals)
            result.accuracies.append(acc)
            if metrics:
                metrics.write(f"{ep}," + ",".join(_fmt(v) for v in vals) + "\n")
            if cfg.log_every and (ep + 1) % cfg.log_every == 0:
                recent = np.mean(result.accuracies[-cfg.log_every:])
                log.info("episode %d loss %.4f acc(last %d) %.3f", ep + 1, vals[3], cfg.log_every, recent)
            if out and cfg.checkpoint_every and (ep + 1) % cfg.checkpoint_every == 0:
                save_model(out / "checkpoint.txt", model, optimizer, ep + 1)
            if callback is not None and callback(ep, result):
                break
    finally:
        if metrics:
            metrics.close()
    if out:
        save_model(out / "checkpoint.txt", model, optimizer, len(result.losses) + start_episode)
    return result


def _fmt(v: float) -> str:
    return format(v, ".12g")


# ---------------------------------------------------------------- checkpoints


def save_model(path: str | Path, model: ABNet, optimizer: Optional[Adam] = None, episode: int = 0) -> None:
    arrays = dict(model.state_arrays())
    meta = {"episode": str(episode), "config_hash": model.cfg.config_hash}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        arrays.update(optimizer.state_arrays(names))
        meta["adam_step"] = str(optimizer.step_count)
    checkpoint.save(path, arrays, meta)


def scramble_parameters(model: ABNet, seed: int) -> None:
    """Randomly permute the entries of every parameter array in place (scales are kept)."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        flat = p.data.reshape(-1)
        flat[:] = flat[rng.permutation(flat.size)]


def load_model(path: str | Path, cfg: TrainConfig, with_optimizer: bool = False):
    """Rebuild a model from ``path``; raises CheckpointError or ValueError on mismatch."""
    arrays, meta = checkpoint.load(path)
    model = ABNet(cfg)
    model_arrays = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    try:
        model.load_state_arrays(model_arrays)
    except KeyError as exc:
        raise ValueError(f"checkpoint does not match the configured architecture: {exc}") from exc
    if not with_optimizer:
        return model, meta
    optimizer = make_optimizer(model, cfg)
    if "adam_step" in meta:
        names = {id(p): n for n, p in model.named_parameters()}
        optimizer.load_state_arrays(arrays, names, int(meta["adam_step"]))
    return model, optimizer, meta


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    accuracies: list[float]
    mean: float
    ci95: float
    episodes: int
    config: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "mean": self.mean,
            "ci95": self.ci95,
            "episodes": self.episodes,
            "config_hash": self.config.get("config_hash", ""),
        }


def confidence95(accuracies) -> float:
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size < 2:
        return 0.0
    return float(1.96 * acc.std(ddof=1) / np.sqrt(acc.size))


def model_scorer(model: ABNet, rasters: RasterCache, query_chunk: int = 15) -> Callable[[Episode], np.ndarray]:
    """Eval-mode ``episode -> [Q, S]`` scores, chunking queries to bound memory."""

    def score(episode: Episode) -> np.ndarray:
        model.eval()
        with no_record():
            support = model.embed_support(rasters.batch(episode.support))
            rows = []
            for start in range(0, len(episode.query), query_chunk):
                ids = episode.query[start:start + query_chunk]
                rows.append(model.score_queries(support, rasters.batch(ids)).scores.data)
        return np.concatenate(rows, axis=0)

    return score


def evaluate(
    dataset: Dataset,
    cfg: TrainConfig,
    scorer: Callable[[Episode], np.ndarray],
    split: Optional[str] = None,
    episodes: Optional[int] = None,
    seed: Optional[int] = None,
) -> EvalReport:
    """Mean accuracy and 95% half-width over independently seeded episodes."""
    split = split or cfg.eval_split
    episodes = cfg.eval_episodes if episodes is None else episodes
    seed = cfg.seed if seed is None else seed
    accs = []
    for e in range(episodes):
        episode = sample_episode(dataset, split, cfg.way, cfg.shot, cfg.eval_queries, episode_rng(seed, EVAL_STREAM, e))
        scores = scorer(episode)
        pred = predictions(scores, episode.support_labels, cfg.way)
        accs.append(float(np.mean(pred == np.asarray(episode.query_labels))))
    echo = {"config_hash": cfg.config_hash, "split": split, "way": cfg.way, "shot": cfg.shot,
            "queries": cfg.eval_queries, "seed": seed}
    return EvalReport(accs, float(np.mean(accs)), confidence95(accs), episodes, echo)


def write_eval_report(out_dir: str | Path, report: EvalReport) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [EVAL_HEADER] + [f"{i},{_fmt(a)}" for i, a in enumerate(report.accuracies)]
    (out / "eval_metrics.csv").write_text("\n".join(lines) + "\n")
    (out / "eval_summary.json").write_text(json.dumps(report.summary(), sort_keys=True) + "\n")
