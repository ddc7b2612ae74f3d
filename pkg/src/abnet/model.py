"""The assembled network: embedding, support augmentation and comparator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .augment import AffineBank, affine_grid_sample
from .backbone import Backbone, feature_size
from .compare import Comparator, EpisodeScores, score_episode
from .config import TrainConfig
from .imaging import HANDCRAFTED
from .nn import Module, Tensor, ops


@dataclass
class SupportFeatures:
    members: list[Tensor]  # each [S, 1+P, C, h, w]; member 0 un-augmented
    learned: list[Tensor]  # the learned (affine) members only


@dataclass
class EpisodeOutput:
    scores: EpisodeScores
    query: Tensor  # [Q, 1+P, C, h, w]
    support: SupportFeatures


class ABNet(Module):
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 7])
        self.backbone = Backbone(rng, channels=cfg.backbone_channels)
        self.bank: Optional[AffineBank] = (
            AffineBank(cfg.k_affine, seed=cfg.seed, spatial_only=cfg.spatial_only_affine)
            if cfg.learn_augment else None
        )
        self.comparator = Comparator(
            rng,
            feature_channels=cfg.backbone_channels,
            feature_size=feature_size(cfg.image_size),
            n_members=cfg.n_members,
            n_patches=cfg.patches_per_image,
            channels=cfg.comparator_channels,
            merge_hidden=cfg.merge_hidden,
            local_path=cfg.salient_patches,
            reweight=cfg.reweight,
            merge_blocks=cfg.merge_blocks,
            merge_sigmoid=cfg.merge_sigmoid,
            attention_on_global=cfg.attention_on_global,
        )

    def param_groups(self) -> tuple[list[Tensor], list[Tensor]]:
        """(augmentation bank parameters, everything else)."""
        bank = self.bank.parameters() if self.bank is not None else []
        ids = {id(p) for p in bank}
        return bank, [p for p in self.parameters() if id(p) not in ids]

    def _embed(self, rasters: np.ndarray) -> Tensor:
        """``[n, 1+P, 3, s, s]`` rasters -> ``[n, 1+P, C, h, w]`` features."""
        n, p1 = rasters.shape[:2]
        out = self.backbone(Tensor(rasters.reshape((n * p1,) + rasters.shape[2:])))
        return ops.reshape(out, (n, p1) + out.shape[1:])

    def _handcrafted(self, rasters: np.ndarray) -> np.ndarray:
        return np.stack([fn(r) for _, fn in HANDCRAFTED for r in rasters.reshape((-1,) + rasters.shape[2:])])

    def support_features(self, support_feats: Tensor, handcrafted_feats: Optional[Tensor]) -> SupportFeatures:
        S, P1 = support_feats.shape[:2]
        members, learned = [support_feats], []
        if self.bank is not None:
            flat = ops.reshape(support_feats, (S * P1,) + support_feats.shape[2:])
            for k in range(1, self.bank.k + 1):
                warped = ops.reshape(affine_grid_sample(flat, self.bank.matrix(k)), support_feats.shape)
                members.append(warped)
                learned.append(warped)
        if handcrafted_feats is not None:
            per = ops.reshape(handcrafted_feats, (len(HANDCRAFTED), S, P1) + support_feats.shape[2:])
            members.extend(ops.getitem(per, t) for t in range(len(HANDCRAFTED)))
        return SupportFeatures(members, learned)

    def forward(self, support_rasters: np.ndarray, query_rasters: np.ndarray) -> EpisodeOutput:
        """Score every query against every support image.

        All rasters go through the backbone as one batch so batchnorm sees the
        whole episode in train mode.
        """
        S, Q = support_rasters.shape[0], query_rasters.shape[0]
        P1 = support_rasters.shape[1]
        parts = [support_rasters, query_rasters]
        if self.cfg.handcrafted_aug:
            hand = self._handcrafted(support_rasters).reshape((len(HANDCRAFTED) * S, P1) + support_rasters.shape[2:])
            parts.append(hand)
        feats = self._embed(np.concatenate(parts, axis=0))
        fs = ops.getitem(feats, slice(0, S))
        fq = ops.getitem(feats, slice(S, S + Q))
        hand_feats = ops.getitem(feats, slice(S + Q, None)) if self.cfg.handcrafted_aug else None
        support = self.support_features(fs, hand_feats)
        return EpisodeOutput(score_episode(fq, support.members, self.comparator), fq, support)

    def embed_support(self, support_rasters: np.ndarray) -> SupportFeatures:
        fs = self._embed(support_rasters)
        hand = None
        if self.cfg.handcrafted_aug:
            S, P1 = support_rasters.shape[:2]
            hand = self._embed(self._handcrafted(support_rasters).reshape((len(HANDCRAFTED) * S, P1) + support_rasters.shape[2:]))
        return self.support_features(fs, hand)

    def score_queries(self, support: SupportFeatures, query_rasters: np.ndarray) -> EpisodeScores:
        return score_episode(self._embed(query_rasters), support.members, self.comparator)
