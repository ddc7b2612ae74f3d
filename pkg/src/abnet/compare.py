"""Learned bi-path comparator.

Two routes compute the same scores:

* the per-pair functions (:func:`pair_tensor`, :func:`similarity_map`,
  :func:`build_group`, :func:`attention_weight`, :func:`merge_score`) follow the
  model's definition literally, one support/query pair at a time;
* :func:`score_episode` evaluates every pair of an episode in one batch. It
  splits the first convolution of ``g`` over the query/support halves of the
  concatenated input, so each feature map is convolved once instead of once
  per pair.

In eval mode the two agree to rounding error; in train mode batchnorm sees
different batches, so only the batched route is used for training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .augment import AffineBank, AugmentedFamily, augment_family
from .nn import ConvBlock, Dense, Module, Tensor, ops

ATTENTION_WIDTHS = (64, 32)


class Comparator(Module):
    """Parameters of g, h, the attention MLP and the merging network."""

    def __init__(
        self,
        rng: np.random.Generator,
        feature_channels: int,
        feature_size: int,
        n_members: int,
        n_patches: int,
        channels: int = 64,
        merge_hidden: int = 8,
        local_path: bool = True,
        reweight: bool = True,
        merge_blocks: int = 1,
        merge_sigmoid: bool = True,
        attention_on_global: bool = False,
    ):
        self.n_members = n_members
        self.n_patches = n_patches if local_path else 0
        self.local_path = local_path
        self.reweight = reweight and local_path
        self.merge_sigmoid = merge_sigmoid
        self.attention_on_global = attention_on_global
        self.feature_channels = feature_channels
        self.g = ConvBlock(rng, 2 * feature_channels, channels, padding=1, pool=False)
        self.h = ConvBlock(rng, n_members * channels, channels, padding=1, pool=True)
        n_maps = 1 + self.n_patches ** 2
        if self.reweight:
            d_in = 2 * feature_channels + channels
            widths = (d_in,) + ATTENTION_WIDTHS + (1,)
            self.attention = [Dense(rng, widths[i], widths[i + 1]) for i in range(3)]
        blocks = [ConvBlock(rng, n_maps * channels, channels, padding=1, pool=False)]
        for _ in range(merge_blocks - 1):
            blocks.append(ConvBlock(rng, channels, channels, padding=1, pool=False))
        self.merge_blocks = blocks
        map_side = feature_size // 2
        self.merge_fc = [Dense(rng, channels * map_side * map_side, merge_hidden), Dense(rng, merge_hidden, 1)]

    # pieces shared by both routes

    def attention_mlp(self, x: Tensor) -> Tensor:
        a, b, c = self.attention
        return ops.sigmoid(c(ops.relu(b(ops.relu(a(x))))))

    def merge(self, x: Tensor) -> Tensor:
        for block in self.merge_blocks:
            x = block(x)
        x = ops.flatten(x, start=x.ndim - 3)
        fc1, fc2 = self.merge_fc
        out = fc2(ops.relu(fc1(x)))
        return ops.sigmoid(out) if self.merge_sigmoid else out


# ---------------------------------------------------------------- per-pair route


@dataclass
class SimilarityGroup:
    global_map: Tensor
    locals: list[list[Tensor]]  # [i][j]: support patch i vs query patch j
    weights: Optional[list[list[Tensor]]]

    def __len__(self) -> int:
        return 1 + sum(len(row) for row in self.locals)


def pair_tensor(f_q, f_k_s) -> Tensor:
    """Query first, support variant second, along channels."""
    f_q = getattr(f_q, "tensor", f_q)
    f_k_s = getattr(f_k_s, "tensor", f_k_s)
    if f_q.shape != f_k_s.shape:
        raise ValueError(f"pair_tensor shape mismatch: {f_q.shape} vs {f_k_s.shape}")
    return ops.concat_channels([f_q, f_k_s])


def similarity_map(f_q, family: AugmentedFamily | Sequence[Tensor], comp: Comparator) -> Tensor:
    members = family.members if isinstance(family, AugmentedFamily) else list(family)
    if len(members) != comp.n_members:
        raise ValueError(f"family has {len(members)} members, comparator expects {comp.n_members}")
    g_out = [comp.g(pair_tensor(f_q, m)) for m in members]
    return comp.h(ops.concat_channels(g_out))


def attention_weight(f_s_patch, f_q_patch, m_ij, comp: Comparator) -> Tensor:
    parts = [ops.global_avg_pool(getattr(t, "tensor", t)) for t in (f_s_patch, f_q_patch, m_ij)]
    return ops.reshape(comp.attention_mlp(ops.concat(parts, axis=-1)), ())


def build_group(support, query, bank: Optional[AffineBank], comp: Comparator, extra_members=None) -> SimilarityGroup:
    """Global map plus N^2 local maps (and their attention weights) for one pair.

    ``support``/``query`` are FeatureSets. ``extra_members`` optionally supplies
    additional family members (e.g. handcrafted variants) per support map,
    as a list aligned with ``[global] + patches``.
    """

    def family(feature, slot):
        members = augment_family(feature, bank).members if bank is not None else [getattr(feature, "tensor", feature)]
        if extra_members is not None:
            members = members + list(extra_members[slot])
        return members

    g_map = similarity_map(query.global_map, family(support.global_map, 0), comp)
    locals_, weights = [], [] if comp.reweight else None
    for i, sp_i in enumerate(support.patches if comp.local_path else []):
        fam = family(sp_i, i + 1)
        row, wrow = [], []
        for j, qp_j in enumerate(query.patches):
            m = similarity_map(qp_j, fam, comp)
            row.append(m)
            if comp.reweight:
                fs = support.global_map if comp.attention_on_global else sp_i
                fq = query.global_map if comp.attention_on_global else qp_j
                wrow.append(attention_weight(fs, fq, m, comp))
        locals_.append(row)
        if comp.reweight:
            weights.append(wrow)
    return SimilarityGroup(g_map, locals_, weights)


def merge_score(group: SimilarityGroup, comp: Comparator) -> Tensor:
    """Weighted local maps in row-major (i, j) order, then the global map, through the merger."""
    parts = []
    for i, row in enumerate(group.locals):
        for j, m in enumerate(row):
            parts.append(ops.mul(m, group.weights[i][j]) if group.weights is not None else m)
    parts.append(group.global_map)
    return ops.reshape(comp.merge(ops.concat_channels(parts)), ())


def classify_query(pair_scores: Sequence[float], support_labels: Sequence[int], n_classes: Optional[int] = None):
    """Average pair scores per class; predict the argmax (lowest index on ties).

    Returns ``(predicted_class, per_class_scores)``.
    """
    scores = np.asarray(pair_scores, dtype=np.float64)
    labels = np.asarray(support_labels)
    n = int(labels.max()) + 1 if n_classes is None else n_classes
    per_class = np.empty(n)
    for c in range(n):
        sel = labels == c
        if not sel.any():
            raise ValueError(f"class {c} has no support examples")
        per_class[c] = scores[sel].mean()
    return int(np.argmax(per_class)), per_class


# ---------------------------------------------------------------- batched route


@dataclass
class EpisodeScores:
    scores: Tensor  # [Q, S]
    weights: Optional[Tensor]  # [Q, S, P, P] attention values, if re-weighting


def pair_index(n_query: int, n_support: int, n_patches: int):
    """Row indices of every similarity map in the batched layout.

    Global maps come first in (q, s) order, then local maps in (q, s, i, j)
    order. Returns ``(query_rows, support_rows)`` into the flattened
    ``[item, 1 + P]`` feature layouts.
    """
    P1 = 1 + n_patches
    q = np.repeat(np.arange(n_query), n_support)
    s = np.tile(np.arange(n_support), n_query)
    q_rows = [q * P1]
    s_rows = [s * P1]
    if n_patches:
        i, j = np.meshgrid(np.arange(n_patches), np.arange(n_patches), indexing="ij")
        i, j = i.ravel(), j.ravel()
        q_rows.append((q[:, None] * P1 + 1 + j[None, :]).ravel())
        s_rows.append((s[:, None] * P1 + 1 + i[None, :]).ravel())
    return np.concatenate(q_rows), np.concatenate(s_rows)


def score_episode(
    query_feats: Tensor,
    support_members: Sequence[Tensor],
    comp: Comparator,
) -> EpisodeScores:
    """Similarity scores of every (query, support) pair.

    ``query_feats`` is ``[Q, 1+P, C, h, w]``; ``support_members[k]`` is the
    k-th family member of every support map, ``[S, 1+P, C, h, w]`` (member 0
    being the un-augmented features).
    """
    Q, P1 = query_feats.shape[:2]
    S = support_members[0].shape[0]
    P = P1 - 1
    C, hh, ww = query_feats.shape[2:]
    n_members = len(support_members)
    if n_members != comp.n_members:
        raise ValueError(f"{n_members} family members, comparator expects {comp.n_members}")

    q_flat = ops.reshape(query_feats, (Q * P1, C, hh, ww))
    w_query = ops.getitem(comp.g.kernels, (slice(None), slice(0, C)))
    w_support = ops.getitem(comp.g.kernels, (slice(None), slice(C, 2 * C)))
    q_part = ops.conv2d(q_flat, w_query, None, padding=1)
    s_part = ops.conv2d(
        ops.concat([ops.reshape(m, (S * P1, C, hh, ww)) for m in support_members], axis=0),
        w_support, None, padding=1,
    )
    q_rows, s_rows = pair_index(Q, S, P)
    T = q_rows.size
    member_rows = (np.arange(n_members)[:, None] * (S * P1) + s_rows[None, :]).ravel()
    pre = ops.add(ops.take(s_part, member_rows), ops.take(q_part, np.tile(q_rows, n_members)))
    g_out = comp.g.normalize(pre)  # [(K+1)*T, Cg, h, w], member-major
    Cg = g_out.shape[1]
    h_in = ops.reshape(ops.transpose(ops.reshape(g_out, (n_members, T, Cg, hh, ww)), (1, 0, 2, 3, 4)),
                       (T, n_members * Cg, hh, ww))
    maps = comp.h(h_in)  # [T, Cm, hs, ws]
    Cm, hs, ws = maps.shape[1:]
    n_pairs = Q * S
    global_maps = ops.getitem(maps, slice(0, n_pairs))
    weights = None
    if P and comp.local_path:
        local_maps = ops.getitem(maps, slice(n_pairs, T))
        if comp.reweight:
            s_flat = ops.reshape(support_members[0], (S * P1, C, hh, ww))
            gap_s = ops.global_avg_pool(s_flat)
            gap_q = ops.global_avg_pool(q_flat)
            gap_m = ops.global_avg_pool(local_maps)
            lq, ls = q_rows[n_pairs:], s_rows[n_pairs:]
            if comp.attention_on_global:
                lq, ls = (lq // P1) * P1, (ls // P1) * P1
            att_in = ops.concat([ops.take(gap_s, ls), ops.take(gap_q, lq), gap_m], axis=-1)
            alpha = comp.attention_mlp(att_in)  # [n_pairs*P*P, 1]
            local_maps = ops.mul(local_maps, ops.reshape(alpha, (-1, 1, 1, 1)))
            weights = ops.reshape(alpha, (Q, S, P, P))
        merged_in = ops.concat_channels([
            ops.reshape(local_maps, (n_pairs, P * P * Cm, hs, ws)),
            global_maps,
        ])
    else:
        merged_in = global_maps
    scores = ops.reshape(comp.merge(merged_in), (Q, S))
    return EpisodeScores(scores, weights)
