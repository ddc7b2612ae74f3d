"""Classification, attention-sparsity and augmentation losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .nn import Tensor, ops
from .nn.tensor import as_tensor

LAMBDA_ATT = 0.1
LAMBDA_AUG = 0.1


@dataclass
class LossBreakdown:
    cls: Tensor
    att: Tensor
    aug: Tensor
    total: Tensor
    lambda_att: float = LAMBDA_ATT
    lambda_aug: float = LAMBDA_AUG

    def values(self) -> tuple[float, float, float, float]:
        return self.cls.item(), self.att.item(), self.aug.item(), self.total.item()


def prob_score(o) -> Tensor:
    return ops.sigmoid(o)


def same_class(query_labels: Sequence[int], support_labels: Sequence[int], strict: bool = True) -> np.ndarray:
    """``[B, C]`` indicator of matching labels (queries x supports).

    ``strict`` rejects query labels that no support example carries.
    """
    q = np.asarray(query_labels)
    s = np.asarray(support_labels)
    if q.ndim != 1 or s.ndim != 1:
        raise ValueError("labels must be 1-D sequences")
    if strict and not set(q.tolist()) <= set(s.tolist()):
        raise ValueError(f"query labels {sorted(set(q.tolist()) - set(s.tolist()))} have no support examples")
    return (q[:, None] == s[None, :]).astype(np.float64)


def loss_cls(P, query_labels, support_labels) -> Tensor:
    """Mean squared gap between pair probabilities and the same-class indicator."""
    P = as_tensor(P)
    target = same_class(query_labels, support_labels)
    if P.shape != target.shape:
        raise ValueError(f"P has shape {P.shape}, labels imply {target.shape}")
    return ops.mean(ops.square(ops.sub(P, target)))


def loss_att(weights, s_att: float = 1.0) -> Tensor:
    """``s_att`` times the mean absolute attention weight."""
    w = as_tensor(weights)
    return ops.mul(ops.mean(ops.absolute(w)), s_att)


def loss_aug(
    query_features: Tensor,
    augmented_support: Sequence[Tensor],
    query_labels,
    support_labels,
    s_aug: Optional[float] = None,
) -> Tensor:
    """Squared distance between same-class query features and learned support variants.

    ``query_features`` is ``[B, C, h, w]``; ``augmented_support`` holds the
    learned members ``k = 1..K`` only, each ``[C_support, C, h, w]``. The
    default scale is one over the per-map element count.
    """
    mask = same_class(query_labels, support_labels, strict=False)
    B, Cs = mask.shape
    qi, si = np.nonzero(mask)
    if qi.size == 0 or not augmented_support:
        return Tensor(0.0)
    if s_aug is None:
        s_aug = 1.0 / float(np.prod(query_features.shape[1:]))
    total = None
    for member in augmented_support:
        diff = ops.sub(ops.take(query_features, qi), ops.take(member, si))
        term = ops.sum_(ops.square(diff))
        total = term if total is None else ops.add(total, term)
    return ops.mul(total, s_aug / (B * Cs))


def total_loss(
    l_cls: Tensor,
    l_att: Tensor,
    l_aug: Tensor,
    lambda_att: float = LAMBDA_ATT,
    lambda_aug: float = LAMBDA_AUG,
) -> LossBreakdown:
    l_cls, l_att, l_aug = as_tensor(l_cls), as_tensor(l_att), as_tensor(l_aug)
    total = ops.add(ops.add(l_cls, ops.mul(l_att, lambda_att)), ops.mul(l_aug, lambda_aug))
    return LossBreakdown(l_cls, l_att, l_aug, total, lambda_att, lambda_aug)
