"""Image-text contrastive, matching and generation losses and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    itc: float = 1.0
    itm: float = 0.5
    itg: float = 0.10
    tau: float = 0.07
    symmetric_itc: bool = True

    def __post_init__(self):
        if min(self.itc, self.itm, self.itg) < 0:
            raise ValueError("loss weights must be non-negative")
        if max(self.itc, self.itm, self.itg) <= 0:
            raise ValueError("at least one loss weight must be positive")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")


def similarity_matrix(f_i: Tensor, f_t: Tensor) -> Tensor:
    """Cosine similarities [B_img, B_txt].

    ``f_i`` may be [B, d] or per-query [B, N, d]; with queries, each pair
    scores the best-matching query.
    """
    t = T.l2_normalize(f_t)
    if f_i.ndim == 2:
        return T.matmul(T.l2_normalize(f_i), T.transpose(t))
    b, n, d = f_i.shape
    per_query = T.matmul(T.reshape(T.l2_normalize(f_i), (b * n, d)), T.transpose(t))
    return T.max(T.reshape(per_query, (b, n, t.shape[0])), axis=1)


def itc_from_similarity(sim: Tensor, tau: float, symmetric: bool = True) -> Tensor:
    """InfoNCE over a square similarity matrix whose diagonal holds the positives."""
    b = sim.shape[0]
    if sim.shape != (b, b):
        raise T.ShapeError(f"similarity matrix must be square, got {sim.shape}")
    logits = T.scale(sim, 1.0 / tau)
    targets = np.arange(b)
    i2t = T.cross_entropy(logits, targets)
    if not symmetric:
        return i2t
    t2i = T.cross_entropy(T.transpose(logits), targets)
    return T.scale(T.add(i2t, t2i), 0.5)


def itc_loss(f_i: Tensor, f_t: Tensor, tau: float = 0.07, symmetric: bool = True) -> Tensor:
    if f_i.shape[0] != f_t.shape[0]:
        raise T.ShapeError(f"batch sizes differ: {f_i.shape} vs {f_t.shape}")
    return itc_from_similarity(similarity_matrix(f_i, f_t), tau, symmetric)


MATCH, NO_MATCH = 1, 0


def itm_loss(itm_logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy in softmax form; label 1 = matched pair."""
    labels = np.asarray(labels, dtype=np.int64)
    if itm_logits.shape != (labels.shape[0], 2):
        raise T.ShapeError(f"ITM logits must be [B, 2], got {itm_logits.shape}")
    return T.cross_entropy(itm_logits, labels)


def itg_loss(logits: Tensor, targets, valid=None) -> Tensor:
    """Per-sequence summed next-token NLL, averaged over the batch; invalid positions ignored."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise T.ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    weights = None if valid is None else np.asarray(valid, dtype=np.float64)
    total = T.cross_entropy(logits, targets, weights=weights, reduction="sum")
    return T.scale(total, 1.0 / targets.shape[0])


def total_loss(itc: Tensor, itm: Tensor, itg: Tensor, weights: LossWeights) -> Tensor:
    return T.add(T.add(T.scale(itc, weights.itc), T.scale(itm, weights.itm)), T.scale(itg, weights.itg))


def itm_pairing(captions: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """Partner caption index and match label per image.

    The first half keeps its own caption; each image in the second half is
    paired with the caption ``B // 2`` positions ahead (mod B). Pairs that
    happen to share identical caption text count as matches.
    """
    b = len(captions)
    half = b // 2
    partner = np.arange(b)
    if half:
        for i in range(b - half, b):
            partner[i] = (i + half) % b
    labels = np.array([MATCH if captions[partner[i]] == captions[i] else NO_MATCH for i in range(b)])
    return partner, labels
