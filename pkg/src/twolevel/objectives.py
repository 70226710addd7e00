"""Contrastive losses for both hierarchy levels.

`nce_grouped` is an InfoNCE variant whose numerator sums over a per-anchor
positive SET (grouped positives), computed with log-sum-exp stabilization.
The child loss matches clip embeddings with narration embeddings; the parent
loss matches aggregated video and narration features against summary
embeddings (the two aggregate streams are never contrasted with each other
in the default variant).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError


def _validate_mask(mask: np.ndarray, b: int, require_diagonal: bool = True) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (b, b):
        raise ShapeError(f"positive mask shape {mask.shape}, expected ({b}, {b})")
    if not mask.any(axis=1).all():
        raise ContractError("positive mask has a row with no positives")
    if require_diagonal and not np.diagonal(mask).all():
        raise ContractError("positive mask diagonal must be all true")
    return mask


@dataclass
class ChildBatch:
    """Clip/narration embeddings plus the action-aware positive mask."""

    clip_embeddings: Tensor      # [B, embed_dim]
    narration_embeddings: Tensor  # [B, embed_dim]
    positive_mask: np.ndarray     # [B, B] bool; (i, j) true iff j positive for i

    def __post_init__(self):
        b = self.clip_embeddings.shape[0]
        if self.narration_embeddings.shape != self.clip_embeddings.shape:
            raise ShapeError(
                f"clip {self.clip_embeddings.shape} vs narration "
                f"{self.narration_embeddings.shape}"
            )
        self.positive_mask = _validate_mask(self.positive_mask, b)


@dataclass
class ParentBatch:
    """Aggregated video/narration features and summary embeddings."""

    video_embeddings: Tensor      # f_V, [B, embed_dim]
    narration_embeddings: Tensor  # f_N, [B, embed_dim]; may be unused by a variant
    summary_embeddings: Tensor    # f_n(S), [B, embed_dim]
    positive_mask: np.ndarray

    def __post_init__(self):
        b = self.video_embeddings.shape[0]
        for other in (self.narration_embeddings, self.summary_embeddings):
            if other.shape != self.video_embeddings.shape:
                raise ShapeError("parent batch embedding shapes disagree")
        self.positive_mask = _validate_mask(self.positive_mask, b)


def nce_grouped(
    anchors: Tensor,
    targets: Tensor,
    positive_mask: np.ndarray,
    temperature: float,
) -> Tensor:
    """Grouped-positive InfoNCE over one anchor direction.

    loss = -(1/B) sum_i log( sum_{j in P_i} exp(a_i.t_j / tau)
                             / sum_{j in B} exp(a_i.t_j / tau) )
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if anchors.ndim != 2 or anchors.shape != targets.shape:
        raise ShapeError(f"anchors {anchors.shape} vs targets {targets.shape}")
    b = anchors.shape[0]
    mask = _validate_mask(positive_mask, b, require_diagonal=False)
    logits = (anchors @ targets.transpose()) * (1.0 / temperature)
    lse_all = ad.logsumexp(logits, axis=1)
    lse_pos = ad.logsumexp(logits, axis=1, where=mask)
    return (lse_all - lse_pos).mean()


def child_loss(batch: ChildBatch, temperature: float, one_sided: bool = False) -> Tensor:
    """Clip<->narration loss; symmetrized over both anchor directions unless
    `one_sided`, which keeps only the clip-anchored direction."""
    v2t = nce_grouped(
        batch.clip_embeddings, batch.narration_embeddings, batch.positive_mask, temperature
    )
    if one_sided:
        return v2t
    t2v = nce_grouped(
        batch.narration_embeddings, batch.clip_embeddings, batch.positive_mask.T, temperature
    )
    return (v2t + t2v) * 0.5


def parent_loss(
    batch: ParentBatch, temperature: float, include_narration: bool = True
) -> Tensor:
    """Video->summary loss plus (unless ablated) narration->summary loss.

    The aggregated video and narration features are not contrasted with each
    other here; that pairing belongs to the no-summary ablation.
    """
    sv = nce_grouped(
        batch.video_embeddings, batch.summary_embeddings, batch.positive_mask, temperature
    )
    if not include_narration:
        return sv
    sn = nce_grouped(
        batch.narration_embeddings, batch.summary_embeddings, batch.positive_mask, temperature
    )
    return sv + sn


def parent_loss_no_summary(
    video_embeddings: Tensor, narration_embeddings: Tensor, temperature: float
) -> Tensor:
    """No-summary ablation: aggregated video vs aggregated narrations,
    diagonal positives."""
    b = video_embeddings.shape[0]
    return nce_grouped(
        video_embeddings, narration_embeddings, np.eye(b, dtype=bool), temperature
    )
