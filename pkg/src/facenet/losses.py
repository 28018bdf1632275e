"""Training objectives: identity CE, batch-hard triplet, inter-modality
consistency, and the unit-weighted total.

The consistency loss takes the smaller of the two directed KL divergences
between the RGB and NI class-score distributions (natural log, softmax
with an epsilon clamp). The triplet loss mines, per anchor, the hardest
positive (max distance, same identity) and hardest negative (min
distance, other identity) under Euclidean distance, and averages the
hinge over anchors; spectra are summed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

PROB_EPS = 1e-8
DEFAULT_MARGIN = 0.3
_DIST_EPS = 1e-12  # keeps sqrt differentiable at zero distance


@dataclass
class LossBreakdown:
    l_id: torch.Tensor
    l_tri: torch.Tensor
    l_f: torch.Tensor
    l_ic: torch.Tensor
    l_all: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_id", "l_tri", "l_f", "l_ic", "l_all")}


def score_distribution(scores: torch.Tensor, eps: float = PROB_EPS) -> torch.Tensor:
    """Softmax over classes with entries clamped away from zero."""
    return torch.softmax(scores, dim=-1).clamp_min(eps)


def loss_identity(scores_per_spectrum: Sequence[torch.Tensor], labels: torch.Tensor) -> torch.Tensor:
    """Sum over spectra of the batch-mean cross-entropy."""
    num_classes = scores_per_spectrum[0].shape[-1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    total = None
    for scores in scores_per_spectrum:
        term = F.cross_entropy(scores, labels)
        total = term if total is None else total + term
    return total


def pairwise_distances(embeddings: torch.Tensor) -> torch.Tensor:
    diff = embeddings.unsqueeze(1) - embeddings.unsqueeze(0)
    return torch.sqrt(diff.pow(2).sum(-1) + _DIST_EPS)


def _batch_hard(embeddings: torch.Tensor, labels: torch.Tensor, margin: float) -> torch.Tensor:
    dist = pairwise_distances(embeddings)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    if not pos_mask.any(dim=1).all():
        raise ValueError("anchor without a positive; batch must be P x K with K >= 2")
    if not neg_mask.any(dim=1).all():
        raise ValueError("anchor without a negative; batch needs >= 2 identities")
    hardest_pos = dist.masked_fill(~pos_mask, float("-inf")).max(dim=1).values
    hardest_neg = dist.masked_fill(~neg_mask, float("inf")).min(dim=1).values
    return F.relu(margin + hardest_pos - hardest_neg).mean()


def loss_triplet(
    embeddings_per_spectrum: Sequence[torch.Tensor],
    labels: torch.Tensor,
    margin: float = DEFAULT_MARGIN,
) -> torch.Tensor:
    """Sum over spectra of the batch-hard triplet hinge."""
    total = None
    for emb in embeddings_per_spectrum:
        term = _batch_hard(emb, labels, margin)
        total = term if total is None else total + term
    return total


def loss_ic(
    scores_rgb: torch.Tensor,
    scores_ni: torch.Tensor,
    eps: float = PROB_EPS,
    reduction: str = "per_sample",
) -> torch.Tensor:
    """Smaller of the two directed KL divergences between RGB and NI scores.

    ``per_sample`` takes the min per sample and averages over the batch;
    ``per_batch`` averages each direction first and takes the min once.
    """
    if scores_rgb.shape != scores_ni.shape:
        raise ValueError(f"score shapes differ: {tuple(scores_rgb.shape)} vs {tuple(scores_ni.shape)}")
    p = score_distribution(scores_rgb, eps)
    q = score_distribution(scores_ni, eps)
    kl_pq = (p * (p.log() - q.log())).sum(dim=-1)
    kl_qp = (q * (q.log() - p.log())).sum(dim=-1)
    if reduction == "per_sample":
        return torch.minimum(kl_pq, kl_qp).mean()
    if reduction == "per_batch":
        return torch.minimum(kl_pq.mean(), kl_qp.mean())
    raise ValueError(f"unknown reduction {reduction!r}")


def loss_total(
    l_id: torch.Tensor,
    l_tri: torch.Tensor,
    l_f: torch.Tensor,
    l_ic: torch.Tensor,
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0),
) -> LossBreakdown:
    w_id, w_tri, w_f, w_ic = weights
    l_all = w_id * l_id + w_tri * l_tri + w_f * l_f + w_ic * l_ic
    return LossBreakdown(l_id=l_id, l_tri=l_tri, l_f=l_f, l_ic=l_ic, l_all=l_all)
