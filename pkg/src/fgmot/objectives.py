"""Training losses for the identity embeddings.

Five components: batch-hard soft-margin triplet on part and on global
features, identity classification on part and on global features, and a
diversity penalty that pushes the part vectors of one target apart. The
total is a fixed weighted sum (3, 0.3, 2 for part / global / diversity).
"""

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
NORM_FLOOR = 1e-12


@dataclass
class IdentityBatch:
    """One training batch: per-target embeddings plus integer identity labels."""

    f_part: torch.Tensor    # (N, K, d_part)
    f_global: torch.Tensor  # (N, d_global)
    labels: torch.Tensor    # (N,) int64 in [0, num_identities)

    def __post_init__(self):
        n = self.f_global.shape[0]
        if n < 2:
            raise ValueError("batch needs at least 2 targets, got %d" % n)
        if self.f_part.shape[0] != n or self.labels.shape != (n,):
            raise ValueError("inconsistent batch shapes")


@dataclass
class LossWeights:
    part: float = 3.0
    global_: float = 0.3
    diversity: float = 2.0

    def __post_init__(self):
        if min(self.part, self.global_, self.diversity) < 0:
            raise ValueError("loss weights must be nonnegative")


class IdentityClassifiers(nn.Module):
    """K per-part linear+softmax heads and one global head, all non-shared.

    Training-only: the identity count is fixed per run from the dataset's
    label set, so these weights are not required to run the tracker.
    """

    def __init__(self, num_parts: int, d_part: int, d_global: int, num_identities: int):
        super().__init__()
        self.num_identities = num_identities
        self.part_heads = nn.ModuleList(nn.Linear(d_part, num_identities) for _ in range(num_parts))
        self.global_head = nn.Linear(d_global, num_identities)

    def part_probs(self, f_part):
        """(N, K, d_part) -> (N, K, M) softmax probabilities, head k on slice k."""
        cols = [torch.softmax(head(f_part[:, k]), dim=-1) for k, head in enumerate(self.part_heads)]
        return torch.stack(cols, dim=1)

    def global_probs(self, f_global):
        return torch.softmax(self.global_head(f_global), dim=-1)


def _pairwise_euclidean(feats):
    # exact (non-mm) path: the brute-force oracle comparison is at 1e-9
    return torch.cdist(feats, feats, compute_mode="donot_use_mm_for_euclid_dist")


def soft_margin_triplet(feats: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batch-hard triplet with soft margin: mean softplus(d_ap - d_an).

    Per anchor, d_ap is the largest same-identity distance and d_an the
    smallest other-identity distance. Anchors lacking a positive or a
    negative are skipped; a batch with no valid anchor returns zero and is
    logged (it means the segment scheduler fed a degenerate batch).
    """
    n = feats.shape[0]
    dist = _pairwise_euclidean(feats)
    same = labels.view(1, n) == labels.view(n, 1)
    eye = torch.eye(n, dtype=torch.bool, device=feats.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    valid = pos_mask.any(dim=1) & neg_mask.any(dim=1)
    if not bool(valid.any()):
        log.warning("triplet batch has no anchor with both a positive and a negative")
        return feats.sum() * 0.0
    rows = dist[valid]
    d_ap = rows.masked_fill(~pos_mask[valid], float("-inf")).max(dim=1).values
    d_an = rows.masked_fill(~neg_mask[valid], float("inf")).min(dim=1).values
    return F.softplus(d_ap - d_an).mean()


def triplet_losses(batch: IdentityBatch):
    """(part, global) triplet losses; the part loss averages over the K slices."""
    k = batch.f_part.shape[1]
    per_slice = [soft_margin_triplet(batch.f_part[:, i], batch.labels) for i in range(k)]
    l_part = torch.stack(per_slice).mean()
    l_global = soft_margin_triplet(batch.f_global, batch.labels)
    return l_part, l_global


def nll_from_probs(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log true-class probability, probabilities floored at 1e-12."""
    picked = probs.gather(-1, labels.view(-1, *([1] * (probs.dim() - 1))).expand(*probs.shape[:-1], 1))
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def classification_losses(batch: IdentityBatch, classifiers: IdentityClassifiers):
    """(part, global) cross-entropy losses averaged over targets (and parts)."""
    if int(batch.labels.min()) < 0 or int(batch.labels.max()) >= classifiers.num_identities:
        raise ValueError("labels outside [0, %d)" % classifiers.num_identities)
    l_part = nll_from_probs(classifiers.part_probs(batch.f_part), batch.labels)
    l_global = nll_from_probs(classifiers.global_probs(batch.f_global), batch.labels)
    return l_part, l_global


def diversity_loss(f_part: torch.Tensor) -> torch.Tensor:
    """Mean cosine similarity over ordered pairs of distinct parts per target.

    Ranges over [-1, 1]; equals 1 when all parts of every target are
    positively collinear. Zero-norm vectors are guarded by a norm floor.
    """
    n, k, _ = f_part.shape
    if k < 2:
        raise ValueError("diversity needs at least 2 parts")
    unit = f_part / f_part.norm(dim=-1, keepdim=True).clamp_min(NORM_FLOOR)
    cos = torch.einsum("nkd,nld->nkl", unit, unit)
    off_diag = cos.sum() - cos.diagonal(dim1=1, dim2=2).sum()
    return off_diag / (n * k * (k - 1))


def total_loss(batch: IdentityBatch, classifiers: IdentityClassifiers,
               weights: LossWeights = LossWeights()):
    """Weighted sum of the five components; returns (total, components dict)."""
    tri_p, tri_g = triplet_losses(batch)
    cls_p, cls_g = classification_losses(batch, classifiers)
    div = diversity_loss(batch.f_part)
    total = (weights.part * (cls_p + tri_p)
             + weights.global_ * (cls_g + tri_g)
             + weights.diversity * div)
    components = {
        "cls_part": cls_p, "tri_part": tri_p,
        "cls_global": cls_g, "tri_global": tri_g,
        "diversity": div,
    }
    return total, components
