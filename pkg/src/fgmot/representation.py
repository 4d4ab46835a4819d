"""Part-mask generation and conversion of feature maps into identity embeddings.

The mask-branch feature map is sliced into K channel blocks; each block runs
through its own attention branch that emits one soft spatial mask. The global
mask is the elementwise max over the K part masks. Masks pool the embedding-
branch feature map, and two non-shared fully connected heads produce the
global vector and the (shared-across-parts) part vectors.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .neural_blocks import AlignedPyramid, PyramidConfig

POOL_EPS = 1e-6


@dataclass
class TargetEmbedding:
    """Embeddings for a batch of targets, plus the masks that produced them.

    f_global: (N, d_global). f_part: (N, K, d_part) or None in pooled-average
    mode. Masks are kept for visualization and mask-dump export.
    """

    f_global: torch.Tensor
    f_part: torch.Tensor | None
    part_masks: torch.Tensor | None
    global_mask: torch.Tensor | None

    def concatenated(self) -> torch.Tensor:
        """Unit-norm identity vector: each component normalized, then stacked.

        The cosine of two stacked vectors is then the mean of the per-component
        cosines, so global and each part contribute equally to distances.
        """
        comps = [F.normalize(self.f_global, dim=-1)]
        if self.f_part is not None:
            n, k, d = self.f_part.shape
            comps.append(F.normalize(self.f_part, dim=-1).reshape(n, k * d))
        out = torch.cat(comps, dim=-1)
        return F.normalize(out, dim=-1)


class PartMaskGenerator(nn.Module):
    """One attention branch: scaled dot-product self-attention over positions,
    residual add, then a 1x1 conv + sigmoid producing a single-channel mask."""

    def __init__(self, channels: int):
        super().__init__()
        self.query = nn.Conv2d(channels, channels, 1)
        self.key = nn.Conv2d(channels, channels, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.mask_conv = nn.Conv2d(channels, 1, 1)
        self.scale = channels ** -0.5

    def forward(self, block):
        n, c, h, w = block.shape
        q = self.query(block).reshape(n, c, h * w)
        k = self.key(block).reshape(n, c, h * w)
        v = self.value(block).reshape(n, c, h * w)
        attn = torch.softmax(torch.einsum("nci,ncj->nij", q, k) * self.scale, dim=-1)
        refined = block + torch.einsum("ncj,nij->nci", v, attn).reshape(n, c, h, w)
        return torch.sigmoid(self.mask_conv(refined))


class MultiHeadMaskGenerator(nn.Module):
    """K parallel non-shared mask branches over contiguous channel blocks."""

    def __init__(self, channels: int, num_parts: int):
        super().__init__()
        if channels % num_parts != 0:
            raise ValueError("channels=%d not divisible by num_parts=%d" % (channels, num_parts))
        self.num_parts = num_parts
        self.block_channels = channels // num_parts
        self.branches = nn.ModuleList(PartMaskGenerator(self.block_channels) for _ in range(num_parts))

    def forward(self, f_mask):
        blocks = torch.split(f_mask, self.block_channels, dim=1)
        part = torch.cat([branch(b) for branch, b in zip(self.branches, blocks)], dim=1)
        global_mask = part.max(dim=1, keepdim=True).values
        return part, global_mask


def weighted_pool(features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mask-weighted spatial average: (N,C,H,W) x (N,1,H,W) -> (N,C).

    An epsilon in the normalizer keeps an (almost) all-zero mask from
    dividing by zero; the result then degrades to a near-zero vector.
    """
    num = (features * mask).sum(dim=(2, 3))
    den = mask.sum(dim=(2, 3)) + POOL_EPS
    return num / den


class TargetEncoder(nn.Module):
    """Per-target encoder: multi-scale ROI crops -> masks -> identity embeddings.

    ``use_part_masks=False`` switches to the coarse ablation head: the global
    vector is a plain spatial average of the embedding map and no part vectors
    are produced. ``cfg.align=False`` likewise downgrades the pyramid to plain
    upsample-and-sum fusion. Both flags exist for ablation runs.
    """

    def __init__(self, cfg: PyramidConfig, d_global: int = 256, d_part: int = 128,
                 use_part_masks: bool = True):
        super().__init__()
        self.cfg = cfg
        self.d_global = d_global
        self.d_part = d_part
        self.use_part_masks = use_part_masks
        self.pyramid = AlignedPyramid(cfg)
        cu = cfg.unified_channels
        if use_part_masks:
            self.masks = MultiHeadMaskGenerator(cu, cfg.num_parts)
            self.fc_part = nn.Linear(cu, d_part)
        else:
            self.masks = None
            self.fc_part = None
        self.fc_global = nn.Linear(cu, d_global)

    @property
    def embedding_dim(self) -> int:
        if self.use_part_masks:
            return self.d_global + self.cfg.num_parts * self.d_part
        return self.d_global

    def forward(self, crops) -> TargetEmbedding:
        f_mask, f_reid = self.pyramid(crops)
        if not self.use_part_masks:
            pooled = f_reid.mean(dim=(2, 3))
            return TargetEmbedding(self.fc_global(pooled), None, None, None)
        part_masks, global_mask = self.masks(f_mask)
        n, k, h, w = part_masks.shape
        pooled_parts = weighted_pool(
            f_reid.repeat_interleave(k, dim=0),
            part_masks.reshape(n * k, 1, h, w),
        ).reshape(n, k, -1)
        f_part = self.fc_part(pooled_parts)
        f_global = self.fc_global(weighted_pool(f_reid, global_mask))
        return TargetEmbedding(f_global, f_part, part_masks, global_mask)
