"""Mutual flare mask prediction.

``FmiCommon`` fuses the RGB and NI feature maps into a common
flare-corrupted representation (channel concat, a 3/3/1/3 conv stack, and
a pooled attention gate with a residual). ``MaskHead`` turns the common
feature and one spectrum's features into a soft flare mask via a
spatially flattened affine interaction and a sigmoid squashing conv, then
binarizes it against a learnable threshold with straight-through
gradients. ``SmpClassifier`` pools a mask into flare/no-flare logits
supervised by the histogram pseudo-label.

The two spectrum mask heads never share parameters. Disabling the mutual
interaction (mask predicted from a single spectrum) is expressed by
passing that spectrum's own features as ``common``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


class _BinarizeSTE(torch.autograd.Function):
    """Heaviside step in the forward pass, identity gradient in the backward."""

    @staticmethod
    def forward(ctx, x):
        return (x > 0).to(x.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output


def binarize_ste(soft: torch.Tensor, threshold: torch.Tensor) -> torch.Tensor:
    """Indicator(soft > sigmoid(threshold)) with straight-through gradients.

    The threshold lives in logit space so the comparison happens in (0, 1);
    it receives gradient through the sigmoid.
    """
    return _BinarizeSTE.apply(soft - torch.sigmoid(threshold))


@dataclass
class FlareMask:
    soft: torch.Tensor        # B x C x H x W in (0, 1)
    binary: torch.Tensor      # same shape, values {0, 1}
    threshold: torch.Tensor   # learnable scalar (logit space)
    interacted: torch.Tensor  # affine-interaction feature; the branch input when enhancement is skipped


class FmiCommon(nn.Module):
    """Fuse RGB and NI feature maps into a common flare representation."""

    def __init__(self, channels: int):
        super().__init__()
        c = channels
        self.fuse = nn.Sequential(
            nn.Conv2d(2 * c, c, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 1), nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1), nn.ReLU(),
        )
        self.attention = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(c, c, 1), nn.ReLU(),
            nn.Conv2d(c, c, 1), nn.Sigmoid(),
        )

    def forward(self, f_rgb: torch.Tensor, f_ni: torch.Tensor) -> torch.Tensor:
        if f_rgb.shape != f_ni.shape:
            raise ValueError(f"feature shapes differ: {tuple(f_rgb.shape)} vs {tuple(f_ni.shape)}")
        fused = self.fuse(torch.cat((f_rgb, f_ni), dim=1))
        att = self.attention(fused)  # B x C x 1 x 1, broadcast over space
        return att * fused + fused


class MaskHead(nn.Module):
    """Per-spectrum flare mask from the common feature and that spectrum's features.

    With ``channelwise`` the mask carries one value per channel position;
    otherwise a single spatial map is produced and broadcast downstream.
    """

    def __init__(self, channels: int, channelwise: bool = True):
        super().__init__()
        self.common_proj = nn.Conv2d(channels, channels, 1)
        self.feature_proj = nn.Conv2d(channels, channels, 1)
        self.squash = nn.Conv2d(channels, channels if channelwise else 1, 1)
        self.threshold = nn.Parameter(torch.zeros(()))
        self.mask_channels = channels if channelwise else 1

    def forward(self, common: torch.Tensor, f_s: torch.Tensor) -> FlareMask:
        if common.shape != f_s.shape:
            raise ValueError(f"feature shapes differ: {tuple(common.shape)} vs {tuple(f_s.shape)}")
        b, c, h, w = f_s.shape
        m_com = self.common_proj(common).flatten(2)   # B x C x H*W
        s_flat = self.feature_proj(f_s).flatten(2)
        affine = m_com * s_flat + s_flat
        interacted = affine.view(b, c, h, w)
        soft = torch.sigmoid(self.squash(interacted * f_s + f_s))
        binary = binarize_ste(soft, self.threshold)
        return FlareMask(soft=soft, binary=binary, threshold=self.threshold, interacted=interacted)


class SmpClassifier(nn.Module):
    """Flare/no-flare logits from a pooled soft mask."""

    def __init__(self, mask_channels: int):
        super().__init__()
        self.head = nn.Linear(mask_channels, 2)

    def forward(self, mask_soft: torch.Tensor) -> torch.Tensor:
        return self.head(mask_soft.mean(dim=(2, 3)))


def loss_flare(logits: torch.Tensor, is_flare: torch.Tensor) -> torch.Tensor:
    """Mean two-class cross-entropy against the pseudo-label (class 1 = flare)."""
    if not torch.is_floating_point(logits) or logits.ndim != 2 or logits.shape[1] != 2:
        raise ValueError(f"expected B x 2 float logits, got {tuple(logits.shape)}")
    return F.cross_entropy(logits, is_flare.long())
