"""Flare-aware cross-modal enhancement.

Composites flare-immunized TI features into the masked regions of an
RGB/NI feature map: ``f_ti * M + f_s * (1 - M)``, applied only to samples
whose flare pseudo-label is set. Skipped samples pass through
bit-identically. The map is purely elementwise: every output cell lies
between the corresponding input cells for masks in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class EnhancedFeature:
    values: torch.Tensor
    spectrum: str
    enhanced_flags: torch.Tensor  # per-sample bool, True where compositing ran


def enhance(
    f_s: torch.Tensor,
    f_t: torch.Tensor,
    mask: torch.Tensor,
    apply: torch.Tensor,
    spectrum: str = "rgb",
) -> EnhancedFeature:
    """Mask-gated compositing of TI features into one spectrum's features.

    ``mask`` may be the soft or the binarized flare mask (values in
    [0, 1]; a single-channel mask broadcasts over channels). ``apply`` is
    the per-sample gate from the flare pseudo-label.
    """
    if f_s.shape != f_t.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_s.shape)} vs {tuple(f_t.shape)}")
    if mask.ndim != f_s.ndim or mask.shape[0] != f_s.shape[0] or mask.shape[2:] != f_s.shape[2:]:
        raise ValueError(f"mask shape {tuple(mask.shape)} incompatible with {tuple(f_s.shape)}")
    if mask.shape[1] not in (1, f_s.shape[1]):
        raise ValueError(f"mask channels {mask.shape[1]} incompatible with {f_s.shape[1]}")
    lo, hi = mask.min(), mask.max()
    if lo < 0 or hi > 1:
        raise ValueError(f"mask values outside [0, 1]: min={float(lo)}, max={float(hi)}")
    apply = apply.to(torch.bool)
    if apply.shape != (f_s.shape[0],):
        raise ValueError(f"apply must be one flag per sample, got shape {tuple(apply.shape)}")

    blended = f_t * mask + f_s * (1.0 - mask)
    values = torch.where(apply.view(-1, 1, 1, 1), blended, f_s)
    return EnhancedFeature(values=values, spectrum=spectrum, enhanced_flags=apply)
