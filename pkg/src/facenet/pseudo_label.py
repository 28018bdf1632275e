"""Histogram-based flare statistics and pseudo-labels.

``delta`` is the fraction of near-saturated pixels (values 250..255) in an
image. An image whose delta exceeds the bar (default 10%) is treated as
flare-corrupted. No annotations are involved: the labels are recomputed
from raw pixels whenever images are available, at train and test time
alike. They supervise the mask classifier and gate the cross-modal
enhancement per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SATURATION_LOW = 250
SATURATION_HIGH = 255
DEFAULT_BAR = 0.10


@dataclass(frozen=True)
class FlarePseudoLabel:
    delta: float
    is_flare: bool
    bar: float = DEFAULT_BAR


def compute_delta(image) -> float:
    """Fraction of pixels with value in [250, 255].

    Multi-channel images are reduced to the per-pixel channel maximum
    first (the most flare-sensitive reduction). Values are assumed to
    live in [0, 255].
    """
    arr = np.asarray(image)
    if arr.size == 0:
        raise ValueError("compute_delta: empty image")
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    elif arr.ndim != 2:
        raise ValueError(f"compute_delta: expected HxW or HxWxC image, got shape {arr.shape}")
    bright = np.count_nonzero((arr >= SATURATION_LOW) & (arr <= SATURATION_HIGH))
    return bright / arr.size


def flare_label(delta: float, bar: float = DEFAULT_BAR) -> bool:
    """True iff delta is strictly greater than the bar.

    The boundary delta == bar counts as non-flare.
    """
    return delta > bar


def sample_flare_flag(rgb_delta: float, ni_delta: float, bar: float = DEFAULT_BAR) -> bool:
    """Per-sample gate: flare in either of the flare-susceptible spectra."""
    return flare_label(rgb_delta, bar) or flare_label(ni_delta, bar)


def label_image(image, bar: float = DEFAULT_BAR) -> FlarePseudoLabel:
    d = compute_delta(image)
    return FlarePseudoLabel(delta=d, is_flare=flare_label(d, bar), bar=bar)


def label_rows(triplets, bar: float = DEFAULT_BAR):
    """Per-sample label rows (sample_id, delta_rgb, delta_ni, is_flare).

    Duplicate sample ids (a sample listed under several splits) are
    emitted once, in first-occurrence order.
    """
    rows = []
    seen = set()
    for t in triplets:
        if t.sample_id in seen:
            continue
        seen.add(t.sample_id)
        d_rgb = compute_delta(t.rgb_image)
        d_ni = compute_delta(t.ni_image)
        rows.append((t.sample_id, d_rgb, d_ni, sample_flare_flag(d_rgb, d_ni, bar)))
    return rows
