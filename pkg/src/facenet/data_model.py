"""Dataset sample types, manifest IO, and the P x K batch sampler.

Directory layout::

    root/
      manifest.csv          # header: sample_id,identity,camera,split
      rgb/<sample_id>.png   # 3-channel
      ni/<sample_id>.png    # 1-channel
      ti/<sample_id>.png    # 1-channel

``split`` is one of train / gallery / query. A sample listed as query must
also be listed as gallery (two rows). All public functions are pure in
(inputs, seed) and safe to call from multiple threads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

DEFAULT_IMAGE_HW = (256, 128)  # network input (height, width)
MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ("sample_id", "identity", "camera", "split")
SPLITS = ("train", "gallery", "query")


class IngestionError(RuntimeError):
    """A manifest row could not be loaded (missing file, bad value)."""


class ValidationError(RuntimeError):
    """Loaded data violates a dataset invariant."""


@dataclass
class SpectralTriplet:
    """Aligned RGB/NI/TI images of one vehicle observation."""

    sample_id: str
    identity: int
    camera: int
    rgb_image: np.ndarray  # H x W x 3 uint8
    ni_image: np.ndarray   # H x W uint8
    ti_image: np.ndarray   # H x W uint8


@dataclass
class Batch:
    triplets: list[SpectralTriplet]
    P: int  # identities per batch
    K: int  # images per identity


@dataclass
class DatasetSplit:
    train_ids: set[int]
    gallery_samples: list[str]
    query_samples: list[str]


def _manifest_path(path) -> Path:
    p = Path(path)
    return p / MANIFEST_NAME if p.is_dir() else p


def _read_rows(manifest: Path):
    if not manifest.is_file():
        raise IngestionError(f"manifest not found: {manifest}")
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise IngestionError(f"manifest {manifest} lacks columns: {sorted(missing)}")
        rows = list(reader)
    for i, row in enumerate(rows):
        if row["split"] not in SPLITS:
            raise IngestionError(f"manifest row {i} ({row['sample_id']}): bad split {row['split']!r}")
    return rows


def _decode(path: Path, mode: str, image_hw, sample_id: str, spectrum: str):
    if not path.is_file():
        raise IngestionError(f"sample {sample_id}: missing {spectrum} image {path}")
    with Image.open(path) as img:
        img = img.convert(mode)
        size = img.size  # (W, H) before resize
        h, w = image_hw
        img = img.resize((w, h), Image.BILINEAR)
        return np.asarray(img, dtype=np.uint8), size


def load_manifest(path, image_hw=DEFAULT_IMAGE_HW) -> list[SpectralTriplet]:
    """Load one SpectralTriplet per manifest row, preserving row order.

    ``path`` is the manifest CSV or the dataset root containing it. Images
    are decoded, checked for identical raw dimensions across the three
    spectra, and bilinearly resized to ``image_hw``.
    """
    manifest = _manifest_path(path)
    root = manifest.parent
    triplets = []
    for i, row in enumerate(_read_rows(manifest)):
        sid = row["sample_id"]
        try:
            identity = int(row["identity"])
            camera = int(row["camera"])
        except ValueError as exc:
            raise IngestionError(f"manifest row {i} ({sid}): non-integer label") from exc
        if identity < 0 or camera < 0:
            raise ValidationError(f"sample {sid}: negative identity/camera label")
        rgb, size_rgb = _decode(root / "rgb" / f"{sid}.png", "RGB", image_hw, sid, "rgb")
        ni, size_ni = _decode(root / "ni" / f"{sid}.png", "L", image_hw, sid, "ni")
        ti, size_ti = _decode(root / "ti" / f"{sid}.png", "L", image_hw, sid, "ti")
        if not (size_rgb == size_ni == size_ti):
            raise ValidationError(
                f"sample {sid}: spectra dimensions differ "
                f"(rgb={size_rgb}, ni={size_ni}, ti={size_ti})"
            )
        triplets.append(SpectralTriplet(sid, identity, camera, rgb, ni, ti))
    return triplets


def load_split(path) -> DatasetSplit:
    """Read the split assignment and check its invariants."""
    manifest = _manifest_path(path)
    rows = _read_rows(manifest)
    train_ids, test_ids = set(), set()
    gallery, query = [], []
    for row in rows:
        ident = int(row["identity"])
        if row["split"] == "train":
            train_ids.add(ident)
        elif row["split"] == "gallery":
            gallery.append(row["sample_id"])
            test_ids.add(ident)
        else:
            query.append(row["sample_id"])
            test_ids.add(ident)
    overlap = train_ids & test_ids
    if overlap:
        raise ValidationError(f"identities in both train and gallery/query: {sorted(overlap)[:5]}")
    missing = set(query) - set(gallery)
    if missing:
        raise ValidationError(f"query samples not present in gallery: {sorted(missing)[:5]}")
    return DatasetSplit(train_ids=train_ids, gallery_samples=gallery, query_samples=query)


def group_by_identity(dataset) -> dict[int, list[SpectralTriplet]]:
    groups: dict[int, list[SpectralTriplet]] = {}
    for t in dataset:
        groups.setdefault(t.identity, []).append(t)
    return groups


def sample_pk_batch(dataset, P: int, K: int, rng_seed: int) -> Batch:
    """Draw P distinct identities with K images each, deterministic in seed.

    Identities holding fewer than K images are up-sampled with
    replacement.
    """
    if P < 1 or K < 1:
        raise ValueError("P and K must be positive")
    groups = group_by_identity(dataset)
    if len(groups) < P:
        raise ValueError(f"need {P} identities, dataset has {len(groups)}")
    rng = np.random.default_rng(rng_seed)
    identities = sorted(groups)
    chosen = rng.choice(len(identities), size=P, replace=False)
    picked: list[SpectralTriplet] = []
    for gi in chosen:
        items = groups[identities[gi]]
        idx = rng.choice(len(items), size=K, replace=len(items) < K)
        picked.extend(items[j] for j in idx)
    return Batch(triplets=picked, P=P, K=K)


def check_batch(batch: Batch) -> None:
    """Raise ValidationError unless the batch satisfies the P x K invariant."""
    if len(batch.triplets) != batch.P * batch.K:
        raise ValidationError(f"batch size {len(batch.triplets)} != P*K = {batch.P * batch.K}")
    counts: dict[int, int] = {}
    for t in batch.triplets:
        counts[t.identity] = counts.get(t.identity, 0) + 1
    bad = {i: c for i, c in counts.items() if c != batch.K}
    if len(counts) != batch.P or bad:
        raise ValidationError(f"batch identity multiplicities off: {bad or counts}")


def unique_by_sample_id(triplets) -> dict[str, SpectralTriplet]:
    """First occurrence per sample_id (manifest may list a sample twice)."""
    out: dict[str, SpectralTriplet] = {}
    for t in triplets:
        out.setdefault(t.sample_id, t)
    return out
