"""Synthetic aligned RGB/NI/TI vehicle triplets with parametric flare.

Each identity gets a procedural vehicle template (body colour, cabin and
wheel layout, thermal signature) rendered consistently into the three
spectra with per-sample pose/brightness jitter and camera-dependent
backgrounds. With probability ``flare_probability`` a saturating radial
flare is composited onto RGB and NI at the same location; TI never
receives flare. Generation is deterministic in the config seed: the
appearance and flare random streams are kept separate so toggling flare
injection leaves all non-flare pixels (and every TI image) untouched.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageFilter

from .data_model import MANIFEST_NAME

TEMPLATE_MAX = 240  # template pixels stay below the saturation band
FLARE_GT_NAME = "flare_gt.csv"
NI_FLARE_SCALE = 0.8  # NI degrades less than RGB under the same flare


@dataclass
class SynthConfig:
    num_identities: int = 20
    samples_per_identity: int = 6
    image_size: tuple[int, int] = (128, 128)  # (H0, W0) of generated files
    flare_probability: float = 0.5
    flare_radius_range: tuple[int, int] = (26, 48)
    flare_peak: int = 255
    rng_seed: int = 0
    num_cameras: int = 2
    train_fraction: float = 0.5  # fraction of identities used for training
    query_fraction: float = 0.5  # fraction of each test identity's samples also listed as query

    def validate(self) -> None:
        h, w = self.image_size
        rmin, rmax = self.flare_radius_range
        if self.num_identities < 1:
            raise ValueError("num_identities must be >= 1")
        if self.samples_per_identity < 1:
            raise ValueError("samples_per_identity must be >= 1")
        if not 0.0 <= self.flare_probability <= 1.0:
            raise ValueError("flare_probability must lie in [0, 1]")
        if not 0 < rmin <= rmax:
            raise ValueError("flare_radius_range must be positive and ordered")
        if rmax >= min(h, w) // 2:
            raise ValueError("max flare radius must fit inside the image")
        if not 1 <= self.flare_peak <= 255:
            raise ValueError("flare_peak must be a uint8 intensity")
        if self.num_cameras < 1:
            raise ValueError("num_cameras must be >= 1")
        if not 0.0 <= self.train_fraction <= 1.0 or not 0.0 <= self.query_fraction <= 1.0:
            raise ValueError("fractions must lie in [0, 1]")


@dataclass
class FlareGroundTruth:
    sample_id: str
    flare_applied_rgb: bool
    flare_applied_ni: bool
    flare_center: tuple[int, int]  # (x, y)
    flare_radius: int


def _identity_template(cfg: SynthConfig, ident: int) -> dict:
    """Per-identity appearance parameters, deterministic in (seed, ident)."""
    rng = np.random.default_rng([cfg.rng_seed, 11, ident])
    color = rng.integers(40, 200, size=3)  # keep clear of the saturation band
    return {
        "color": color.astype(np.float64),
        "body_w": rng.uniform(0.55, 0.80),
        "body_h": rng.uniform(0.28, 0.40),
        "cabin_w": rng.uniform(0.30, 0.50),
        "cabin_h": rng.uniform(0.16, 0.26),
        "cabin_off": rng.uniform(-0.08, 0.08),
        "wheel_r": rng.uniform(0.05, 0.08),
        "window_shade": rng.uniform(0.25, 0.55),
        "light_sep": rng.uniform(0.18, 0.30),
        "ni_gain": rng.uniform(0.9, 1.2),
        "body_temp": rng.uniform(90, 150),
        "engine_temp": rng.uniform(165, 215),
        "wheel_temp": rng.uniform(120, 160),
    }


def _render_triplet(cfg: SynthConfig, tpl: dict, camera: int, rng: np.random.Generator):
    """Rasterize one observation of a template into (rgb, ni, ti_uint8)."""
    h, w = cfg.image_size
    yy, xx = np.mgrid[0:h, 0:w]

    # camera-specific backdrop with per-sample brightness and grain
    cam_rng = np.random.default_rng([cfg.rng_seed, 23, camera])
    bg_base = cam_rng.uniform(45, 95)
    bg_slope = cam_rng.uniform(-18, 18)
    bg = bg_base + bg_slope * (yy / max(h - 1, 1)) + rng.uniform(-8, 8)
    noise = rng.normal(0.0, 3.0, size=(h, w))

    rgb = np.repeat((bg + noise)[:, :, None], 3, axis=2)
    heat = np.full((h, w), 40.0) + noise * 0.5  # TI backdrop is cool

    # pose jitter
    scale = rng.uniform(0.9, 1.1)
    cx = 0.5 + rng.uniform(-0.06, 0.06)
    cy = 0.60 + rng.uniform(-0.05, 0.05)
    brightness = rng.uniform(0.9, 1.1)

    def box(cx_rel, cy_rel, bw, bh):
        x0 = int((cx_rel - bw / 2) * w)
        x1 = int((cx_rel + bw / 2) * w)
        y0 = int((cy_rel - bh / 2) * h)
        y1 = int((cy_rel + bh / 2) * h)
        return max(x0, 0), min(x1, w), max(y0, 0), min(y1, h)

    body_w, body_h = tpl["body_w"] * scale, tpl["body_h"] * scale
    color = np.clip(tpl["color"] * brightness, 0, TEMPLATE_MAX)

    # body
    x0, x1, y0, y1 = box(cx, cy, body_w, body_h)
    rgb[y0:y1, x0:x1] = color
    heat[y0:y1, x0:x1] = tpl["body_temp"]

    # cabin with window band
    cab_cy = cy - body_h / 2 - tpl["cabin_h"] * scale / 2 + 0.02
    x0c, x1c, y0c, y1c = box(cx + tpl["cabin_off"] * scale, cab_cy, tpl["cabin_w"] * scale, tpl["cabin_h"] * scale)
    rgb[y0c:y1c, x0c:x1c] = color * 0.85
    heat[y0c:y1c, x0c:x1c] = tpl["body_temp"] * 0.8
    win_h = max((y1c - y0c) // 2, 1)
    rgb[y0c:y0c + win_h, x0c:x1c] = color * tpl["window_shade"]

    # wheels
    wr = tpl["wheel_r"] * scale * min(h, w)
    for side in (-1, 1):
        wx = (cx + side * body_w * 0.32) * w
        wy = (cy + body_h / 2) * h
        disc = (xx - wx) ** 2 + (yy - wy) ** 2 <= wr ** 2
        rgb[disc] = 30.0
        heat[disc] = tpl["wheel_temp"]

    # headlights: bright but below the saturation band
    for side in (-1, 1):
        lx = (cx + side * tpl["light_sep"] * scale) * w
        ly = (cy + body_h * 0.18) * h
        spot = (xx - lx) ** 2 + (yy - ly) ** 2 <= (0.018 * min(h, w)) ** 2
        rgb[spot] = TEMPLATE_MAX

    # engine block drives the thermal hot spot
    x0e, x1e, y0e, y1e = box(cx, cy + body_h * 0.18, body_w * 0.5, body_h * 0.45)
    heat[y0e:y1e, x0e:x1e] = tpl["engine_temp"]

    rgb = np.clip(rgb, 0, TEMPLATE_MAX)
    ni = np.clip(rgb.mean(axis=2) * tpl["ni_gain"], 0, TEMPLATE_MAX)

    ti_img = Image.fromarray(np.clip(heat, 0, TEMPLATE_MAX).astype(np.uint8), mode="L")
    ti = np.asarray(ti_img.filter(ImageFilter.GaussianBlur(radius=2.0)), dtype=np.uint8)
    return rgb, ni, ti


def _composite_flare(rgb, ni, center, radius, peak):
    """Additive radial flare: fully saturating core, Gaussian falloff outside.

    Monotone by construction (never darkens a pixel).
    """
    h, w = rgb.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.sqrt((xx - center[0]) ** 2 + (yy - center[1]) ** 2)
    falloff = np.maximum(r - radius, 0.0)
    sigma = radius / 2.0
    add = peak * np.exp(-(falloff ** 2) / (2.0 * sigma ** 2))
    rgb = np.clip(rgb + add[:, :, None], 0, 255)
    ni = np.clip(ni + NI_FLARE_SCALE * add, 0, 255)
    return rgb, ni


def _assign_splits(cfg: SynthConfig):
    rng = np.random.default_rng([cfg.rng_seed, 31])
    perm = rng.permutation(cfg.num_identities)
    n_train = int(round(cfg.train_fraction * cfg.num_identities))
    return set(perm[:n_train].tolist()), rng


def generate(config: SynthConfig, out_dir) -> tuple[Path, list[FlareGroundTruth]]:
    """Write a synthetic dataset under ``out_dir``; return (manifest path, flare ground truth).

    Output follows the data_model directory layout plus ``flare_gt.csv``
    with columns sample_id,flare_rgb,flare_ni,cx,cy,radius.
    """
    config.validate()
    out = Path(out_dir)
    try:
        for sub in ("rgb", "ni", "ti"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory under {out}: {exc}") from exc

    train_ids, split_rng = _assign_splits(config)
    h, w = config.image_size
    rmin, rmax = config.flare_radius_range

    manifest_rows = []  # (sample_id, identity, camera, split)
    query_rows = []
    ground_truth: list[FlareGroundTruth] = []

    for ident in range(config.num_identities):
        tpl = _identity_template(config, ident)
        sample_ids = []
        for k in range(config.samples_per_identity):
            camera = k % config.num_cameras
            sid = f"{ident:04d}_c{camera}_{k:02d}"
            sample_ids.append((sid, camera))

            appearance_rng = np.random.default_rng([config.rng_seed, 41, ident, k])
            flare_rng = np.random.default_rng([config.rng_seed, 43, ident, k])

            rgb, ni, ti = _render_triplet(config, tpl, camera, appearance_rng)

            if flare_rng.random() < config.flare_probability:
                radius = int(flare_rng.integers(rmin, rmax + 1))
                cx = int(flare_rng.integers(radius, w - radius))
                cy = int(flare_rng.integers(radius, h - radius))
                rgb, ni = _composite_flare(rgb, ni, (cx, cy), radius, config.flare_peak)
                ground_truth.append(FlareGroundTruth(sid, True, True, (cx, cy), radius))

            Image.fromarray(rgb.astype(np.uint8), "RGB").save(out / "rgb" / f"{sid}.png")
            Image.fromarray(ni.astype(np.uint8), "L").save(out / "ni" / f"{sid}.png")
            Image.fromarray(ti, "L").save(out / "ti" / f"{sid}.png")

        if ident in train_ids:
            manifest_rows.extend((sid, ident, cam, "train") for sid, cam in sample_ids)
        else:
            manifest_rows.extend((sid, ident, cam, "gallery") for sid, cam in sample_ids)
            n_query = int(round(config.query_fraction * len(sample_ids)))
            q_idx = split_rng.choice(len(sample_ids), size=n_query, replace=False) if n_query else []
            query_rows.extend(
                (sample_ids[j][0], ident, sample_ids[j][1], "query") for j in sorted(q_idx)
            )

    manifest_rows.extend(query_rows)
    manifest_path = out / MANIFEST_NAME
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "identity", "camera", "split"])
        writer.writerows(manifest_rows)

    with open(out / FLARE_GT_NAME, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "flare_rgb", "flare_ni", "cx", "cy", "radius"])
        for gt in ground_truth:
            writer.writerow(
                [gt.sample_id, int(gt.flare_applied_rgb), int(gt.flare_applied_ni),
                 gt.flare_center[0], gt.flare_center[1], gt.flare_radius]
            )
    return manifest_path, ground_truth


def load_flare_gt(root) -> dict[str, FlareGroundTruth]:
    """Read flare_gt.csv back into a sample_id-keyed dict."""
    out: dict[str, FlareGroundTruth] = {}
    with open(Path(root) / FLARE_GT_NAME, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["sample_id"]] = FlareGroundTruth(
                sample_id=row["sample_id"],
                flare_applied_rgb=bool(int(row["flare_rgb"])),
                flare_applied_ni=bool(int(row["flare_ni"])),
                flare_center=(int(row["cx"]), int(row["cy"])),
                flare_radius=int(row["radius"]),
            )
    return out
