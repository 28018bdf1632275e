"""End-to-end training: configuration, module wiring, optimization loop,
evaluation cadence, and checkpointing.

Per step the three spectrum encoders run to the plug layer; with masks
enabled the RGB/NI features pass through the mutual interaction and mask
heads, optionally get thermal content composited into masked regions
(gated per sample by the flare pseudo-label), and continue to embeddings
and identity scores. Ablation flags construct only the components they
enable, so disabled parts contribute no parameters to the optimizer.

Randomness (batch sampling, flips) is derived from (seed, global step),
which makes runs reproducible and checkpoints resumable mid-schedule.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import FLARE_SPECTRA, SPECTRA
from .backbone import BackboneConfig, ClassifierHead, SpectrumEncoder, stage_shapes
from .data_model import Batch, load_manifest, load_split, sample_pk_batch, unique_by_sample_id
from .evaluator import EmbeddingRecord, evaluate, rank_queries
from .fce import enhance
from .losses import LossBreakdown, loss_ic, loss_identity, loss_total, loss_triplet
from .mfmp import FmiCommon, MaskHead, SmpClassifier, loss_flare
from .pseudo_label import DEFAULT_BAR, compute_delta, flare_label, sample_flare_flag


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 120
    lr: float = 3.5e-4
    lr_decay_epochs: tuple[int, int] = (40, 70)
    lr_decay_factor: float = 0.1
    P: int = 8
    K: int = 4
    margin: float = 0.3
    plug_layer: int = 4
    use_mfmp: bool = True
    use_fmi: bool = True
    use_fce: bool = True
    use_ic: bool = True
    seed: int = 0
    fce_mask_mode: str = "binary"     # binary | soft
    ic_reduction: str = "per_sample"  # per_sample | per_batch
    variant: str = "tiny"             # tiny | resnet50-shape
    embedding_dim: int = 128
    image_h: int = 256
    image_w: int = 128
    mask_channelwise: bool = True
    flare_bar: float = DEFAULT_BAR
    flip_prob: float = 0.5
    eval_every: int = 10
    w_id: float = 1.0
    w_tri: float = 1.0
    w_f: float = 1.0
    w_ic: float = 1.0

    def validate(self) -> None:
        if self.use_fce and not self.use_mfmp:
            raise ValueError("use_fce requires use_mfmp (enhancement consumes the predicted masks)")
        if self.fce_mask_mode not in ("binary", "soft"):
            raise ValueError(f"bad fce_mask_mode {self.fce_mask_mode!r}")
        if self.ic_reduction not in ("per_sample", "per_batch"):
            raise ValueError(f"bad ic_reduction {self.ic_reduction!r}")
        if self.epochs < 1 or self.P < 1 or self.K < 1:
            raise ValueError("epochs, P, K must be positive")
        BackboneConfig(self.variant, self.plug_layer, self.embedding_dim).validate()

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            variant=self.variant, plug_layer=self.plug_layer, embedding_dim=self.embedding_dim
        )


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Stepped schedule: the base rate decays by the configured factor at
    each decay epoch (inclusive). Stage values are decimal-normalized so
    e.g. 3.5e-4 decays to exactly 3.5e-5 and 3.5e-6."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    n = sum(epoch >= e for e in config.lr_decay_epochs)
    return float(f"{config.lr * config.lr_decay_factor ** n:.12g}")


# --- flat key=value config files -------------------------------------------

def _parse_value(field_type: str, text: str):
    text = text.strip()
    if field_type == "int":
        return int(text)
    if field_type == "float":
        return float(text)
    if field_type == "bool":
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"bad boolean {text!r}")
    if field_type.startswith("tuple"):
        return tuple(int(p) for p in text.replace("(", "").replace(")", "").split(","))
    return text


def parse_config_file(path, base: TrainConfig | None = None) -> TrainConfig:
    """Read a flat ``key = value`` file ('#' starts a comment)."""
    cfg = base or TrainConfig()
    by_name = {f.name: f for f in fields(TrainConfig)}
    overrides = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in by_name:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        overrides[key] = _parse_value(by_name[key].type, value)
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def write_config_file(config: TrainConfig, path) -> None:
    lines = []
    for f in fields(TrainConfig):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


# --- model assembly ---------------------------------------------------------

@dataclass
class ForwardOutput:
    embeddings: dict[str, torch.Tensor]
    scores: dict[str, torch.Tensor]
    masks: dict | None
    smp_logits: dict[str, torch.Tensor] | None


class FacenetModel(nn.Module):
    """Three spectrum branches wired through the configured components."""

    def __init__(self, config: TrainConfig, num_classes: int):
        super().__init__()
        config.validate()
        self.config = config
        self.num_classes = num_classes
        bcfg = config.backbone()
        self.encoders = nn.ModuleDict({s: SpectrumEncoder(s, bcfg) for s in SPECTRA})
        self.classifiers = nn.ModuleDict(
            {s: ClassifierHead(config.embedding_dim, num_classes) for s in SPECTRA}
        )
        if config.use_mfmp:
            plug_c = stage_shapes(bcfg, (config.image_h, config.image_w))[config.plug_layer - 1][0]
            if config.use_fmi:
                self.fmi = FmiCommon(plug_c)
            self.mask_heads = nn.ModuleDict(
                {s: MaskHead(plug_c, config.mask_channelwise) for s in FLARE_SPECTRA}
            )
            self.smp_heads = nn.ModuleDict(
                {s: SmpClassifier(self.mask_heads[s].mask_channels) for s in FLARE_SPECTRA}
            )

    def spectrum_features(self, images: dict[str, torch.Tensor], apply_flags: torch.Tensor) -> ForwardOutput:
        cfg = self.config
        feats, conts = {}, {}
        for s in SPECTRA:
            feats[s], conts[s] = self.encoders[s].extract(images[s])
        branch = dict(feats)
        masks = smp_logits = None
        if cfg.use_mfmp:
            masks, smp_logits = {}, {}
            common = self.fmi(feats["rgb"], feats["ni"]) if cfg.use_fmi else None
            for s in FLARE_SPECTRA:
                mask = self.mask_heads[s](feats[s] if common is None else common, feats[s])
                masks[s] = mask
                smp_logits[s] = self.smp_heads[s](mask.soft)
                base = mask.interacted
                if cfg.use_fce:
                    m = mask.binary if cfg.fce_mask_mode == "binary" else mask.soft
                    base = enhance(base, feats["ti"], m, apply_flags, spectrum=s).values
                branch[s] = base
        embeddings = {s: conts[s](branch[s]) for s in SPECTRA}
        scores = {s: self.classifiers[s](embeddings[s]) for s in SPECTRA}
        return ForwardOutput(embeddings=embeddings, scores=scores, masks=masks, smp_logits=smp_logits)

    def embed_concat(self, images: dict[str, torch.Tensor], apply_flags: torch.Tensor) -> torch.Tensor:
        out = self.spectrum_features(images, apply_flags)
        return torch.cat([out.embeddings[s] for s in SPECTRA], dim=1)


# --- batch preparation ------------------------------------------------------

def batch_tensors(triplets, flip_mask=None) -> dict[str, torch.Tensor]:
    """Stack triplet images into uint8 tensors (B x C x H x W), flipping
    selected samples identically across the three spectra."""
    rgb, ni, ti = [], [], []
    for i, t in enumerate(triplets):
        flip = flip_mask is not None and flip_mask[i]
        r, n, m = t.rgb_image, t.ni_image, t.ti_image
        if flip:
            r, n, m = r[:, ::-1], n[:, ::-1], m[:, ::-1]
        rgb.append(np.ascontiguousarray(r))
        ni.append(np.ascontiguousarray(n))
        ti.append(np.ascontiguousarray(m))
    return {
        "rgb": torch.from_numpy(np.stack(rgb)).permute(0, 3, 1, 2),
        "ni": torch.from_numpy(np.stack(ni)).unsqueeze(1),
        "ti": torch.from_numpy(np.stack(ti)).unsqueeze(1),
    }


def batch_flare_flags(triplets, bar: float):
    """Per-spectrum pseudo-labels and the per-sample enhancement gate."""
    rgb_flags, ni_flags, apply = [], [], []
    for t in triplets:
        d_rgb = compute_delta(t.rgb_image)
        d_ni = compute_delta(t.ni_image)
        rgb_flags.append(flare_label(d_rgb, bar))
        ni_flags.append(flare_label(d_ni, bar))
        apply.append(sample_flare_flag(d_rgb, d_ni, bar))
    return (
        torch.tensor(rgb_flags, dtype=torch.bool),
        torch.tensor(ni_flags, dtype=torch.bool),
        torch.tensor(apply, dtype=torch.bool),
    )


# --- training state ---------------------------------------------------------

@dataclass
class TrainState:
    model: FacenetModel
    optimizer: torch.optim.Adam
    id_map: dict[int, int]
    epoch: int = 0
    global_step: int = 0


def build_id_map(train_triplets) -> dict[int, int]:
    return {ident: i for i, ident in enumerate(sorted({t.identity for t in train_triplets}))}


def init_state(config: TrainConfig, train_triplets) -> TrainState:
    config.validate()
    id_map = build_id_map(train_triplets)
    if not id_map:
        raise TrainingError("no training identities in dataset")
    torch.manual_seed(config.seed)
    model = FacenetModel(config, num_classes=len(id_map))
    optimizer = torch.optim.Adam(model.parameters(), lr=lr_at(1, config), betas=(0.9, 0.999))
    return TrainState(model=model, optimizer=optimizer, id_map=id_map)


def _step_rng(config: TrainConfig, stream: int, step: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, stream, step])


def batch_seed(config: TrainConfig, step: int) -> int:
    return int(np.random.default_rng([config.seed, 13, step]).integers(0, 2**62))


def train_step(state: TrainState, batch: Batch, config: TrainConfig, flip_mask=None) -> LossBreakdown:
    """One optimization step; mutates model/optimizer state in place."""
    model = state.model
    model.train()
    images = batch_tensors(batch.triplets, flip_mask)
    labels = torch.tensor([state.id_map[t.identity] for t in batch.triplets], dtype=torch.long)
    rgb_fl, ni_fl, apply_flags = batch_flare_flags(batch.triplets, config.flare_bar)

    out = model.spectrum_features(images, apply_flags)
    order = list(SPECTRA)
    l_id = loss_identity([out.scores[s] for s in order], labels)
    l_tri = loss_triplet([out.embeddings[s] for s in order], labels, config.margin)
    zero = l_id.new_zeros(())
    if out.smp_logits is not None:
        l_f = loss_flare(out.smp_logits["rgb"], rgb_fl) + loss_flare(out.smp_logits["ni"], ni_fl)
    else:
        l_f = zero
    l_ic = (
        loss_ic(out.scores["rgb"], out.scores["ni"], reduction=config.ic_reduction)
        if config.use_ic
        else zero
    )
    breakdown = loss_total(l_id, l_tri, l_f, l_ic, (config.w_id, config.w_tri, config.w_f, config.w_ic))
    if not torch.isfinite(breakdown.l_all):
        ids = [t.sample_id for t in batch.triplets]
        raise TrainingError(
            f"non-finite loss at step {state.global_step}: {breakdown.as_floats()}; batch={ids}"
        )
    state.optimizer.zero_grad()
    breakdown.l_all.backward()
    state.optimizer.step()
    state.global_step += 1
    return breakdown


# --- checkpointing ----------------------------------------------------------

def save_checkpoint(state: TrainState, config: TrainConfig, path) -> Path:
    """Atomic write: serialize to a temp file, then rename into place."""
    path = Path(path)
    payload = {
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "global_step": state.global_step,
        "config": asdict(config),
        "id_map": state.id_map,
        "num_classes": state.model.num_classes,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    payload = torch.load(path, weights_only=False)
    raw = payload["config"]
    raw["lr_decay_epochs"] = tuple(raw["lr_decay_epochs"])
    config = TrainConfig(**raw)
    model = FacenetModel(config, num_classes=payload["num_classes"])
    model.load_state_dict(payload["model"])
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999))
    optimizer.load_state_dict(payload["optimizer"])
    state = TrainState(
        model=model,
        optimizer=optimizer,
        id_map={int(k): int(v) for k, v in payload["id_map"].items()},
        epoch=payload["epoch"],
        global_step=payload["global_step"],
    )
    return state, config


# --- evaluation over a trained model ----------------------------------------

def extract_records(model: FacenetModel, triplets, bar: float, chunk: int = 32) -> list[EmbeddingRecord]:
    """Concatenated branch embeddings for a list of triplets (eval mode)."""
    was_training = model.training
    model.eval()
    records = []
    with torch.no_grad():
        for i in range(0, len(triplets), chunk):
            part = triplets[i : i + chunk]
            images = batch_tensors(part)
            _, _, apply_flags = batch_flare_flags(part, bar)
            vectors = model.embed_concat(images, apply_flags).cpu().numpy().astype(np.float64)
            records.extend(
                EmbeddingRecord(t.sample_id, t.identity, t.camera, vectors[j])
                for j, t in enumerate(part)
            )
    if was_training:
        model.train()
    return records


def evaluate_model(model: FacenetModel, query_triplets, gallery_triplets, bar: float):
    queries = extract_records(model, query_triplets, bar)
    gallery = extract_records(model, gallery_triplets, bar)
    return evaluate(rank_queries(queries, gallery))


# --- full run ----------------------------------------------------------------

@dataclass
class RunResult:
    checkpoint_path: Path
    metrics: dict | None               # final evaluation, None without a query split
    history: list[dict]                # one row per evaluation epoch
    losses_csv: Path
    metrics_csv: Path


def ablation_matrix() -> list[tuple[str, dict[str, bool]]]:
    """Canonical component on/off grid for comparable runs."""
    return [
        ("baseline", dict(use_mfmp=False, use_fmi=False, use_fce=False, use_ic=False)),
        ("mfmp", dict(use_mfmp=True, use_fmi=True, use_fce=False, use_ic=False)),
        ("mfmp_fce", dict(use_mfmp=True, use_fmi=True, use_fce=True, use_ic=False)),
        ("mfmp_nofmi_fce", dict(use_mfmp=True, use_fmi=False, use_fce=True, use_ic=False)),
        ("full", dict(use_mfmp=True, use_fmi=True, use_fce=True, use_ic=True)),
    ]


def run(config: TrainConfig, data_root, out_dir, resume_from=None) -> RunResult:
    """Train for the configured epochs, evaluating and checkpointing on the way."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    triplets = load_manifest(data_root, image_hw=(config.image_h, config.image_w))
    split = load_split(data_root)
    train = [t for t in triplets if t.identity in split.train_ids]
    by_id = unique_by_sample_id(triplets)
    gallery = [by_id[s] for s in split.gallery_samples]
    queries = [by_id[s] for s in split.query_samples]

    if resume_from is not None:
        state, stored = load_checkpoint(resume_from)
        for flag in ("use_mfmp", "use_fmi", "use_fce", "use_ic", "variant", "plug_layer"):
            if getattr(stored, flag) != getattr(config, flag):
                raise TrainingError(f"checkpoint was trained with different {flag}")
    else:
        state = init_state(config, train)

    losses_csv = out / "losses.csv"
    metrics_csv = out / "metrics_history.csv"
    ckpt_path = out / "checkpoint.pt"
    new_files = resume_from is None
    if new_files or not losses_csv.exists():
        losses_csv.write_text("step,l_id,l_tri,l_f,l_ic,l_all\n")
    if new_files or not metrics_csv.exists():
        metrics_csv.write_text("epoch,mAP,R1,R5,R10\n")

    steps_per_epoch = max(1, len(train) // (config.P * config.K))
    history: list[dict] = []
    metrics = None

    def run_eval(epoch: int):
        nonlocal metrics
        if not queries or not gallery:
            return
        result = evaluate_model(state.model, queries, gallery, config.flare_bar)
        metrics = {
            "mAP": result.mAP,
            "R1": result.cmc[1],
            "R5": result.cmc[5],
            "R10": result.cmc[10],
        }
        history.append({"epoch": epoch, **metrics})
        with open(metrics_csv, "a", newline="") as fh:
            csv.writer(fh).writerow(
                [epoch, f"{metrics['mAP']:.6f}", f"{metrics['R1']:.6f}",
                 f"{metrics['R5']:.6f}", f"{metrics['R10']:.6f}"]
            )

    for epoch in range(state.epoch + 1, config.epochs + 1):
        lr = lr_at(epoch, config)
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        for _ in range(steps_per_epoch):
            step = state.global_step
            batch = sample_pk_batch(train, config.P, config.K, batch_seed(config, step))
            flips = _step_rng(config, 7, step).random(len(batch.triplets)) < config.flip_prob
            breakdown = train_step(state, batch, config, flip_mask=flips)
            vals = breakdown.as_floats()
            with open(losses_csv, "a", newline="") as fh:
                csv.writer(fh).writerow(
                    [step] + [f"{vals[k]:.6f}" for k in ("l_id", "l_tri", "l_f", "l_ic", "l_all")]
                )
        state.epoch = epoch
        if epoch % config.eval_every == 0 and epoch != config.epochs:
            run_eval(epoch)
            save_checkpoint(state, config, ckpt_path)

    run_eval(config.epochs)
    save_checkpoint(state, config, ckpt_path)
    if metrics is not None:
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    return RunResult(
        checkpoint_path=ckpt_path,
        metrics=metrics,
        history=history,
        losses_csv=losses_csv,
        metrics_csv=metrics_csv,
    )
