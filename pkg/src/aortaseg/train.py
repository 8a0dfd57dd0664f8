"""Fold splitting, optimization schedule, and the training loop.

The protocol: split the cases into k folds, train each fold ``repeats``
times (run seed = base seed + repeat index), keep the checkpoint with
the best mean foreground validation dice, and end up with
folds x repeats checkpoints for the inference ensemble.

Preprocessing per model: resample to the target spacing, then either
global z-score (repeat 0, the stage-1 models) or percentile soft-clip
rescaling using ground-truth-mask bounds (repeats >= 1, the stage-2
models) so that training matches the two-stage inference distribution.
``paper_literal=True`` trains every repeat with z-score instead.

The effective batch size is reached by gradient accumulation when
fewer devices are available than the recipe assumes.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentConfig, apply_augmentations, random_crop_pair
from .infer import InferConfig, sliding_window_predict
from .losses import LossConfig, onehot, total_loss
from .metrics import dice_score
from .normalize import (
    PERCENTILE_SOFTCLIP,
    ZSCORE,
    DegenerateBoundsError,
    EmptyMaskError,
    foreground_percentile_bounds,
    softclip_rescale,
    zscore_normalize,
)
from .segresnet import ArchConfig, build_model, load_checkpoint, save_checkpoint
from .volume import Volume, load_volume, resample


@dataclass
class TrainConfig:
    lr0: float = 2e-4
    weight_decay: float = 1e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 100
    batch_per_device: int = 1
    num_devices: int = 1
    effective_batch: int = 8
    folds: int = 5
    repeats: int = 3
    target_spacing: tuple = (0.7, 0.7, 1.0)
    arch: ArchConfig = field(default_factory=ArchConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    val_every: int = 1
    paper_literal: bool = False

    def validate(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if self.folds < 2:
            raise ValueError(f"folds must be >= 2, got {self.folds}")
        if self.repeats < 1 or self.epochs < 1:
            raise ValueError("repeats and epochs must be >= 1")
        self.arch.validate()
        self.loss.validate()
        self.augment.validate()
        return self


def make_folds(case_ids, k: int, seed: int) -> list[int]:
    """Random fold assignment: seeded shuffle, then round-robin.

    Returns one fold index per case (original order); fold sizes differ
    by at most one.
    """
    if len(case_ids) < k:
        raise ValueError(f"cannot split {len(case_ids)} cases into {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(case_ids))
    folds = np.empty(len(case_ids), dtype=int)
    folds[order] = np.arange(len(case_ids)) % k
    return folds.tolist()


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing from lr0 at step 0 to exactly 0 at total_steps."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step > total_steps:
        warnings.warn(f"cosine_lr called with step {step} > total_steps {total_steps}; clamping to 0")
        return 0.0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# Datalist
# ---------------------------------------------------------------------------

def load_datalist(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise IOError(f"datalist not found: {path}")
    with open(path) as f:
        payload = json.load(f)
    if "training" not in payload or not isinstance(payload["training"], list):
        raise ValueError(f"{path}: datalist must contain a 'training' list")
    entries = payload["training"]
    for e in entries:
        if "image" not in e or "label" not in e:
            raise ValueError(f"{path}: every datalist entry needs 'image' and 'label'")
    return entries


def save_datalist(entries: list[dict], path) -> None:
    with open(path, "w") as f:
        json.dump({"training": entries}, f, indent=2)
        f.write("\n")


def validate_datalist(entries: list[dict], folds: int) -> None:
    seen = set()
    for e in entries:
        fold = e.get("fold")
        if not isinstance(fold, int) or not (0 <= fold < folds):
            raise ValueError(f"entry {e.get('image')}: fold {fold!r} not in [0, {folds})")
        seen.add(fold)
    if seen != set(range(folds)):
        raise ValueError(f"folds {sorted(set(range(folds)) - seen)} have no cases")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _load_case(entry: dict, dataroot) -> tuple[Volume, Volume]:
    root = Path(dataroot) if dataroot else Path(".")
    image = load_volume(root / entry["image"])
    label = load_volume(root / entry["label"])
    if image.shape != label.shape:
        raise ValueError(f"{entry['image']}: image shape {image.shape} != label shape {label.shape}")
    return image, label


def _preprocess_case(image: Volume, label: Volume, cfg: TrainConfig, mode: str):
    image = resample(image, cfg.target_spacing)
    label = resample(label, cfg.target_spacing)
    if mode == ZSCORE:
        image = zscore_normalize(image)
    elif mode == PERCENTILE_SOFTCLIP:
        try:
            bounds = foreground_percentile_bounds(image, label)
            image = softclip_rescale(image, bounds)
        except (EmptyMaskError, DegenerateBoundsError):
            image = zscore_normalize(image)
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    return image, label


def _normalization_mode_for(repeat: int, cfg: TrainConfig) -> str:
    if cfg.paper_literal or repeat == 0:
        return ZSCORE
    return PERCENTILE_SOFTCLIP


def _validation_dice(model, cases, crop_size) -> float:
    # mean dice of class 1 across the held-out cases; overlap 0 keeps the
    # per-epoch validation cheap (full-overlap blending is for inference)
    infer_cfg = InferConfig(roi_size=tuple(crop_size), overlap=0.0)
    dices = []
    for image, label in cases:
        pred = sliding_window_predict(model, image, infer_cfg).argmax_volume()
        dices.append(dice_score(
            pred.with_data((pred.data == 1).astype(np.int16)),
            label.with_data((label.data == 1).astype(np.int16)),
        ))
    return float(np.mean(dices))


def train_fold(
    cfg: TrainConfig,
    datalist: list[dict],
    fold: int,
    repeat_index: int,
    out_dir,
    dataroot=None,
) -> Path:
    """Train one fold/repeat; returns the best-checkpoint path.

    Trains on every entry with a different fold, validates on the held
    fold each ``val_every`` epochs, and keeps the checkpoint with the
    highest mean foreground dice (ties go to the later epoch).
    """
    cfg.validate()
    validate_datalist(datalist, cfg.folds)
    if not (0 <= fold < cfg.folds):
        raise ValueError(f"fold {fold} out of range [0, {cfg.folds})")

    run_seed = cfg.seed + repeat_index
    torch.manual_seed(run_seed)
    rng = np.random.default_rng(run_seed)
    mode = _normalization_mode_for(repeat_index, cfg)

    train_entries = [e for e in datalist if e["fold"] != fold]
    val_entries = [e for e in datalist if e["fold"] == fold]
    if not train_entries:
        raise ValueError(f"fold {fold}: empty training split")
    train_ids = {e["image"] for e in train_entries}
    val_ids = {e["image"] for e in val_entries}

    train_cases = [_preprocess_case(*_load_case(e, dataroot), cfg, mode) for e in train_entries]
    val_cases = [_preprocess_case(*_load_case(e, dataroot), cfg, mode) for e in val_entries]

    model = build_model(cfg.arch, seed=run_seed)
    model.normalization_mode = mode
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr0, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay
    )

    accum = max(1, cfg.effective_batch // max(1, cfg.batch_per_device * cfg.num_devices))
    groups_per_epoch = math.ceil(len(train_cases) / accum)
    total_steps = cfg.epochs * groups_per_epoch
    crop = cfg.augment.crop_size

    ckpt_path = Path(out_dir) / f"fold{fold}_rep{repeat_index}" / "best.ckpt"
    best_dice = -1.0
    opt_step = 0
    loss_history = []

    for epoch in range(cfg.epochs):
        # the optimizer must never see a held-out case
        assert not train_ids & val_ids
        model.train()
        order = rng.permutation(len(train_cases))
        epoch_losses = []
        for g in range(groups_per_epoch):
            group = order[g * accum:(g + 1) * accum]
            for pg in optimizer.param_groups:
                pg["lr"] = cosine_lr(opt_step, total_steps, cfg.lr0)
            optimizer.zero_grad()
            for idx in group:
                image, label = train_cases[idx]
                img, lbl = apply_augmentations(image.data, label.data, cfg.augment, rng)
                img, lbl = random_crop_pair(img, lbl, crop, rng, cfg.augment.foreground_bias)
                x = torch.from_numpy(img[None, None])
                t = onehot(torch.from_numpy(lbl.astype(np.int64))[None], cfg.arch.num_classes)
                logits, ds = model(x)
                loss = total_loss(logits, ds, t, cfg.loss) / len(group)
                if not torch.isfinite(loss):
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch}, fold {fold}, repeat {repeat_index}, "
                        f"case {train_entries[idx]['image']}"
                    )
                loss.backward()
                epoch_losses.append(float(loss.detach()) * len(group))
            optimizer.step()
            opt_step += 1
        loss_history.append(float(np.mean(epoch_losses)))

        if (epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs - 1:
            val_dice = _validation_dice(model, val_cases, crop)
            if val_dice >= best_dice:
                best_dice = val_dice
                save_checkpoint(
                    model,
                    ckpt_path,
                    fold=fold,
                    repeat=repeat_index,
                    seed=run_seed,
                    val_dice=val_dice,
                    epoch=epoch,
                    target_spacing=tuple(cfg.target_spacing),
                    crop_size=tuple(crop),
                    loss_history=loss_history[:],
                )
    return ckpt_path


def train_all(cfg: TrainConfig, datalist: list[dict], out_dir, dataroot=None, resume: bool = True):
    """Run every fold x repeat; skips checkpoints already on disk.

    Per-fold failures are collected so the remaining folds still train;
    a summary error is raised at the end if anything failed.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    paths, failures = [], []
    for fold in range(cfg.folds):
        for repeat in range(cfg.repeats):
            ckpt = out_dir / f"fold{fold}_rep{repeat}" / "best.ckpt"
            if resume and ckpt.is_file():
                paths.append(ckpt)
                continue
            try:
                paths.append(train_fold(cfg, datalist, fold, repeat, out_dir, dataroot))
            except Exception as exc:  # noqa: BLE001 - report all fold failures together
                failures.append(f"fold {fold} repeat {repeat}: {exc}")
    if failures:
        raise RuntimeError("training failures:\n" + "\n".join(failures))
    return paths


# ---------------------------------------------------------------------------
# Experiment config file
# ---------------------------------------------------------------------------

_SECTION_TYPES = {"train": TrainConfig, "arch": ArchConfig, "loss": LossConfig,
                  "augment": AugmentConfig, "infer": InferConfig}
_TOP_KEYS = {"modality", "datalist", "dataroot"} | set(_SECTION_TYPES)


def load_experiment_config(path) -> dict:
    """Parse the experiment YAML: modality/datalist/dataroot plus
    optional train/arch/loss/augment/infer override sections.

    Unknown keys are errors, not warnings.
    """
    import yaml

    path = Path(path)
    if not path.is_file():
        raise IOError(f"experiment config not found: {path}")
    with open(path) as f:
        raw = yaml.safe_load(f)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")

    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
    for required in ("modality", "datalist", "dataroot"):
        if required not in raw:
            raise ValueError(f"{path}: missing required key {required!r}")
    if str(raw["modality"]).upper() != "CT":
        raise ValueError(f"{path}: unrecognized modality {raw['modality']!r} (expected CT)")

    def build(cls, data, name):
        data = dict(data or {})
        fields = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - fields
        if unknown:
            raise ValueError(f"{path}: unknown keys in section {name!r}: {sorted(unknown)}")
        for key, value in data.items():
            if isinstance(value, list):
                data[key] = tuple(value)
        return cls(**data)

    train_overrides = dict(raw.get("train") or {})
    for sub in ("arch", "loss", "augment"):
        if sub in train_overrides:
            raise ValueError(f"{path}: put {sub!r} at the top level, not inside 'train'")
    train_cfg = build(TrainConfig, train_overrides, "train")
    train_cfg.arch = build(ArchConfig, raw.get("arch"), "arch")
    train_cfg.loss = build(LossConfig, raw.get("loss"), "loss")
    train_cfg.augment = build(AugmentConfig, raw.get("augment"), "augment")
    infer_cfg = build(InferConfig, raw.get("infer"), "infer")

    return {
        "modality": "CT",
        "datalist": str(path.parent / raw["datalist"]) if not Path(raw["datalist"]).is_absolute() else raw["datalist"],
        "dataroot": str(path.parent / raw["dataroot"]) if not Path(raw["dataroot"]).is_absolute() else raw["dataroot"],
        "train": train_cfg.validate(),
        "infer": infer_cfg.validate(),
    }


def experiment_config_snapshot(config: dict) -> dict:
    """JSON-serializable snapshot of a parsed experiment config."""
    return {
        "modality": config["modality"],
        "datalist": config["datalist"],
        "dataroot": config["dataroot"],
        "train": asdict(config["train"]),
        "infer": asdict(config["infer"]),
    }
