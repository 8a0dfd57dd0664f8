"""Sliding-window prediction, checkpoint ensembling, and the two-stage
adaptive-normalization inference pipeline.

Stage 1 runs the five z-score-trained fold models (repeat 0) on the
z-score-normalized image and takes their ensemble argmax as a coarse
foreground mask. The 5th/95th percentile intensities inside that mask
define a soft-clip rescaling of the raw image, on which the remaining
ten models run. The final probabilities average all fifteen maps; the
argmax mask is post-filtered to its largest component and resampled
back onto the raw image grid.

If stage 1 finds no foreground (or the bounds collapse), stage 2 falls
back to z-score preprocessing so the pipeline always emits a mask.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
import torch

from .metrics import largest_component
from .normalize import (
    DEFAULT_PERCENTILES,
    DEFAULT_SOFTCLIP_K,
    PERCENTILE_SOFTCLIP,
    ZSCORE,
    DegenerateBoundsError,
    EmptyMaskError,
    foreground_percentile_bounds,
    softclip_rescale,
    zscore_normalize,
)
from .volume import KIND_LABEL, Volume, resample, resample_like


@dataclass
class InferConfig:
    roi_size: tuple | None = None       # None: use the checkpoint's training crop
    overlap: float = 0.25
    blend: str = "gaussian"             # or "constant"
    stage1_count: int = 5
    percentiles: tuple = DEFAULT_PERCENTILES
    softclip_k: float = DEFAULT_SOFTCLIP_K

    def validate(self):
        if not (0.0 <= self.overlap < 1.0):
            raise ValueError(f"overlap must be in [0, 1), got {self.overlap}")
        if self.roi_size is not None and any(r < 1 for r in self.roi_size):
            raise ValueError(f"roi_size must be >= 1 per axis, got {self.roi_size}")
        if self.blend not in ("gaussian", "constant"):
            raise ValueError(f"blend must be 'gaussian' or 'constant', got {self.blend!r}")
        return self


@dataclass(frozen=True)
class ProbMap:
    """Per-voxel class probabilities (C, X, Y, Z) on a volume grid."""

    data: np.ndarray
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4:
            raise ValueError(f"probability map must be (C, X, Y, Z), got shape {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    def argmax_volume(self) -> Volume:
        return Volume(self.data.argmax(axis=0).astype(np.int16), self.spacing, self.origin, KIND_LABEL)


def _gaussian_kernel(roi_size) -> np.ndarray:
    axes = []
    for n in roi_size:
        sigma = max(n / 8.0, 1e-3)
        x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
        axes.append(np.exp(-0.5 * (x / sigma) ** 2))
    k = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return (k / k.max()).astype(np.float32)


def _window_starts(length: int, roi: int, stride: int) -> list[int]:
    starts = list(range(0, length - roi + 1, stride))
    if starts[-1] != length - roi:
        starts.append(length - roi)
    return starts


def sliding_window_predict(model, image: Volume, cfg: InferConfig = InferConfig()) -> ProbMap:
    """Tile the volume, softmax each window, blend, renormalize.

    The image must already be preprocessed to match the model's
    normalization mode and resampled to its training spacing.
    """
    cfg.validate()
    roi = tuple(cfg.roi_size) if cfg.roi_size is not None else tuple(image.shape)
    data = image.data.astype(np.float32)

    pads = [(0, max(0, r - n)) for n, r in zip(data.shape, roi)]
    if any(p[1] for p in pads):
        safe = all(p[1] <= n - 1 for p, n in zip(pads, data.shape))
        data = np.pad(data, pads, mode="reflect" if safe else "edge")
    padded_shape = data.shape

    weight = _gaussian_kernel(roi) if cfg.blend == "gaussian" else np.ones(roi, dtype=np.float32)
    strides = [max(1, int(round(r * (1.0 - cfg.overlap)))) for r in roi]
    starts = [_window_starts(n, r, s) for n, r, s in zip(padded_shape, roi, strides)]

    model.eval()
    num_classes = model.config.num_classes
    acc = np.zeros((num_classes,) + padded_shape, dtype=np.float32)
    wsum = np.zeros(padded_shape, dtype=np.float32)
    with torch.no_grad():
        for sx in starts[0]:
            for sy in starts[1]:
                for sz in starts[2]:
                    window = data[sx:sx + roi[0], sy:sy + roi[1], sz:sz + roi[2]]
                    t = torch.from_numpy(window[None, None])
                    logits, _ = model(t)
                    probs = torch.softmax(logits, dim=1)[0].numpy()
                    region = (
                        slice(sx, sx + roi[0]),
                        slice(sy, sy + roi[1]),
                        slice(sz, sz + roi[2]),
                    )
                    acc[(slice(None),) + region] += probs * weight[None]
                    wsum[region] += weight

    probs = acc / wsum[None]
    probs = probs[:, :image.shape[0], :image.shape[1], :image.shape[2]]
    probs /= probs.sum(axis=0, keepdims=True)
    return ProbMap(probs, image.spacing, image.origin)


def ensemble_average(maps: list[ProbMap]) -> ProbMap:
    """Unweighted voxelwise mean of probability maps (fixed-order sum)."""
    if not maps:
        raise ValueError("cannot ensemble an empty list of probability maps")
    first = maps[0]
    for m in maps[1:]:
        if m.data.shape != first.data.shape:
            raise ValueError(f"probability map shape mismatch: {m.data.shape} vs {first.data.shape}")
        if not np.allclose(m.spacing, first.spacing):
            raise ValueError(f"probability map spacing mismatch: {m.spacing} vs {first.spacing}")
    acc = np.zeros(first.data.shape, dtype=np.float64)
    for m in maps:
        acc += m.data
    return ProbMap((acc / len(maps)).astype(np.float32), first.spacing, first.origin)


def _resolve_checkpoints(checkpoints):
    """Accept checkpoint paths or preloaded (model, meta) pairs."""
    from .segresnet import load_checkpoint

    loaded = []
    for item in checkpoints:
        if isinstance(item, tuple):
            loaded.append(item)
        else:
            loaded.append(load_checkpoint(item))
    return loaded


def two_stage_predict(
    checkpoints,
    raw_image: Volume,
    cfg: InferConfig = InferConfig(),
    *,
    target_spacing=None,
    post_filter: bool = True,
    paper_literal: bool = False,
) -> tuple[Volume, dict]:
    """Full two-stage ensemble prediction on a raw image.

    ``checkpoints``: 15 checkpoint paths or (model, meta) pairs; repeat-0
    fold models form stage 1, the rest stage 2. With ``paper_literal``
    the stage-2 models are expected to be z-score-trained repeats and
    are nevertheless run on the percentile-renormalized image.

    Returns (mask on the raw image grid, report dict with the detected
    bounds, fallback flag, and per-stage timings).
    """
    cfg.validate()
    models = _resolve_checkpoints(checkpoints)
    stage1 = [(m, meta) for m, meta in models if meta.get("repeat", 0) == 0]
    stage2 = [(m, meta) for m, meta in models if meta.get("repeat", 0) != 0]
    if len(stage1) != cfg.stage1_count:
        raise ValueError(f"expected {cfg.stage1_count} stage-1 (repeat 0) checkpoints, got {len(stage1)}")
    folds = sorted(meta.get("fold") for _, meta in stage1)
    if len(set(folds)) != len(stage1):
        raise ValueError(f"stage-1 checkpoints must cover distinct folds, got folds {folds}")
    for m, meta in stage1:
        if m.normalization_mode != ZSCORE:
            raise ValueError(f"stage-1 checkpoint fold {meta.get('fold')} is not z-score-trained")
    expected_stage2 = ZSCORE if paper_literal else PERCENTILE_SOFTCLIP
    for m, meta in stage2:
        if m.normalization_mode != expected_stage2:
            raise ValueError(
                f"stage-2 checkpoint fold {meta.get('fold')} repeat {meta.get('repeat')} has "
                f"normalization_mode {m.normalization_mode!r}, expected {expected_stage2!r} "
                f"(paper_literal={paper_literal})"
            )

    if target_spacing is None:
        target_spacing = models[0][1].get("target_spacing") or raw_image.spacing
    if cfg.roi_size is None:
        crop = models[0][1].get("crop_size")
        cfg = replace(cfg, roi_size=tuple(crop) if crop else None)

    report: dict = {"fallback": False, "bounds": None, "timings": {}, "n_checkpoints": len(models)}
    t0 = time.perf_counter()
    resampled = resample(raw_image, target_spacing)
    zscored = zscore_normalize(resampled)
    report["timings"]["preprocess"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    stage1_maps = [sliding_window_predict(m, zscored, cfg) for m, _ in stage1]
    stage1_mask = ensemble_average(stage1_maps).argmax_volume()
    report["timings"]["stage1"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    stage2_input = None
    try:
        bounds = foreground_percentile_bounds(
            resampled, stage1_mask, cfg.percentiles[0], cfg.percentiles[1]
        )
        stage2_input = softclip_rescale(resampled, bounds, cfg.softclip_k)
        report["bounds"] = (bounds.lo, bounds.hi)
    except (EmptyMaskError, DegenerateBoundsError):
        # stage-1 found nothing usable: keep the pipeline alive on z-score
        report["fallback"] = True
        stage2_input = zscored
    stage2_maps = [sliding_window_predict(m, stage2_input, cfg) for m, _ in stage2]
    report["timings"]["stage2"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    final = ensemble_average(stage1_maps + stage2_maps)
    mask = final.argmax_volume()
    if post_filter:
        mask = largest_component(mask)
    mask = resample_like(mask, raw_image.shape, raw_image.spacing)
    report["timings"]["finalize"] = time.perf_counter() - t0
    return mask, report
