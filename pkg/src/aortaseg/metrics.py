"""Evaluation metrics: Dice overlap and 95th-percentile Hausdorff distance.

Surfaces are voxel-based: a boundary voxel is a foreground voxel with at
least one face-adjacent background neighbor (volume edges count as
background). Distances are Euclidean in mm between boundary voxel
centers; HD95 takes the 95th percentile (linear interpolation) of each
directed distance set and returns the larger one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure
from scipy.ndimage import label as cc_label

from .volume import Volume

_FACE_STRUCTURE = generate_binary_structure(3, 1)   # 6-neighborhood
_FULL_STRUCTURE = np.ones((3, 3, 3), dtype=bool)    # 26-neighborhood


@dataclass(frozen=True)
class EvalResult:
    case_id: str
    dice: float
    hd95: float

    def __post_init__(self):
        if not (0.0 <= self.dice <= 1.0):
            raise ValueError(f"dice must be in [0, 1], got {self.dice}")
        if self.hd95 < 0.0:
            raise ValueError(f"hd95 must be >= 0 or inf, got {self.hd95}")


def _check_pair(pred: Volume, gt: Volume, check_spacing: bool = True) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if check_spacing and not np.allclose(pred.spacing, gt.spacing):
        raise ValueError(f"spacing mismatch: pred {pred.spacing} vs gt {gt.spacing}")


def dice_score(pred: Volume, gt: Volume) -> float:
    """Dice overlap 2|P∩G| / (|P|+|G|); 1.0 when both masks are empty."""
    _check_pair(pred, gt)
    p = pred.data > 0
    g = gt.data > 0
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a face-adjacent background or volume-edge neighbor."""
    fg = mask > 0
    return fg & ~binary_erosion(fg, structure=_FACE_STRUCTURE, border_value=0)


def _pair_distances(delta: np.ndarray, spacing) -> np.ndarray:
    # canonical formula, shared by the EDT fast path and test oracles so
    # that both produce bitwise-identical doubles
    dx = delta[..., 0] * spacing[0]
    dy = delta[..., 1] * spacing[1]
    dz = delta[..., 2] * spacing[2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def _directed_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Distances (mm) from each true voxel of ``src`` to the ``dst`` set."""
    indices = distance_transform_edt(
        ~dst, sampling=spacing, return_distances=False, return_indices=True
    )
    src_idx = np.argwhere(src)
    witness = indices[:, src_idx[:, 0], src_idx[:, 1], src_idx[:, 2]].T
    return _pair_distances(src_idx - witness, spacing)


def hd95(pred: Volume, gt: Volume) -> float:
    """95th-percentile symmetric surface distance in mm.

    Returns 0.0 when both masks are empty and +inf when exactly one is,
    so degenerate predictions stay visible instead of being clamped to
    an arbitrary penalty.
    """
    _check_pair(pred, gt)
    spacing = pred.spacing
    p = pred.data > 0
    g = gt.data > 0
    p_any = bool(p.any())
    g_any = bool(g.any())
    if not p_any and not g_any:
        return 0.0
    if p_any != g_any:
        return math.inf
    bp = boundary_voxels(p)
    bg = boundary_voxels(g)
    d_pg = _directed_distances(bp, bg, spacing)
    d_gp = _directed_distances(bg, bp, spacing)
    return float(max(np.percentile(d_pg, 95.0), np.percentile(d_gp, 95.0)))


def largest_component(mask: Volume) -> Volume:
    """Keep only the largest 26-connected foreground component.

    Ties are broken toward the component containing the lowest linear
    voxel index. An empty mask is returned unchanged.
    """
    fg = mask.data > 0
    if not fg.any():
        return mask
    labels, n = cc_label(fg, structure=_FULL_STRUCTURE)
    if n == 1:
        return mask
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    best = sizes.max()
    tied = np.flatnonzero(sizes == best)
    if len(tied) > 1:
        flat = labels.ravel()
        keep = min(tied, key=lambda lbl: int(np.argmax(flat == lbl)))
    else:
        keep = tied[0]
    out = np.where(labels == keep, mask.data, 0).astype(mask.data.dtype)
    return mask.with_data(out)


def write_eval_report(results: list[EvalResult], path) -> None:
    """CSV report: one row per case plus mean/median/std summary rows."""
    path = Path(path)
    dices = np.array([r.dice for r in results], dtype=np.float64)
    hds = np.array([r.hd95 for r in results], dtype=np.float64)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["case_id", "dice", "hd95"])
        for r in results:
            w.writerow([r.case_id, f"{r.dice:.6f}", repr(float(r.hd95))])
        if results:
            with np.errstate(invalid="ignore"):  # std over an inf sentinel is nan
                w.writerow(["mean", f"{dices.mean():.6f}", repr(float(hds.mean()))])
                w.writerow(["median", f"{np.median(dices):.6f}", repr(float(np.median(hds)))])
                w.writerow(["std", f"{dices.std():.6f}", repr(float(hds.std()))])
