"""Synthetic CT-like vessel phantoms with analytic ground truth.

Each case is a curved, tapering tube on a noisy soft-tissue background:
the centerline is a vertical line (along z) with a sinusoidal bend in x,
the radius tapers linearly with z, and an optional straight side branch
can be attached. The label marks voxels whose in-plane distance to the
centerline is below the local radius. Intensities are Gaussian
(background around 40, vessel around 300, Hounsfield-like), optionally
re-exported through a global scale/offset to mimic non-calibrated data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import label as cc_label

from .volume import KIND_IMAGE, KIND_LABEL, Volume, save_volume


@dataclass
class PhantomSpec:
    shape: tuple = (64, 64, 64)
    spacing: tuple = (0.7, 0.7, 1.0)
    bend_amplitude: float = 6.0          # voxels
    bend_period: float = 64.0            # voxels along z
    bend_phase: float = 0.0              # radians
    radius_start: float = 6.0            # voxels, at z = 0
    radius_end: float = 3.0              # voxels, at z = max
    branch: bool = False
    background_mean: float = 40.0
    background_std: float = 15.0
    vessel_mean: float = 300.0
    vessel_std: float = 20.0
    intensity_scale: float = 1.0
    intensity_offset: float = 0.0

    def validate(self):
        if min(self.shape) < 8:
            raise ValueError(f"phantom shape too small: {self.shape}")
        if self.radius_start <= 0 or self.radius_end <= 0:
            raise ValueError("radius must be > 0 everywhere")
        return self

    @classmethod
    def for_shape(cls, shape, spacing=(0.7, 0.7, 1.0)) -> "PhantomSpec":
        """Default geometry scaled so the vessel fits smaller volumes."""
        scale = min(shape[0], shape[1]) / 64.0
        return cls(
            shape=tuple(shape),
            spacing=spacing,
            bend_amplitude=6.0 * scale,
            bend_period=float(shape[2]),
            radius_start=max(2.5, 6.0 * scale),
            radius_end=max(1.5, 3.0 * scale),
        )


def _centerline(spec: PhantomSpec):
    # half-integer center: avoids lattice-aligned perimeters that bias
    # the digitized cross-section area
    nz = spec.shape[2]
    z = np.arange(nz, dtype=np.float64)
    cx = (spec.shape[0] - 1) / 2.0 + spec.bend_amplitude * np.sin(
        2.0 * np.pi * z / spec.bend_period + spec.bend_phase
    )
    cy = np.full(nz, (spec.shape[1] - 1) / 2.0)
    radius = spec.radius_start + (spec.radius_end - spec.radius_start) * z / max(nz - 1, 1)
    return cx, cy, radius


def _tube_mask(spec: PhantomSpec) -> np.ndarray:
    cx, cy, radius = _centerline(spec)
    margin = 2.0
    if (cx - radius).min() < margin or (cx + radius).max() > spec.shape[0] - 1 - margin:
        raise ValueError("vessel out of bounds: bend amplitude/radius too large for the volume")
    if (cy - radius).min() < margin or (cy + radius).max() > spec.shape[1] - 1 - margin:
        raise ValueError("vessel out of bounds along y")
    ii = np.arange(spec.shape[0], dtype=np.float64)[:, None, None]
    jj = np.arange(spec.shape[1], dtype=np.float64)[None, :, None]
    d2 = (ii - cx[None, None, :]) ** 2 + (jj - cy[None, None, :]) ** 2
    mask = d2 < radius[None, None, :] ** 2

    if spec.branch:
        mask |= _branch_mask(spec, cx, cy, radius)
    return mask


def _branch_mask(spec: PhantomSpec, cx, cy, radius) -> np.ndarray:
    # straight tube leaving the main vessel at mid-height, heading +x/+z
    nz = spec.shape[2]
    z0 = nz // 2
    p0 = np.array([cx[z0], cy[z0], float(z0)])
    direction = np.array([1.0, 0.0, 1.0]) / np.sqrt(2.0)
    length = min(spec.shape[0] - p0[0] - 3.0, nz - z0 - 3.0) * np.sqrt(2.0) * 0.8
    r_branch = max(1.5, 0.6 * radius[z0])

    grid = np.stack(
        np.meshgrid(*[np.arange(n, dtype=np.float64) for n in spec.shape], indexing="ij"),
        axis=-1,
    )
    rel = grid - p0
    t = np.clip(rel @ direction, 0.0, length)
    closest = p0 + t[..., None] * direction
    d2 = ((grid - closest) ** 2).sum(axis=-1)
    return d2 < r_branch ** 2


def generate_case(spec: PhantomSpec, rng) -> tuple[Volume, Volume]:
    """One (image, label) pair; deterministic given (spec, rng state)."""
    spec.validate()
    mask = _tube_mask(spec)
    _, n_components = cc_label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    if n_components != 1:
        raise ValueError(f"phantom vessel must be a single connected component, got {n_components}")

    image = rng.normal(spec.background_mean, spec.background_std, size=spec.shape)
    image[mask] = rng.normal(spec.vessel_mean, spec.vessel_std, size=int(mask.sum()))
    image = image * spec.intensity_scale + spec.intensity_offset

    label = Volume(mask.astype(np.int16), spec.spacing, kind=KIND_LABEL)
    return Volume(image.astype(np.float32), spec.spacing, kind=KIND_IMAGE), label


def generate_dataset(
    n_cases: int,
    out_dir,
    seed: int = 0,
    spec: PhantomSpec = PhantomSpec(),
    folds: int = 5,
    offset_fraction: float = 0.0,
) -> dict:
    """Write ``n_cases`` phantom pairs plus a dataset.json datalist.

    Geometry parameters are jittered per case from the seeded generator;
    a fraction of cases can be exported with the +1024 intensity offset
    style. Returns the datalist dict that was written.
    """
    from .train import make_folds  # local import to avoid a cycle

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(seed)
    entries = []
    for i in range(n_cases):
        case_rng = np.random.default_rng(master.integers(0, 2 ** 63))
        # geometry jittered relative to the base spec so small volumes
        # stay in bounds
        case_spec = replace(
            spec,
            bend_amplitude=case_rng.uniform(0.5, 1.17) * spec.bend_amplitude,
            bend_period=case_rng.uniform(0.75, 1.5) * spec.shape[2],
            bend_phase=case_rng.uniform(0.0, 2.0 * np.pi),
            radius_start=case_rng.uniform(0.84, 1.16) * spec.radius_start,
            radius_end=case_rng.uniform(0.84, 1.16) * spec.radius_end,
            intensity_offset=1024.0 if case_rng.random() < offset_fraction else 0.0,
        )
        image, lbl = generate_case(case_spec, case_rng)
        img_name = f"case_{i:03d}_image.nii.gz"
        lbl_name = f"case_{i:03d}_label.nii.gz"
        save_volume(image, out_dir / img_name)
        save_volume(lbl, out_dir / lbl_name)
        entries.append({"image": img_name, "label": lbl_name})

    fold_of = make_folds([e["image"] for e in entries], folds, seed)
    for entry, fold in zip(entries, fold_of):
        entry["fold"] = fold
    datalist = {"training": entries}
    with open(out_dir / "dataset.json", "w") as f:
        json.dump(datalist, f, indent=2)
        f.write("\n")
    return datalist
