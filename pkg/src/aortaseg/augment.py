"""Training-time augmentation: random crops, flips, affine, intensity.

All functions take plain 3D numpy arrays (image float, label int) plus
an explicit ``numpy.random.Generator``; identical generators give
identical outputs. Spatial transforms hit image and label identically
(trilinear vs nearest); intensity transforms touch only the image.
Intensity shift/scale magnitudes assume a normalized intensity domain,
so augmentation runs after z-score / soft-clip preprocessing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import _sample_nearest, _sample_trilinear


@dataclass
class AugmentConfig:
    crop_size: tuple = (64, 64, 64)
    p_flip: float = 0.5
    p_affine: float = 0.5
    rotate_deg: float = 15.0
    scale_range: tuple = (0.9, 1.1)
    p_intensity: float = 0.2
    intensity_scale: float = 0.1
    intensity_shift: float = 0.1
    noise_std: float = 0.05
    blur_sigma: tuple = (0.5, 1.0)
    foreground_bias: float = 0.5

    def validate(self):
        if any(c < 1 for c in self.crop_size):
            raise ValueError(f"crop_size components must be >= 1, got {self.crop_size}")
        for name in ("p_flip", "p_affine", "p_intensity", "foreground_bias"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        return self


def _pad_to(arr: np.ndarray, crop_size, value) -> np.ndarray:
    pads = []
    for n, c in zip(arr.shape, crop_size):
        missing = max(0, c - n)
        pads.append((missing // 2, missing - missing // 2))
    if any(p != (0, 0) for p in pads):
        arr = np.pad(arr, pads, mode="constant", constant_values=value)
    return arr


def random_crop_pair(image, label, crop_size, rng, foreground_bias: float = 0.5):
    """Crop the same random window out of image and label.

    Volumes smaller than the crop are first padded symmetrically (zeros
    for the image, background for the label). With probability
    ``foreground_bias`` the window is forced to contain at least one
    foreground voxel when any exists.
    """
    image = np.asarray(image)
    label = np.asarray(label)
    if image.shape != label.shape:
        raise ValueError(f"image shape {image.shape} != label shape {label.shape}")
    image = _pad_to(image, crop_size, 0.0)
    label = _pad_to(label, crop_size, 0)

    shape = image.shape
    if rng.random() < foreground_bias:
        fg = np.argwhere(label > 0)
        if len(fg):
            voxel = fg[rng.integers(0, len(fg))]
            start = [
                int(np.clip(voxel[a] - rng.integers(0, crop_size[a]), 0, shape[a] - crop_size[a]))
                for a in range(3)
            ]
        else:
            start = [int(rng.integers(0, shape[a] - crop_size[a] + 1)) for a in range(3)]
    else:
        start = [int(rng.integers(0, shape[a] - crop_size[a] + 1)) for a in range(3)]

    sl = tuple(slice(s, s + c) for s, c in zip(start, crop_size))
    return image[sl].copy(), label[sl].copy()


def rotation_scale_matrix(angles_deg, scale: float = 1.0) -> np.ndarray:
    """3x3 voxel-space map: Rz @ Ry @ Rx scaled isotropically."""
    ax, ay, az = np.deg2rad(angles_deg)
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx * scale


def affine_transform_pair(image, label, matrix):
    """Apply a voxel-space affine (about the volume center) to both arrays.

    The image is sampled trilinearly, the label nearest-neighbor; source
    samples falling outside the volume read as 0 (background).
    """
    image = np.asarray(image)
    matrix = np.asarray(matrix, dtype=np.float64)
    center = (np.array(image.shape, dtype=np.float64) - 1.0) / 2.0
    inv = np.linalg.inv(matrix)
    grid = np.stack(
        np.meshgrid(*[np.arange(n, dtype=np.float64) for n in image.shape], indexing="ij"),
        axis=-1,
    )
    src = (grid - center) @ inv.T + center
    cx, cy, cz = src[..., 0], src[..., 1], src[..., 2]
    inside = (
        (cx >= 0) & (cx <= image.shape[0] - 1)
        & (cy >= 0) & (cy <= image.shape[1] - 1)
        & (cz >= 0) & (cz <= image.shape[2] - 1)
    )
    out_img = np.where(inside, _sample_trilinear(image, cx, cy, cz), 0.0).astype(image.dtype)
    out_lbl = None
    if label is not None:
        label = np.asarray(label)
        out_lbl = np.where(inside, _sample_nearest(label, cx, cy, cz), 0).astype(label.dtype)
    return out_img, out_lbl


def apply_augmentations(image, label, cfg: AugmentConfig, rng):
    """Random flips, affine, and intensity transforms on one sample."""
    image = np.asarray(image).copy()
    label = np.asarray(label).copy()
    if image.shape != label.shape:
        raise ValueError(f"image shape {image.shape} != label shape {label.shape}")

    for axis in range(3):
        if rng.random() < cfg.p_flip:
            image = np.flip(image, axis=axis)
            label = np.flip(label, axis=axis)
    image = np.ascontiguousarray(image)
    label = np.ascontiguousarray(label)

    if rng.random() < cfg.p_affine:
        angles = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg, size=3)
        scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
        image, label = affine_transform_pair(image, label, rotation_scale_matrix(angles, scale))

    if rng.random() < cfg.p_intensity:
        image = image * (1.0 + rng.uniform(-cfg.intensity_scale, cfg.intensity_scale))
    if rng.random() < cfg.p_intensity:
        image = image + rng.uniform(-cfg.intensity_shift, cfg.intensity_shift)
    if rng.random() < cfg.p_intensity:
        image = image + rng.normal(0.0, cfg.noise_std, size=image.shape)
    if rng.random() < cfg.p_intensity:
        sigma = rng.uniform(cfg.blur_sigma[0], cfg.blur_sigma[1])
        image = gaussian_filter(image, sigma=sigma)

    return image.astype(np.float32), label
