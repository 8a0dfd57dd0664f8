"""Intensity normalization.

Two schemes are provided: global z-score (zero mean, unit standard
deviation over all voxels) and adaptive foreground-percentile rescaling
with soft clipping, where the intensity band found inside a foreground
mask is mapped smoothly into (0, 1).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .volume import KIND_IMAGE, Volume

ZSCORE = "zscore"
PERCENTILE_SOFTCLIP = "percentile_softclip"
NORMALIZATION_MODES = (ZSCORE, PERCENTILE_SOFTCLIP)

DEFAULT_PERCENTILES = (5.0, 95.0)
DEFAULT_SOFTCLIP_K = 10.0


class ConstantVolumeWarning(UserWarning):
    """Raised as a warning when a constant volume is z-score normalized."""


class EmptyMaskError(ValueError):
    """The foreground mask selects no voxels (stage-1 produced nothing)."""


class DegenerateBoundsError(ValueError):
    """Percentile bounds collapsed to a single value (lo == hi)."""


@dataclass(frozen=True)
class PercentileBounds:
    """Low/high intensity bounds taken at foreground percentiles."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise ValueError(f"bounds must be finite, got ({self.lo}, {self.hi})")
        if self.lo > self.hi:
            raise ValueError(f"lo must be <= hi, got ({self.lo}, {self.hi})")


def zscore_normalize(vol: Volume) -> Volume:
    """Normalize an image volume to zero mean, unit std (population).

    A constant input has no scale; it maps to all zeros and emits a
    :class:`ConstantVolumeWarning` instead of failing.
    """
    if vol.kind != KIND_IMAGE:
        raise ValueError(f"z-score normalization expects an image volume, got kind={vol.kind!r}")
    data = vol.data.astype(np.float64)
    mean = data.mean()
    std = data.std()  # population (n-denominator), pinned for reproducibility
    if std == 0.0:
        warnings.warn("z-score of a constant volume: returning all zeros", ConstantVolumeWarning)
        return vol.with_data(np.zeros(vol.shape, dtype=np.float32))
    return vol.with_data(((data - mean) / std).astype(np.float32))


def foreground_percentile_bounds(
    vol: Volume, mask: Volume, p_lo: float = 5.0, p_hi: float = 95.0
) -> PercentileBounds:
    """Percentile intensity bounds of ``vol`` inside ``mask == 1``.

    Percentiles use linear interpolation between order statistics (the
    same convention as the hd95 metric). Raises :class:`EmptyMaskError`
    when the mask selects nothing, so callers can fall back to z-score.
    """
    if vol.shape != mask.shape:
        raise ValueError(f"volume shape {vol.shape} != mask shape {mask.shape}")
    if not (0.0 <= p_lo < p_hi <= 100.0):
        raise ValueError(f"percentiles must satisfy 0 <= p_lo < p_hi <= 100, got ({p_lo}, {p_hi})")
    values = vol.data[mask.data == 1]
    if values.size == 0:
        raise EmptyMaskError("foreground mask is empty")
    lo, hi = np.percentile(values.astype(np.float64), [p_lo, p_hi])
    return PercentileBounds(float(lo), float(hi))


def soft_clip(v, k: float = DEFAULT_SOFTCLIP_K):
    """Smooth clamp of ``v`` into (0, 1).

    S_k(v) = (1/k) * ln((1 + e^{k v}) / (1 + e^{k (v - 1)})), evaluated
    in a softplus form that is stable for large |k v|. Strictly
    increasing, symmetric about (0.5, 0.5), and converges to the hard
    clamp as k grows.
    """
    if k <= 0:
        raise ValueError(f"steepness k must be > 0, got {k}")
    v = np.asarray(v, dtype=np.float64)
    return (np.logaddexp(0.0, k * v) - np.logaddexp(0.0, k * (v - 1.0))) / k


def softclip_rescale(vol: Volume, bounds: PercentileBounds, k: float = DEFAULT_SOFTCLIP_K) -> Volume:
    """Rescale intensities from [lo, hi] to (0, 1) with soft clipping."""
    if vol.kind != KIND_IMAGE:
        raise ValueError(f"soft-clip rescale expects an image volume, got kind={vol.kind!r}")
    if bounds.lo >= bounds.hi:
        raise DegenerateBoundsError(f"degenerate intensity range ({bounds.lo}, {bounds.hi})")
    v = (vol.data.astype(np.float64) - bounds.lo) / (bounds.hi - bounds.lo)
    return vol.with_data(soft_clip(v, k).astype(np.float32))
