"""Desk-scale 3D aorta segmentation pipeline.

Core pieces: a spacing-aware volume model, CT intensity normalization,
a residual encoder-decoder segmentation network with deep supervision,
dice+focal training under a k-fold x repeats protocol, a two-stage
adaptive-normalization inference ensemble, Dice/HD95 evaluation, and
surface-mesh reconstruction. Synthetic vessel phantoms make the whole
pipeline runnable and testable on a workstation.
"""

from .augment import AugmentConfig, apply_augmentations, random_crop_pair
from .losses import LossConfig, dice_loss, focal_loss, total_loss
from .mesh import TriMesh, marching_cubes, mesh_stats, save_mesh
from .metrics import EvalResult, dice_score, hd95, largest_component
from .normalize import (
    PercentileBounds,
    foreground_percentile_bounds,
    soft_clip,
    softclip_rescale,
    zscore_normalize,
)
from .phantom import PhantomSpec, generate_case, generate_dataset
from .segresnet import ArchConfig, SegResNet, build_model, load_checkpoint, save_checkpoint
from .volume import Volume, load_volume, resample, resample_like, save_volume

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "ArchConfig",
    "EvalResult",
    "LossConfig",
    "PercentileBounds",
    "PhantomSpec",
    "SegResNet",
    "TriMesh",
    "Volume",
    "apply_augmentations",
    "build_model",
    "dice_loss",
    "dice_score",
    "focal_loss",
    "foreground_percentile_bounds",
    "generate_case",
    "generate_dataset",
    "hd95",
    "largest_component",
    "load_checkpoint",
    "load_volume",
    "marching_cubes",
    "mesh_stats",
    "random_crop_pair",
    "resample",
    "resample_like",
    "save_checkpoint",
    "save_mesh",
    "save_volume",
    "soft_clip",
    "softclip_rescale",
    "total_loss",
    "zscore_normalize",
]
