"""Combined dice + focal training loss with deep-supervision weighting."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class LossConfig:
    focal_gamma: float = 2.0
    dice_smooth: float = 1e-5
    # level 0 = full resolution, then one weight per deep-supervision level;
    # truncated to the levels in use and renormalized to sum 1
    ds_weights: tuple = (1.0, 0.5, 0.25, 0.125)
    include_background_in_dice: bool = True

    def validate(self):
        if self.focal_gamma < 0:
            raise ValueError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.dice_smooth <= 0:
            raise ValueError(f"dice_smooth must be > 0, got {self.dice_smooth}")
        if not self.ds_weights or any(w <= 0 for w in self.ds_weights):
            raise ValueError(f"ds_weights must all be > 0, got {self.ds_weights}")
        return self


def _check_shapes(logits: torch.Tensor, target: torch.Tensor) -> None:
    if logits.shape != target.shape:
        raise ValueError(f"logits shape {tuple(logits.shape)} != target shape {tuple(target.shape)}")
    if logits.ndim != 5:
        raise ValueError(f"expected 5D (N, C, X, Y, Z) tensors, got {logits.ndim}D")


def dice_loss(logits: torch.Tensor, target_onehot: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Soft dice loss: 1 - mean_c (2 Σ p_c t_c + ε) / (Σ p_c + Σ t_c + ε).

    Per-class dice with batch and spatial dims pooled into the sums,
    then averaged over classes (background included by default).
    """
    _check_shapes(logits, target_onehot)
    p = torch.softmax(logits, dim=1)
    dims = (0, 2, 3, 4)
    intersect = (p * target_onehot).sum(dim=dims)
    denom = p.sum(dim=dims) + target_onehot.sum(dim=dims)
    per_class = (2.0 * intersect + cfg.dice_smooth) / (denom + cfg.dice_smooth)
    if not cfg.include_background_in_dice:
        per_class = per_class[1:]
    return 1.0 - per_class.mean()


def focal_loss(logits: torch.Tensor, target_onehot: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Focal loss: mean over voxels of -(1 - p_t)^γ · ln(p_t).

    p_t is the predicted probability of the true class; γ = 0 reduces to
    cross-entropy.
    """
    _check_shapes(logits, target_onehot)
    logp = torch.log_softmax(logits, dim=1)
    logp_t = (logp * target_onehot).sum(dim=1)
    p_t = logp_t.exp()
    return (-((1.0 - p_t) ** cfg.focal_gamma) * logp_t).mean()


def _downsample_onehot(target_onehot: torch.Tensor, factor: int) -> torch.Tensor:
    # strided nearest-neighbor downsampling keeps targets one-hot
    return target_onehot[:, :, ::factor, ::factor, ::factor]


def total_loss(
    logits: torch.Tensor,
    ds_outputs: list[torch.Tensor],
    target_onehot: torch.Tensor,
    cfg: LossConfig = LossConfig(),
) -> torch.Tensor:
    """Deep-supervision weighted sum of (dice + focal) across levels.

    Level 0 is the full-resolution output; ds_outputs[i] lives at
    1/2^(i+1) resolution and is compared against the nearest-downsampled
    target. Weights come from cfg.ds_weights, truncated and normalized
    to sum 1.
    """
    n_levels = 1 + len(ds_outputs)
    if n_levels > len(cfg.ds_weights):
        raise ValueError(
            f"{len(ds_outputs)} deep-supervision outputs but only {len(cfg.ds_weights)} ds_weights"
        )
    weights = torch.tensor(cfg.ds_weights[:n_levels], dtype=logits.dtype, device=logits.device)
    weights = weights / weights.sum()

    total = weights[0] * (dice_loss(logits, target_onehot, cfg) + focal_loss(logits, target_onehot, cfg))
    for i, ds in enumerate(ds_outputs):
        t = _downsample_onehot(target_onehot, 2 ** (i + 1))
        total = total + weights[i + 1] * (dice_loss(ds, t, cfg) + focal_loss(ds, t, cfg))
    return total


def onehot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(N, X, Y, Z) integer labels -> (N, C, X, Y, Z) one-hot floats."""
    if labels.ndim != 4:
        raise ValueError(f"expected 4D (N, X, Y, Z) labels, got {labels.ndim}D")
    oh = F.one_hot(labels.long(), num_classes)          # (N, X, Y, Z, C)
    return oh.permute(0, 4, 1, 2, 3).contiguous().to(torch.float32)
