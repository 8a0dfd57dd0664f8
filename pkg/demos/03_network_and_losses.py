"""The segmentation network and its training loss.

The network is a residual encoder-decoder: 5 encoder stages of
1, 2, 2, 4, 4 pre-activation residual blocks (32 filters at full
resolution, doubling as the grid halves), a transposed-convolution
decoder with additive skips, and deep-supervision heads on the coarse
decoder levels. Training combines soft dice and focal loss across the
supervision levels.

Run:  python demos/03_network_and_losses.py   (~30 s on CPU)
"""

import torch

from aortaseg import ArchConfig, LossConfig, build_model, dice_loss, focal_loss, total_loss
from aortaseg.losses import onehot

cfg = ArchConfig()  # the full-scale default
print(f"stages: {cfg.blocks_per_stage}, channel widths: {[cfg.stage_channels(s) for s in range(5)]}")
model = build_model(cfg, seed=0).eval()
print(f"parameters: {sum(p.numel() for p in model.parameters()):,}")

# Shape contract on a 64^3 input: full-resolution logits plus deep
# supervision outputs at 1/2, 1/4, 1/8 resolution.
with torch.no_grad():
    logits, ds_outputs = model(torch.randn(1, 1, 64, 64, 64))
print(f"logits: {tuple(logits.shape)}")
print(f"deep supervision: {[tuple(d.shape) for d in ds_outputs]}")

# Inputs must be divisible by 2^(stages-1); the error names the axis.
try:
    model(torch.randn(1, 1, 64, 64, 60))
except ValueError as exc:
    print(f"shape guard: {exc}")

# Losses on a small desk-size example.
small = ArchConfig(init_filters=8, blocks_per_stage=(1, 2, 2), deep_supervision_levels=1)
net = build_model(small, seed=1)
x = torch.randn(1, 1, 32, 32, 32)
target = onehot(torch.randint(0, 2, (1, 32, 32, 32)), 2)
with torch.no_grad():
    logits, ds_outputs = net(x)
loss_cfg = LossConfig()
print(f"dice loss:  {float(dice_loss(logits, target, loss_cfg)):.4f}")
print(f"focal loss: {float(focal_loss(logits, target, loss_cfg)):.4f}")
print(f"total (deep-supervised): {float(total_loss(logits, ds_outputs, target, loss_cfg)):.4f}")

# A perfect prediction drives every term to ~0.
perfect = target * 40.0 - 20.0
print(f"perfect-prediction total: {float(total_loss(perfect, [], target, loss_cfg)):.2e}")
