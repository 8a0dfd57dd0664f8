"""Residual encoder-decoder segmentation network with deep supervision.

Encoder: a stem convolution, then one stage per entry of
``blocks_per_stage``; stage s runs at spatial scale 1/2^s with
``init_filters * 2^s`` channels and is entered through a stride-2
convolution (except stage 0). Blocks are pre-activation residual blocks
(norm -> relu -> conv, twice, plus identity).

Decoder: per level, a transposed convolution halves the channels and
doubles the spatial size, the encoder output of that scale is added,
and a single residual block follows. Deep-supervision heads are 1x1x1
convolutions on the coarsest decoder levels.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


@dataclass
class ArchConfig:
    init_filters: int = 32
    blocks_per_stage: tuple = (1, 2, 2, 4, 4)
    in_channels: int = 1
    num_classes: int = 2
    deep_supervision_levels: int = 3

    def validate(self):
        if len(self.blocks_per_stage) < 2:
            raise ValueError(f"need at least 2 stages, got {self.blocks_per_stage}")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ValueError(f"blocks_per_stage entries must be >= 1, got {self.blocks_per_stage}")
        if self.init_filters < 1:
            raise ValueError(f"init_filters must be >= 1, got {self.init_filters}")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ValueError("in_channels must be >= 1 and num_classes >= 2")
        max_ds = len(self.blocks_per_stage) - 2
        if not (0 <= self.deep_supervision_levels <= max_ds):
            raise ValueError(
                f"deep_supervision_levels must be in [0, {max_ds}] for "
                f"{len(self.blocks_per_stage)} stages (each head needs a decoder level), "
                f"got {self.deep_supervision_levels}"
            )
        return self

    @property
    def num_stages(self) -> int:
        return len(self.blocks_per_stage)

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (self.num_stages - 1)

    def stage_channels(self, stage: int) -> int:
        return self.init_filters * 2 ** stage


class ResBlock(nn.Module):
    """Pre-activation residual block: x + conv(act(norm(conv(act(norm(x))))))."""

    def __init__(self, channels):
        super().__init__()
        self.norm1 = nn.BatchNorm3d(channels)
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1, bias=False)
        self.norm2 = nn.BatchNorm3d(channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1, bias=False)

    def forward(self, x):
        y = self.conv1(F.relu(self.norm1(x)))
        y = self.conv2(F.relu(self.norm2(y)))
        return x + y


class SegResNet(nn.Module):
    """The network. ``forward`` returns (logits, ds_outputs).

    ``normalization_mode`` records which preprocessing the model was
    trained under ("zscore" or "percentile_softclip"); inference must
    match it.
    """

    def __init__(self, config: ArchConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.normalization_mode = "zscore"
        f = config.init_filters
        n_stages = config.num_stages

        self.stem = nn.Conv3d(config.in_channels, f, 3, padding=1, bias=False)
        self.downs = nn.ModuleList()
        self.encoder_stages = nn.ModuleList()
        for s in range(n_stages):
            ch = config.stage_channels(s)
            if s > 0:
                self.downs.append(nn.Conv3d(ch // 2, ch, 3, stride=2, padding=1, bias=False))
            self.encoder_stages.append(
                nn.Sequential(*[ResBlock(ch) for _ in range(config.blocks_per_stage[s])])
            )

        self.ups = nn.ModuleList()
        self.decoder_blocks = nn.ModuleList()
        for s in range(n_stages - 1, 0, -1):
            ch = config.stage_channels(s)
            self.ups.append(nn.ConvTranspose3d(ch, ch // 2, 2, stride=2, bias=False))
            self.decoder_blocks.append(ResBlock(ch // 2))

        self.final_norm = nn.BatchNorm3d(f)
        self.final_conv = nn.Conv3d(f, config.num_classes, 1)
        # heads on decoder scales 1/2 .. 1/2^ds, coarse levels only
        self.ds_heads = nn.ModuleList(
            nn.Conv3d(config.stage_channels(level), config.num_classes, 1)
            for level in range(1, config.deep_supervision_levels + 1)
        )

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 5:
            raise ValueError(f"expected 5D input (N, C, X, Y, Z), got {x.ndim}D")
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {x.shape[1]}")
        div = self.config.spatial_divisor
        for axis, size in enumerate(x.shape[2:]):
            if size % div != 0:
                raise ValueError(
                    f"spatial axis {axis} has size {size}, not divisible by {div} "
                    f"(required by {self.config.num_stages} stages)"
                )

    def forward(self, x):
        self._check_input(x)
        x = self.stem(x)
        skips = []
        for s, stage in enumerate(self.encoder_stages):
            if s > 0:
                x = self.downs[s - 1](x)
            x = stage(x)
            skips.append(x)

        decoder_feats = {}
        y = skips[-1]
        for i, (up, block) in enumerate(zip(self.ups, self.decoder_blocks)):
            level = self.config.num_stages - 2 - i
            y = up(y) + skips[level]
            y = block(y)
            decoder_feats[level] = y

        logits = self.final_conv(F.relu(self.final_norm(y)))
        ds_outputs = [head(decoder_feats[level + 1]) for level, head in enumerate(self.ds_heads)]
        return logits, ds_outputs


def build_model(config: ArchConfig, seed: int = 0) -> SegResNet:
    """Construct a SegResNet with deterministic, seed-driven weights.

    Convolution weights get fan-in scaled normal init, biases zeros,
    norm layers weight 1 / bias 0. Two builds with the same seed are
    bitwise identical.
    """
    model = SegResNet(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
                weight = module.weight
                fan_in = weight.shape[1] * weight.shape[2] * weight.shape[3] * weight.shape[4]
                if isinstance(module, nn.ConvTranspose3d):
                    fan_in = weight.shape[0] * weight.shape[2] * weight.shape[3] * weight.shape[4]
                std = math.sqrt(2.0 / fan_in)
                weight.copy_(torch.randn(weight.shape, generator=gen) * std)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm3d):
                module.weight.fill_(1.0)
                module.bias.zero_()
    return model


def save_checkpoint(model: SegResNet, path, *, fold: int, repeat: int, seed: int, **extra) -> None:
    """Atomically write a versioned checkpoint (write-temp-then-rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch": asdict(model.config),
        "normalization_mode": model.normalization_mode,
        "fold": int(fold),
        "repeat": int(repeat),
        "seed": int(seed),
        "state_dict": model.state_dict(),
    }
    payload.update(extra)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path) -> tuple[SegResNet, dict]:
    """Load a checkpoint; returns (model in eval mode, metadata dict)."""
    path = Path(path)
    if not path.is_file():
        raise IOError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {version} not supported (expected {CHECKPOINT_VERSION})")
    arch = payload["arch"]
    arch["blocks_per_stage"] = tuple(arch["blocks_per_stage"])
    model = SegResNet(ArchConfig(**arch))
    model.load_state_dict(payload["state_dict"])
    model.normalization_mode = payload["normalization_mode"]
    model.eval()
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    return model, meta
