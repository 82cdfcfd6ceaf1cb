"""Downstream 3D segmentation network used to measure mask faithfulness.

Two-level U-Net3D: kernel 3, InstanceNorm3d, ReLU; trained with Dice + cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from monai.losses import DiceCELoss

from src.utils.config import RunConfig
from src.utils.errors import ShapeError


@dataclass(frozen=True)
class SegHarnessConfig:
    num_classes: int = 2
    in_channels: int = 1
    kernel_size: int = 3
    base_channels: int = 16
    lr: float = 5e-5
    epochs: int = 10
    batch_size: int = 4
    patch_size: Tuple[int, int, int] = (32, 32, 8)

    @classmethod
    def from_run(cls, cfg: RunConfig) -> "SegHarnessConfig":
        s = cfg.segmentation
        return cls(
            num_classes=cfg.seg_classes,
            in_channels=s.in_channels,
            kernel_size=s.kernel_size,
            base_channels=s.base_channels,
            lr=s.lr,
            epochs=s.epochs,
            batch_size=s.batch_size,
            patch_size=tuple(s.patch_size),
        )


def _double_conv(in_ch: int, out_ch: int, k: int) -> nn.Sequential:
    pad = k // 2
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, k, padding=pad),
        nn.InstanceNorm3d(out_ch),
        nn.ReLU(inplace=True),
        nn.Conv3d(out_ch, out_ch, k, padding=pad),
        nn.InstanceNorm3d(out_ch),
        nn.ReLU(inplace=True),
    )


class SegUNet3D(nn.Module):
    def __init__(self, cfg: SegHarnessConfig):
        super().__init__()
        b, k = cfg.base_channels, cfg.kernel_size
        self.num_classes = cfg.num_classes
        self.in_channels = cfg.in_channels
        self.enc1 = _double_conv(cfg.in_channels, b, k)
        self.enc2 = _double_conv(b, 2 * b, k)
        self.bottom = _double_conv(2 * b, 4 * b, k)
        self.dec2 = _double_conv(6 * b, 2 * b, k)
        self.dec1 = _double_conv(3 * b, b, k)
        self.head = nn.Conv3d(b, cfg.num_classes, 1)

    @staticmethod
    def _pool(x: torch.Tensor) -> torch.Tensor:
        kernel = tuple(2 if s >= 2 else 1 for s in x.shape[2:])
        return F.max_pool3d(x, kernel_size=kernel, stride=kernel)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected (N, {self.in_channels}, H, W, L), got {tuple(x.shape)}")
        e1 = self.enc1(x)
        e2 = self.enc2(self._pool(e1))
        h = self.bottom(self._pool(e2))
        h = F.interpolate(h, size=e2.shape[2:], mode="trilinear", align_corners=False)
        h = self.dec2(torch.cat([h, e2], dim=1))
        h = F.interpolate(h, size=e1.shape[2:], mode="trilinear", align_corners=False)
        h = self.dec1(torch.cat([h, e1], dim=1))
        return self.head(h)


def make_seg_loss() -> DiceCELoss:
    """Soft Dice + cross-entropy on softmax logits; targets are (N, 1, H, W, L) class indices."""
    return DiceCELoss(to_onehot_y=True, softmax=True)
