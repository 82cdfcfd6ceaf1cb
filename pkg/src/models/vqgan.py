"""VQ-GAN compression networks: encoder, codebook quantizer, decoder, discriminators.

Tensors follow torch layout (N, C, H, W, L); the depth/slice axis is last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.autograd import Function

from src.utils.config import RunConfig
from src.utils.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class CompressionConfig:
    t: int = 2
    n_z: int = 8
    K: int = 512
    base_channels: int = 16
    num_groups: int = 4
    in_channels: int = 1
    num_res_blocks: int = 1
    disc_channels: int = 16
    num_slices: int = 2
    feature_channels: Tuple[int, ...] = (8, 16)
    feature_seed: int = 1234
    alpha: float = 1.0
    disc_weight: float = 1.0
    disc_start: int = 0
    lambda_max: float = 1.0e4

    def __post_init__(self):
        if self.t < 1 or self.t & (self.t - 1):
            raise ConfigError(f"t must be a power of two, got {self.t}", ("compression.t",))
        if self.K < 2:
            raise ConfigError(f"K must be >= 2, got {self.K}", ("compression.K",))
        if self.n_z < 1:
            raise ConfigError(f"n_z must be >= 1, got {self.n_z}", ("compression.n_z",))
        if self.base_channels % self.num_groups:
            raise ConfigError(
                f"base_channels={self.base_channels} not divisible by num_groups={self.num_groups}",
                ("compression.base_channels", "compression.num_groups"),
            )

    @property
    def num_down(self) -> int:
        return int(round(math.log2(self.t)))

    @classmethod
    def from_run(cls, cfg: RunConfig) -> "CompressionConfig":
        c = cfg.compression
        return cls(
            t=c.t,
            n_z=c.n_z,
            K=c.K,
            base_channels=c.base_channels,
            num_groups=c.num_groups,
            in_channels=cfg.data.channels,
            disc_channels=c.disc_channels,
            num_slices=c.num_slices,
            feature_channels=tuple(c.feature_channels),
            feature_seed=c.feature_seed,
            alpha=c.alpha,
            disc_weight=c.disc_weight,
            disc_start=c.disc_start,
            lambda_max=c.lambda_max,
        )

    def check_spatial(self, shape: Sequence[int]) -> None:
        if any(int(s) % self.t for s in shape):
            raise ShapeError(f"spatial shape {tuple(shape)} is not divisible by t={self.t}")


# ---------- building blocks ----------

class ResBlock3d(nn.Module):
    def __init__(self, channels: int, num_groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(num_groups, channels)
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(num_groups, channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class Encoder(nn.Module):
    """x (N, C, H, W, L) -> ẑ (N, n_z, H/t, W/t, L/t)."""

    def __init__(self, cfg: CompressionConfig):
        super().__init__()
        ch = cfg.base_channels
        self.conv_in = nn.Conv3d(cfg.in_channels, ch, 3, padding=1)
        self.down = nn.ModuleList(nn.Conv3d(ch, ch, 4, stride=2, padding=1) for _ in range(cfg.num_down))
        self.blocks = nn.Sequential(*[ResBlock3d(ch, cfg.num_groups) for _ in range(cfg.num_res_blocks)])
        self.norm_out = nn.GroupNorm(cfg.num_groups, ch)
        self.conv_out = nn.Conv3d(ch, cfg.n_z, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv_in(x)
        for conv in self.down:
            h = conv(F.silu(h))
        h = self.blocks(h)
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder(nn.Module):
    """z_q (N, n_z, h, w, l) -> x̂ (N, C, h·t, w·t, l·t)."""

    def __init__(self, cfg: CompressionConfig):
        super().__init__()
        ch = cfg.base_channels
        self.conv_in = nn.Conv3d(cfg.n_z, ch, 3, padding=1)
        self.blocks = nn.Sequential(*[ResBlock3d(ch, cfg.num_groups) for _ in range(cfg.num_res_blocks)])
        self.up = nn.ModuleList(nn.Conv3d(ch, ch, 3, padding=1) for _ in range(cfg.num_down))
        self.norm_out = nn.GroupNorm(cfg.num_groups, ch)
        self.conv_out = nn.Conv3d(ch, cfg.in_channels, 3, padding=1)

    @property
    def last_layer(self) -> torch.Tensor:
        return self.conv_out.weight

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.blocks(self.conv_in(z))
        for conv in self.up:
            h = conv(F.interpolate(h, scale_factor=2.0, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


class Codebook(nn.Module):
    def __init__(self, K: int, n_z: int):
        super().__init__()
        self.embedding = nn.Embedding(K, n_z)
        self.embedding.weight.data.uniform_(-1.0 / K, 1.0 / K)

    @property
    def entries(self) -> torch.Tensor:
        return self.embedding.weight

    @property
    def K(self) -> int:
        return self.embedding.num_embeddings


@dataclass
class QuantizationResult:
    z_q: torch.Tensor
    indices: torch.Tensor
    codebook_term: torch.Tensor
    commitment_term: torch.Tensor


def nearest_indices(flat: torch.Tensor, entries: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    """argmin_k ||flat_i - e_k||^2 per row; ties resolve to the lowest k."""
    out = []
    for start in range(0, flat.shape[0], chunk):
        part = flat[start:start + chunk]
        dist = ((part[:, None, :] - entries[None, :, :]) ** 2).sum(dim=-1)
        out.append(torch.argmin(dist, dim=1))
    if not out:
        return torch.zeros(0, dtype=torch.long, device=flat.device)
    return torch.cat(out)


class _StraightThrough(Function):
    """Forward returns the codebook rows exactly; backward hands the gradient to ẑ."""

    @staticmethod
    def forward(ctx, z_hat, z_q):
        return z_q.clone()

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def straight_through(z_hat: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    return _StraightThrough.apply(z_hat, z_q)


def quantize(z_hat: torch.Tensor, codebook: Union[Codebook, torch.Tensor]) -> QuantizationResult:
    """Nearest-entry quantization with straight-through gradients.

    Loss terms are squared-error sums divided by the batch size.
    """
    entries = codebook.entries if isinstance(codebook, Codebook) else codebook
    if entries.ndim != 2 or entries.shape[0] == 0:
        raise ConfigError("codebook is empty", ("compression.K",))
    if z_hat.ndim != 5 or z_hat.shape[1] != entries.shape[1]:
        raise ShapeError(f"latent {tuple(z_hat.shape)} does not carry n_z={entries.shape[1]} channels")
    n, c = z_hat.shape[:2]
    spatial = z_hat.shape[2:]
    flat = z_hat.detach().permute(0, 2, 3, 4, 1).reshape(-1, c)
    with torch.no_grad():
        idx = nearest_indices(flat, entries.detach())
    z_q = entries[idx].reshape(n, *spatial, c).permute(0, 4, 1, 2, 3)
    codebook_term = ((z_hat.detach() - z_q) ** 2).sum() / n
    commitment_term = ((z_q.detach() - z_hat) ** 2).sum() / n
    z_st = straight_through(z_hat, z_q.detach())
    return QuantizationResult(
        z_q=z_st,
        indices=idx.reshape(n, *spatial),
        codebook_term=codebook_term,
        commitment_term=commitment_term,
    )


# ---------- discriminators ----------

def _disc_stack(conv: type, in_ch: int, ch: int) -> nn.Sequential:
    return nn.Sequential(
        conv(in_ch, ch, 3, stride=2, padding=1),
        nn.LeakyReLU(0.2),
        conv(ch, 2 * ch, 3, stride=2, padding=1),
        nn.GroupNorm(1, 2 * ch),
        nn.LeakyReLU(0.2),
        conv(2 * ch, 1, 3, padding=1),
    )


class Discriminator3D(nn.Module):
    """Patch logits over full volumes."""

    def __init__(self, in_channels: int, channels: int):
        super().__init__()
        self.net = _disc_stack(nn.Conv3d, in_channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class Discriminator2D(nn.Module):
    """Patch logits over (N·s, C, H, W) slices."""

    def __init__(self, in_channels: int, channels: int):
        super().__init__()
        self.net = _disc_stack(nn.Conv2d, in_channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


# ---------- perceptual features ----------

class SliceFeatureNet(nn.Module):
    """Fixed multi-layer 2D feature extractor; returns every stage's output.

    Default stages are seeded random convolutions. Weights are frozen.
    """

    def __init__(
        self,
        in_channels: int = 1,
        channels: Sequence[int] = (8, 16),
        seed: int = 1234,
        layers: Optional[List[nn.Module]] = None,
    ):
        super().__init__()
        if layers is None:
            layers = []
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                prev = in_channels
                for ch in channels:
                    layers.append(nn.Sequential(nn.Conv2d(prev, ch, 3, padding=1), nn.LeakyReLU(0.2)))
                    prev = ch
        self.stages = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True) -> "SliceFeatureNet":
        return super().train(False)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = []
        h = x
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats


def volume_slices(x: torch.Tensor) -> torch.Tensor:
    """(N, C, H, W, L) -> (N·L, C, H, W), every depth slice."""
    n, c, h, w, l = x.shape
    return x.permute(0, 4, 1, 2, 3).reshape(n * l, c, h, w)


def take_slices(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """Gather per-volume depth slices: idx (N, s) -> (N·s, C, H, W)."""
    n, c, h, w, _ = x.shape
    s = idx.shape[1]
    gather = idx.to(x.device).view(n, 1, 1, 1, s).expand(n, c, h, w, s)
    return torch.gather(x, 4, gather).permute(0, 4, 1, 2, 3).reshape(n * s, c, h, w)


# ---------- full model ----------

class VQGAN(nn.Module):
    def __init__(self, cfg: CompressionConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.codebook = Codebook(cfg.K, cfg.n_z)
        self.disc2d = Discriminator2D(cfg.in_channels, cfg.disc_channels)
        self.disc3d = Discriminator3D(cfg.in_channels, cfg.disc_channels)
        self.perceptual = SliceFeatureNet(cfg.in_channels, cfg.feature_channels, cfg.feature_seed)

    def autoencoder_parameters(self) -> List[nn.Parameter]:
        return [*self.encoder.parameters(), *self.decoder.parameters(), *self.codebook.parameters()]

    def discriminator_parameters(self) -> List[nn.Parameter]:
        return [*self.disc2d.parameters(), *self.disc3d.parameters()]

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected (N, {self.cfg.in_channels}, H, W, L), got {tuple(x.shape)}")
        self.cfg.check_spatial(x.shape[2:])
        return self.encoder(x)

    def quantize(self, z_hat: torch.Tensor) -> QuantizationResult:
        return quantize(z_hat, self.codebook)

    def decode(self, z_q: torch.Tensor) -> torch.Tensor:
        if z_q.ndim != 5 or z_q.shape[1] != self.cfg.n_z:
            raise ShapeError(f"expected (N, {self.cfg.n_z}, h, w, l), got {tuple(z_q.shape)}")
        return self.decoder(z_q)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, QuantizationResult]:
        z_hat = self.encode(x)
        q = self.quantize(z_hat)
        return self.decode(q.z_q), z_hat, q


def encode(x: np.ndarray, model: VQGAN) -> np.ndarray:
    """Volume array (H, W, L, C) -> latent (H/t, W/t, L/t, n_z)."""
    if x.ndim != 4:
        raise ShapeError(f"expected (H, W, L, C), got {x.shape}")
    param = next(model.parameters())
    xt = torch.as_tensor(np.moveaxis(x, -1, 0)[None], dtype=param.dtype, device=param.device)
    with torch.no_grad():
        z = model.encode(xt)
    return np.moveaxis(z[0].cpu().numpy(), 0, -1)


def decode(z_q: np.ndarray, model: VQGAN) -> np.ndarray:
    """Latent (h, w, l, n_z) -> volume array (h·t, w·t, l·t, C)."""
    if z_q.ndim != 4:
        raise ShapeError(f"expected (h, w, l, n_z), got {z_q.shape}")
    param = next(model.parameters())
    zt = torch.as_tensor(np.moveaxis(z_q, -1, 0)[None], dtype=param.dtype, device=param.device)
    with torch.no_grad():
        x = model.decode(zt)
    return np.moveaxis(x[0].cpu().numpy(), 0, -1)


def perplexity(counts: np.ndarray) -> float:
    """exp of the entropy of the assignment distribution."""
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))


def codebook_usage(indices: torch.Tensor | np.ndarray, K: int) -> Tuple[np.ndarray, float]:
    """Per-entry assignment counts and their perplexity."""
    flat = np.asarray(indices.cpu() if isinstance(indices, torch.Tensor) else indices).reshape(-1)
    counts = np.bincount(flat, minlength=K).astype(np.int64)
    return counts, perplexity(counts)
