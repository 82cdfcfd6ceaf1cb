"""SPADE-conditioned 3D denoising U-Net ε_θ(z_t, t, m).

The encoder path sees only z_t and the time embedding; the semantic map enters
the decoder path through SPADE at every decoder resblock.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.utils.config import RunConfig
from src.utils.errors import ConfigError, ShapeError


GN_EPS = 1e-5
AttentionMode = Literal["spatial", "cross_slice"]


@dataclass(frozen=True)
class DenoiserConfig:
    n_z: int
    num_classes: int
    latent_shape: Tuple[int, int, int]
    t: int = 2
    channels: Tuple[int, ...] = (32, 64)
    num_groups: int = 8
    time_dim: int = 64
    map_channels: int = 32
    spade_hidden: int = 32
    spade_kernel: int = 3
    attention_levels: Tuple[int, ...] = (0, 1)

    def __post_init__(self):
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ConfigError(f"channel widths must be positive: {self.channels}", ("denoiser.channels",))
        bad = [c for c in self.channels if c % self.num_groups]
        if bad:
            raise ConfigError(
                f"channels {bad} not divisible by num_groups={self.num_groups}",
                ("denoiser.channels", "denoiser.num_groups"),
            )
        if any(s < 1 for s in self.latent_shape):
            raise ConfigError(f"latent extents must be >= 1: {self.latent_shape}", ("data.shape", "compression.t"))
        if any(not 0 <= lv < len(self.channels) for lv in self.attention_levels):
            raise ConfigError(f"attention levels {self.attention_levels} out of range", ("denoiser.attention_levels",))
        if self.time_dim < 2 or self.time_dim % 2:
            raise ConfigError(f"time_dim must be even, got {self.time_dim}", ("denoiser.time_dim",))
        if self.spade_kernel not in (1, 3):
            raise ConfigError(f"spade_kernel must be 1 or 3, got {self.spade_kernel}", ("denoiser.spade_kernel",))

    @property
    def num_levels(self) -> int:
        return len(self.channels)

    @classmethod
    def from_run(cls, cfg: RunConfig) -> "DenoiserConfig":
        d = cfg.denoiser
        return cls(
            n_z=cfg.compression.n_z,
            num_classes=cfg.data.num_classes,
            latent_shape=cfg.latent_shape,
            t=cfg.compression.t,
            channels=tuple(d.channels),
            num_groups=d.num_groups,
            time_dim=d.time_dim,
            map_channels=d.map_channels,
            spade_hidden=d.spade_hidden,
            spade_kernel=d.spade_kernel,
            attention_levels=tuple(d.attention_levels),
        )


def level_strides(shape: Sequence[int], num_levels: int) -> Tuple[List[Tuple[int, int, int]], List[Tuple[int, ...]]]:
    """Per-transition strides (2 on even extents >= 2, else 1) and the resulting level shapes."""
    shapes = [tuple(int(s) for s in shape)]
    strides = []
    for _ in range(num_levels - 1):
        cur = shapes[-1]
        st = tuple(2 if s >= 2 and s % 2 == 0 else 1 for s in cur)
        strides.append(st)
        shapes.append(tuple(s // k for s, k in zip(cur, st)))
    return strides, shapes


# ---------- primitives ----------

def time_embed(t: Union[int, torch.Tensor], dim: int) -> torch.Tensor:
    """Sinusoidal embedding, (N,) -> (N, dim)."""
    if not isinstance(t, torch.Tensor):
        t = torch.tensor([t])
    t = t.reshape(-1).to(torch.float64)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t[:, None] * freqs.to(t.device)[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb.to(torch.get_default_dtype())


def group_norm(f: torch.Tensor, num_groups: int, eps: float = GN_EPS) -> torch.Tensor:
    """Parameter-free group normalization over (group channels x spatial)."""
    if f.shape[1] % num_groups:
        raise ConfigError(f"{f.shape[1]} channels not divisible by {num_groups} groups", ("denoiser.num_groups",))
    return F.group_norm(f, num_groups, eps=eps)


def _broadcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return v.view(v.shape[0], v.shape[1], *([1] * (like.ndim - 2)))


class TimeScaleShift(nn.Module):
    """f -> w(t)·f + b(t), per-channel; w starts near 1."""

    def __init__(self, time_dim: int, channels: int):
        super().__init__()
        self.channels = channels
        self.mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, 2 * channels))
        with torch.no_grad():
            self.mlp[-1].bias[:channels].fill_(1.0)
            self.mlp[-1].bias[channels:].zero_()

    @property
    def out(self) -> nn.Linear:
        return self.mlp[-1]

    def scale_shift(self, emb: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        w, b = self.mlp(emb).chunk(2, dim=1)
        return w, b

    def forward(self, f: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        if f.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {f.shape[1]}")
        w, b = self.scale_shift(emb)
        return _broadcast(w, f) * f + _broadcast(b, f)


class EncoderResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, num_groups: int):
        super().__init__()
        self.in_ch, self.num_groups = in_ch, num_groups
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.time = TimeScaleShift(time_dim, out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv3d(in_ch, out_ch, 1)

    def forward(self, f: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        if f.ndim != 5 or f.shape[1] != self.in_ch:
            raise ShapeError(f"expected (N, {self.in_ch}, H, W, L), got {tuple(f.shape)}")
        h = self.conv1(F.silu(group_norm(f, self.num_groups)))
        h = self.time(h, emb)
        h = self.conv2(F.silu(group_norm(h, self.num_groups)))
        return self.skip(f) + h


def encoder_resblock(f: torch.Tensor, emb: torch.Tensor, block: EncoderResBlock) -> torch.Tensor:
    return block(f, emb)


# ---------- SPADE ----------

def _resample_to(features: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    src = tuple(features.shape[2:])
    size = tuple(int(s) for s in size)
    if src == size:
        return features
    ok = all(a % b == 0 or b % a == 0 for a, b in zip(src, size))
    if len(src) != len(size) or not ok:
        raise ShapeError(f"semantic features {src} cannot be resampled to {size}")
    return F.interpolate(features, size=size, mode="nearest")


class SPADE(nn.Module):
    """γ(map)·group_norm(f) + β(map) with full spatial γ, β."""

    def __init__(self, channels: int, map_channels: int, hidden: int, num_groups: int, kernel: int = 3):
        super().__init__()
        pad = kernel // 2
        self.channels, self.num_groups = channels, num_groups
        self.shared = nn.Sequential(nn.Conv3d(map_channels, hidden, kernel, padding=pad), nn.ReLU())
        self.gamma = nn.Conv3d(hidden, channels, kernel, padding=pad)
        self.beta = nn.Conv3d(hidden, channels, kernel, padding=pad)
        with torch.no_grad():
            self.gamma.bias.fill_(1.0)

    def modulation(self, map_features: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self.shared(map_features)
        return self.gamma(h), self.beta(h)

    def forward(self, f: torch.Tensor, map_features: torch.Tensor) -> torch.Tensor:
        if map_features.shape[0] != f.shape[0]:
            raise ShapeError(f"batch mismatch: features {map_features.shape[0]} vs f {f.shape[0]}")
        feats = _resample_to(map_features, f.shape[2:])
        gamma, beta = self.modulation(feats)
        if gamma.shape != f.shape:
            raise ShapeError(f"modulation {tuple(gamma.shape)} does not match f {tuple(f.shape)}")
        return gamma * group_norm(f, self.num_groups) + beta


def spade_modulate(f: torch.Tensor, map_features: torch.Tensor, spade: SPADE) -> torch.Tensor:
    return spade(f, map_features)


class DecoderResBlock(nn.Module):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        map_channels: int,
        time_dim: int,
        num_groups: int,
        hidden: int,
        kernel: int,
    ):
        super().__init__()
        self.in_ch = in_ch
        self.spade1 = SPADE(in_ch, map_channels, hidden, num_groups, kernel)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.time = TimeScaleShift(time_dim, out_ch)
        self.spade2 = SPADE(out_ch, map_channels, hidden, num_groups, kernel)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv3d(in_ch, out_ch, 1)

    def forward(self, f: torch.Tensor, emb: torch.Tensor, map_features: torch.Tensor) -> torch.Tensor:
        if f.ndim != 5 or f.shape[1] != self.in_ch:
            raise ShapeError(f"expected (N, {self.in_ch}, H, W, L), got {tuple(f.shape)}")
        h = self.conv1(F.silu(self.spade1(f, map_features)))
        h = self.time(h, emb)
        h = self.conv2(F.silu(self.spade2(h, map_features)))
        return self.skip(f) + h


# ---------- attention ----------

class Attention(nn.Module):
    """Single-head softmax attention with a residual connection.

    spatial: tokens are the H·W sites of one slice. cross_slice: tokens are the L slices of one (h, w) site.
    """

    def __init__(self, channels: int, mode: AttentionMode):
        super().__init__()
        if mode not in ("spatial", "cross_slice"):
            raise ConfigError(f"unknown attention mode {mode!r}")
        self.mode = mode
        self.norm = nn.LayerNorm(channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)
        self.scale = 1.0 / math.sqrt(channels)

    def _tokens(self, f: torch.Tensor) -> torch.Tensor:
        n, c, h, w, l = f.shape
        if self.mode == "spatial":
            return f.permute(0, 4, 2, 3, 1).reshape(n * l, h * w, c)
        return f.permute(0, 2, 3, 4, 1).reshape(n * h * w, l, c)

    def _untokens(self, x: torch.Tensor, shape: torch.Size) -> torch.Tensor:
        n, c, h, w, l = shape
        if self.mode == "spatial":
            return x.reshape(n, l, h, w, c).permute(0, 4, 2, 3, 1)
        return x.reshape(n, h, w, l, c).permute(0, 4, 1, 2, 3)

    def _weights(self, x: torch.Tensor) -> torch.Tensor:
        scores = self.q(x) @ self.k(x).transpose(1, 2) * self.scale
        return scores.softmax(dim=-1)

    def attention_weights(self, f: torch.Tensor) -> torch.Tensor:
        return self._weights(self.norm(self._tokens(f)))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.ndim != 5:
            raise ShapeError(f"expected (N, C, H, W, L), got {tuple(f.shape)}")
        x = self.norm(self._tokens(f))
        out = self.out(self._weights(x) @ self.v(x))
        return f + self._untokens(out, f.shape)


def attention(f: torch.Tensor, module: Attention) -> torch.Tensor:
    return module(f)


# ---------- semantic encoder ----------

class SemanticEncoder(nn.Module):
    """One-hot map at volume resolution -> one feature map per U-Net level.

    Level 0 sits at latent resolution; every reduction is a learned strided convolution.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.num_classes = cfg.num_classes
        self.t = cfg.t
        ch = cfg.map_channels
        self.stem = nn.Conv3d(cfg.num_classes, ch, 3, padding=1)
        n_down = int(round(math.log2(cfg.t)))
        self.to_latent = nn.ModuleList(nn.Conv3d(ch, ch, 3, stride=2, padding=1) for _ in range(n_down))
        strides, _ = level_strides(cfg.latent_shape, cfg.num_levels)
        self.levels = nn.ModuleList(nn.Conv3d(ch, ch, 3, stride=st, padding=1) for st in strides)

    def forward(self, m: torch.Tensor) -> List[torch.Tensor]:
        if m.ndim != 5 or m.shape[1] != self.num_classes:
            raise ShapeError(f"semantic map must be (N, {self.num_classes}, H, W, L) one-hot, got {tuple(m.shape)}")
        if any(s % self.t for s in m.shape[2:]):
            raise ShapeError(f"map spatial shape {tuple(m.shape[2:])} not divisible by t={self.t}")
        h = F.silu(self.stem(m))
        for conv in self.to_latent:
            h = F.silu(conv(h))
        feats = [h]
        for conv in self.levels:
            h = F.silu(conv(h))
            feats.append(h)
        return feats


def semantic_encode(m: torch.Tensor, encoder: SemanticEncoder) -> List[torch.Tensor]:
    return encoder(m)


# ---------- U-Net ----------

class UNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        chs = cfg.channels
        g, td = cfg.num_groups, cfg.time_dim
        self.strides, self.level_shapes = level_strides(cfg.latent_shape, cfg.num_levels)

        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.semantic = SemanticEncoder(cfg)
        self.conv_in = nn.Conv3d(cfg.n_z, chs[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = chs[0]
        for i, ch in enumerate(chs):
            self.down_blocks.append(EncoderResBlock(prev, ch, td, g))
            if i < len(chs) - 1:
                self.downsample.append(nn.Conv3d(ch, ch, 3, stride=self.strides[i], padding=1))
            prev = ch

        self.up_blocks = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(chs))):
            self.up_blocks.append(
                DecoderResBlock(2 * chs[i], chs[i], cfg.map_channels, td, g, cfg.spade_hidden, cfg.spade_kernel)
            )
            if i > 0:
                self.upsample.append(nn.Conv3d(chs[i], chs[i - 1], 3, padding=1))

        self.down_attn = nn.ModuleDict()
        self.up_attn = nn.ModuleDict()
        for lv in cfg.attention_levels:
            self.down_attn[str(lv)] = nn.ModuleList([Attention(chs[lv], "spatial"), Attention(chs[lv], "cross_slice")])
            self.up_attn[str(lv)] = nn.ModuleList([Attention(chs[lv], "spatial"), Attention(chs[lv], "cross_slice")])

        self.conv_out = nn.Conv3d(chs[0], cfg.n_z, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def _attend(self, table: nn.ModuleDict, level: int, h: torch.Tensor) -> torch.Tensor:
        for attn in table[str(level)] if str(level) in table else ():
            h = attn(h)
        return h

    def _check_latent(self, z_t: torch.Tensor) -> None:
        want = (self.cfg.n_z, *self.cfg.latent_shape)
        if z_t.ndim != 5 or tuple(z_t.shape[1:]) != want:
            raise ShapeError(f"z_t must be (N, {', '.join(map(str, want))}), got {tuple(z_t.shape)}")

    def forward(
        self,
        z_t: torch.Tensor,
        t: Union[int, torch.Tensor],
        m: Optional[torch.Tensor] = None,
        map_features: Optional[List[torch.Tensor]] = None,
    ) -> torch.Tensor:
        self._check_latent(z_t)
        if map_features is None:
            if m is None:
                raise ShapeError("either a semantic map or precomputed map features is required")
            map_features = self.semantic(m)
        if len(map_features) != self.cfg.num_levels:
            raise ShapeError(f"expected {self.cfg.num_levels} semantic levels, got {len(map_features)}")

        n = z_t.shape[0]
        t_vec = t if isinstance(t, torch.Tensor) else torch.tensor([t])
        t_vec = t_vec.reshape(-1).expand(n) if t_vec.numel() == 1 else t_vec.reshape(-1)
        if t_vec.shape[0] != n:
            raise ShapeError(f"{t_vec.shape[0]} time steps for a batch of {n}")
        emb = self.time_mlp(time_embed(t_vec.to(z_t.device), self.cfg.time_dim).to(z_t.dtype).to(z_t.device))

        h = self.conv_in(z_t)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, emb)
            h = self._attend(self.down_attn, i, h)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)

        up_iter = iter(self.upsample)
        for j, block in enumerate(self.up_blocks):
            i = self.cfg.num_levels - 1 - j
            h = block(torch.cat([h, skips[i]], dim=1), emb, map_features[i])
            h = self._attend(self.up_attn, i, h)
            if i > 0:
                h = F.interpolate(h, size=skips[i - 1].shape[2:], mode="nearest")
                h = next(up_iter)(h)

        return self.conv_out(F.silu(group_norm(h, self.cfg.num_groups)))


def predict_noise(
    z_t: torch.Tensor,
    t: Union[int, torch.Tensor],
    m: Optional[torch.Tensor],
    model: UNet,
    map_features: Optional[List[torch.Tensor]] = None,
) -> torch.Tensor:
    return model(z_t, t, m=m, map_features=map_features)
