"""Semantic map -> synthetic volume, no image input.

z_T ~ N(0, I) -> ancestral sampling conditioned on the map -> min-max inverse
-> nearest codebook entry -> VQ-GAN decoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import torch

from src.data.volume_io import SemanticMap, Volume, log_volume, map_to_tensor, tensor_to_volume
from src.models.diffusion import sample_loop
from src.models.latent_space import minmax_map
from src.models.vqgan import quantize
from src.storage.checkpoint_store import CheckpointBundle
from src.trainers.sdm_trainer import freeze, load_sdm
from src.trainers.vqgan_trainer import load_vqgan
from src.utils.errors import ShapeError
from src.utils.seeding import pick_device


@dataclass
class SynthesisResult:
    volume: Volume
    snapshots: List[Tuple[int, Volume]] = field(default_factory=list)


class Synthesizer:
    """Frozen VQ-GAN + denoiser pair, loaded once for many maps."""

    def __init__(
        self,
        vqgan_ckpt: CheckpointBundle | str | Path,
        sdm_ckpt: CheckpointBundle | str | Path,
        device: Optional[torch.device | str] = None,
    ):
        self.device = torch.device(device) if device is not None else pick_device()
        self.vqgan, _ = load_vqgan(vqgan_ckpt, self.device)
        self.unet, self.schedule, self.latent_range = load_sdm(sdm_ckpt, self.device)
        freeze(self.vqgan)
        freeze(self.unet)
        if self.vqgan.cfg.n_z != self.unet.cfg.n_z:
            raise ShapeError(f"checkpoints disagree on n_z: {self.vqgan.cfg.n_z} vs {self.unet.cfg.n_z}")

    def _check_map(self, m: SemanticMap) -> None:
        t = self.vqgan.cfg.t
        latent = tuple(s // t for s in m.shape)
        if any(s % t for s in m.shape) or latent != tuple(self.unet.cfg.latent_shape):
            raise ShapeError(
                f"map shape {m.shape} does not fit the trained latent grid {self.unet.cfg.latent_shape} at t={t}"
            )
        if m.num_classes != self.unet.cfg.num_classes:
            raise ShapeError(f"map has {m.num_classes} classes, model expects {self.unet.cfg.num_classes}")

    def decode_latent(self, z: torch.Tensor, spacing) -> Volume:
        z_lat = minmax_map(z, self.latent_range, "inverse")
        with torch.no_grad():
            q = quantize(z_lat, self.vqgan.codebook)
            x = self.vqgan.decode(q.z_q).clamp(-1.0, 1.0)
        return tensor_to_volume(x[0], spacing=spacing)

    def __call__(self, m: SemanticMap, seed: int, snapshot_every: Optional[int] = None) -> SynthesisResult:
        self._check_map(m)
        m_t = map_to_tensor(m)[None].to(self.device)
        with torch.no_grad():
            feats = self.unet.semantic(m_t)
        shape = (1, self.unet.cfg.n_z, *self.unet.cfg.latent_shape)
        result = sample_loop(
            shape,
            feats,
            lambda z, t, f: self.unet(z, t, map_features=f),
            self.schedule,
            seed,
            snapshot_every=snapshot_every,
            device=self.device,
        )
        volume = self.decode_latent(result.z0, m.spacing)
        log_volume("synthesized", volume)
        snaps = [(t, self.decode_latent(z.to(self.device), m.spacing)) for t, z in result.snapshots]
        return SynthesisResult(volume=volume, snapshots=snaps)


def synthesize(
    m: SemanticMap,
    vqgan_ckpt: CheckpointBundle | str | Path,
    sdm_ckpt: CheckpointBundle | str | Path,
    seed: int,
    snapshot_every: Optional[int] = None,
    device: Optional[torch.device | str] = None,
) -> SynthesisResult:
    return Synthesizer(vqgan_ckpt, sdm_ckpt, device)(m, seed, snapshot_every)
