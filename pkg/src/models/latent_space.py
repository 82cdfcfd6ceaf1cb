"""Codebook-derived min-max mapping between VQ-GAN latents and [-1, 1]."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Literal, Union

import numpy as np
import torch

from src.utils.errors import DomainError


ArrayLike = Union[np.ndarray, torch.Tensor]


class DegenerateRangeError(DomainError):
    pass


@dataclass(frozen=True)
class LatentRange:
    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise DegenerateRangeError(f"latent range must be finite: ({self.lo}, {self.hi})")
        if not self.hi > self.lo:
            raise DegenerateRangeError(f"collapsed latent range: lo={self.lo} hi={self.hi}")

    def to_dict(self) -> Dict[str, float]:
        return {"lo": float(self.lo), "hi": float(self.hi)}

    @classmethod
    def from_dict(cls, d: Dict[str, float]) -> "LatentRange":
        return cls(lo=float(d["lo"]), hi=float(d["hi"]))


def codebook_range(codebook: ArrayLike) -> LatentRange:
    """Global min / max over every codebook scalar."""
    arr = codebook.detach().cpu().numpy() if isinstance(codebook, torch.Tensor) else np.asarray(codebook)
    if arr.size == 0:
        raise DegenerateRangeError("codebook is empty")
    return LatentRange(lo=float(arr.min()), hi=float(arr.max()))


def minmax_map(z: ArrayLike, rng: LatentRange, direction: Literal["forward", "inverse"] = "forward") -> ArrayLike:
    """forward: clip to [lo, hi] then affine onto [-1, 1]; inverse: the exact affine inverse."""
    span = rng.hi - rng.lo
    if direction == "forward":
        clipped = z.clamp(rng.lo, rng.hi) if isinstance(z, torch.Tensor) else np.clip(z, rng.lo, rng.hi)
        return 2.0 * (clipped - rng.lo) / span - 1.0
    if direction == "inverse":
        return (z + 1.0) * (span / 2.0) + rng.lo
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
