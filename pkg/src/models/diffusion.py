"""Cosine noise schedule plus forward (noising) and ancestral reverse steps.

Step indices run 1..T. ``alpha_bar[t-1]`` is the cumulative product of (1 - β) up to t;
``alpha_bar_0`` is taken as 1.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from src.utils.errors import ConfigError, DomainError, ShapeError, TrainingDivergenceError


BETA_MAX = 0.999
BETA_MIN = 1e-12

StepLike = Union[int, torch.Tensor]
NoisePredictor = Callable[[torch.Tensor, torch.Tensor, Optional[object]], torch.Tensor]


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta: torch.Tensor
    alpha_bar: torch.Tensor
    s: float = 0.008

    def to_dict(self) -> dict:
        return {"T": self.T, "s": self.s, "beta": self.beta.tolist(), "alpha_bar": self.alpha_bar.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        return cls(
            T=int(d["T"]),
            beta=torch.tensor(d["beta"], dtype=torch.float64),
            alpha_bar=torch.tensor(d["alpha_bar"], dtype=torch.float64),
            s=float(d.get("s", 0.008)),
        )

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])


def build_cosine_schedule(T: int, s: float = 0.008) -> DiffusionSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}", ("diffusion.T",))
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T + s) / (1.0 + s)) * math.pi / 2.0) ** 2
    ab = f / f[0]
    beta = 1.0 - ab[1:] / ab[:-1]
    beta = np.clip(beta, BETA_MIN, BETA_MAX)
    alpha_bar = np.cumprod(1.0 - beta)
    return DiffusionSchedule(
        T=T,
        beta=torch.from_numpy(beta),
        alpha_bar=torch.from_numpy(alpha_bar),
        s=float(s),
    )


def _check_step(t: StepLike, schedule: DiffusionSchedule) -> None:
    lo, hi = (int(t.min()), int(t.max())) if isinstance(t, torch.Tensor) else (int(t), int(t))
    if lo < 1 or hi > schedule.T:
        raise DomainError(f"step outside [1, {schedule.T}]: {t if not isinstance(t, torch.Tensor) else (lo, hi)}")


def _per_sample(values: torch.Tensor, t: StepLike, like: torch.Tensor) -> torch.Tensor:
    """values[t-1] broadcast against ``like`` (N, ...)."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        v = values[t.long().cpu() - 1]
        return v.to(like.device, like.dtype).view(-1, *([1] * (like.ndim - 1)))
    return torch.as_tensor(float(values[int(t) - 1]), dtype=like.dtype, device=like.device)


@dataclass
class NoisingResult:
    z_t: torch.Tensor
    eps: torch.Tensor
    t: StepLike


def forward_sample(z0: torch.Tensor, t: StepLike, eps: torch.Tensor, schedule: DiffusionSchedule) -> NoisingResult:
    """z_t = √ᾱ_t·z0 + √(1-ᾱ_t)·ε."""
    if z0.shape != eps.shape:
        raise ShapeError(f"eps {tuple(eps.shape)} does not match z0 {tuple(z0.shape)}")
    _check_step(t, schedule)
    ab = _per_sample(schedule.alpha_bar, t, z0)
    return NoisingResult(z_t=ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps, eps=eps, t=t)


def forward_step(z_prev: torch.Tensor, t: int, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """One transition q(z_t | z_{t-1}): √(1-β_t)·z + √β_t·ε."""
    if z_prev.shape != eps.shape:
        raise ShapeError(f"eps {tuple(eps.shape)} does not match z {tuple(z_prev.shape)}")
    _check_step(t, schedule)
    b = _per_sample(schedule.beta, t, z_prev)
    return (1.0 - b).sqrt() * z_prev + b.sqrt() * eps


def simple_loss(eps: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    if eps.shape != eps_pred.shape:
        raise ShapeError(f"eps {tuple(eps.shape)} vs prediction {tuple(eps_pred.shape)}")
    return F.mse_loss(eps_pred, eps)


def posterior_variance(schedule: DiffusionSchedule, t: int) -> float:
    """σ_t² = β_t·(1 - ᾱ_{t-1}) / (1 - ᾱ_t); zero at t = 1."""
    _check_step(t, schedule)
    beta = float(schedule.beta[t - 1])
    ab = float(schedule.alpha_bar[t - 1])
    return beta * (1.0 - schedule.alpha_bar_prev(t)) / (1.0 - ab)


def reverse_step(
    z_t: torch.Tensor,
    t: int,
    eps_pred: torch.Tensor,
    schedule: DiffusionSchedule,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Ancestral step z_t -> z_{t-1}. ``noise`` is required for t > 1 and refused at t = 1."""
    _check_step(t, schedule)
    if z_t.shape != eps_pred.shape:
        raise ShapeError(f"eps_pred {tuple(eps_pred.shape)} does not match z_t {tuple(z_t.shape)}")
    if t > 1 and noise is None:
        raise DomainError(f"noise is required at t={t}")
    if t == 1 and noise is not None:
        raise DomainError("noise must be omitted at t=1")
    beta = float(schedule.beta[t - 1])
    ab = float(schedule.alpha_bar[t - 1])
    mean = (z_t - (beta / math.sqrt(1.0 - ab)) * eps_pred) / math.sqrt(1.0 - beta)
    if t == 1:
        return mean
    if noise.shape != z_t.shape:
        raise ShapeError(f"noise {tuple(noise.shape)} does not match z_t {tuple(z_t.shape)}")
    return mean + math.sqrt(posterior_variance(schedule, t)) * noise


@dataclass
class SampleResult:
    z0: torch.Tensor
    snapshots: List[Tuple[int, torch.Tensor]] = field(default_factory=list)


def sample_loop(
    shape: Sequence[int],
    map_features: Optional[object],
    denoiser: NoisePredictor,
    schedule: DiffusionSchedule,
    seed: int,
    snapshot_every: Optional[int] = None,
    device: Union[str, torch.device] = "cpu",
    dtype: torch.dtype = torch.float32,
) -> SampleResult:
    """Ancestral sampling from z_T ~ N(0, I) down to z_0.

    Every Gaussian draw comes from one CPU generator seeded with ``seed``.
    With ``snapshot_every = k`` the state z_t entering step t is recorded whenever (T - t) % k == 0.
    """
    if snapshot_every is not None and snapshot_every < 1:
        raise DomainError(f"snapshot_every must be >= 1, got {snapshot_every}")
    gen = torch.Generator(device="cpu").manual_seed(int(seed))
    shape = tuple(int(s) for s in shape)
    z = torch.randn(shape, generator=gen, dtype=dtype).to(device)
    snapshots: List[Tuple[int, torch.Tensor]] = []
    for t in range(schedule.T, 0, -1):
        if snapshot_every is not None and (schedule.T - t) % snapshot_every == 0:
            snapshots.append((t, z.detach().cpu().clone()))
        t_batch = torch.full((shape[0],), t, dtype=torch.long, device=device)
        with torch.no_grad():
            eps_pred = denoiser(z, t_batch, map_features)
        noise = torch.randn(shape, generator=gen, dtype=dtype).to(device) if t > 1 else None
        z = reverse_step(z, t, eps_pred, schedule, noise)
        if not torch.isfinite(z).all():
            logging.warning("sampling diverged at t=%d", t)
            raise TrainingDivergenceError(f"non-finite latent at t={t}", step=t)
    return SampleResult(z0=z, snapshots=snapshots)
