"""Compression-stage objective: L_VQ, adversarial terms, perceptual term, adaptive λ.

Squared-error terms are sums over voxels divided by the batch size.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F

from src.models.vqgan import QuantizationResult, SliceFeatureNet, VQGAN, take_slices, volume_slices
from src.utils.errors import DomainError, ShapeError, TrainingDivergenceError


LAMBDA_DELTA = 1e-6
LAMBDA_MAX = 1e4


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    _check_same(x, x_hat, "reconstruction")
    return ((x - x_hat) ** 2).sum() / x.shape[0]


def vq_loss(x: torch.Tensor, x_hat: torch.Tensor, z_hat: torch.Tensor, q: QuantizationResult) -> torch.Tensor:
    """||x - x̂||² + ||sg[ẑ] - z_q||² + ||sg[z_q] - ẑ||²."""
    _check_same(z_hat, q.z_q, "latent")
    return reconstruction_loss(x, x_hat) + q.codebook_term + q.commitment_term


# ---------- adversarial ----------

def discriminator_term(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """log D(x) + log(1 - D(x̂)), D = sigmoid(logits), averaged over patches."""
    return F.logsigmoid(real_logits).mean() + F.logsigmoid(-fake_logits).mean()


def generator_term(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating -log D(x̂)."""
    return -F.logsigmoid(fake_logits).mean()


def sample_slices(
    batch: int,
    depth: int,
    num_slices: int,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Uniform depth indices (batch, num_slices), drawn from ``generator``."""
    return torch.randint(0, depth, (batch, num_slices), generator=generator)


@dataclass
class AdversarialTerms:
    generator_2d: torch.Tensor
    generator_3d: torch.Tensor
    discriminator_2d: torch.Tensor
    discriminator_3d: torch.Tensor

    @property
    def generator(self) -> torch.Tensor:
        return self.generator_2d + self.generator_3d


def adversarial_losses(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    model: VQGAN,
    slice_idx: torch.Tensor,
    detach_fake: bool = False,
) -> AdversarialTerms:
    """Both discriminators' terms; the same slice indices are used for x and x̂."""
    _check_same(x, x_hat, "adversarial")
    fake = x_hat.detach() if detach_fake else x_hat
    real2d = model.disc2d(take_slices(x, slice_idx))
    fake2d = model.disc2d(take_slices(fake, slice_idx))
    real3d = model.disc3d(x)
    fake3d = model.disc3d(fake)
    return AdversarialTerms(
        generator_2d=generator_term(fake2d),
        generator_3d=generator_term(fake3d),
        discriminator_2d=discriminator_term(real2d, fake2d),
        discriminator_3d=discriminator_term(real3d, fake3d),
    )


# ---------- perceptual ----------

def perceptual_loss(x: torch.Tensor, x_hat: torch.Tensor, phi: SliceFeatureNet) -> torch.Tensor:
    """Σ_l ||φ_l(x) - φ_l(x̂)||² over every depth slice."""
    _check_same(x, x_hat, "perceptual")
    total = x.new_zeros(())
    for fx, fy in zip(phi(volume_slices(x)), phi(volume_slices(x_hat))):
        total = total + ((fx - fy) ** 2).sum()
    return total / x.shape[0]


def adaptive_lambda(
    grad_rec_norm: float,
    grad_gan_norm: float,
    delta: float = LAMBDA_DELTA,
    max_value: float = LAMBDA_MAX,
) -> float:
    if not (math.isfinite(grad_rec_norm) and math.isfinite(grad_gan_norm)):
        raise DomainError(f"gradient norms must be finite: {grad_rec_norm}, {grad_gan_norm}")
    if grad_rec_norm < 0 or grad_gan_norm < 0:
        raise DomainError(f"gradient norms must be >= 0: {grad_rec_norm}, {grad_gan_norm}")
    lam = grad_rec_norm / (grad_gan_norm + delta)
    return float(min(max(lam, 0.0), max_value))


def last_layer_norm(loss: torch.Tensor, last_layer: torch.Tensor) -> float:
    if not loss.requires_grad:
        return 0.0
    (grad,) = torch.autograd.grad(loss, last_layer, retain_graph=True, allow_unused=True)
    return 0.0 if grad is None else float(torch.linalg.vector_norm(grad))


# ---------- training step ----------

@dataclass
class VQGANOptimizers:
    autoencoder: torch.optim.Optimizer
    discriminator: torch.optim.Optimizer


def make_vqgan_optimizers(model: VQGAN, lr: float = 3e-4, betas: Tuple[float, float] = (0.9, 0.999)) -> VQGANOptimizers:
    return VQGANOptimizers(
        autoencoder=torch.optim.Adam(model.autoencoder_parameters(), lr=lr, betas=betas),
        discriminator=torch.optim.Adam(model.discriminator_parameters(), lr=lr, betas=betas),
    )


@dataclass
class LossReport:
    step: int
    L_rec: float
    L_codebook: float
    L_commit: float
    L_perc: float
    L_G: float
    L_D2D: float
    L_D3D: float
    lambda_: float

    def as_record(self) -> Dict[str, float]:
        rec = asdict(self)
        rec["lambda"] = rec.pop("lambda_")
        return rec

    @property
    def total_vq(self) -> float:
        return self.L_rec + self.L_codebook + self.L_commit


LOSS_COLUMNS = ["step", "L_rec", "L_codebook", "L_commit", "L_perc", "L_G", "L_D2D", "L_D3D", "lambda"]


def _finite_or_raise(value: torch.Tensor, step: int, what: str) -> None:
    if not torch.isfinite(value).all():
        raise TrainingDivergenceError(f"non-finite {what} at step {step}", step=step)


def vqgan_train_step(
    x: torch.Tensor,
    model: VQGAN,
    optimizers: VQGANOptimizers,
    step: int,
    generator: Optional[torch.Generator] = None,
) -> Tuple[LossReport, torch.Tensor]:
    """One alternating update. Returns the report and the batch's codebook indices."""
    cfg = model.cfg
    model.train()

    x_hat, z_hat, q = model(x)
    rec = reconstruction_loss(x, x_hat)
    l_vq = rec + q.codebook_term + q.commitment_term
    perc = perceptual_loss(x, x_hat, model.perceptual) if cfg.alpha > 0 else x.new_zeros(())

    slice_idx = sample_slices(x.shape[0], x.shape[-1], cfg.num_slices, generator)
    adversarial_on = cfg.disc_weight > 0 and step >= cfg.disc_start
    if adversarial_on:
        adv = adversarial_losses(x, x_hat, model, slice_idx)
        last = model.decoder.last_layer
        lam = adaptive_lambda(
            last_layer_norm(rec, last),
            last_layer_norm(adv.generator, last),
            max_value=cfg.lambda_max,
        )
        total = l_vq + lam * cfg.disc_weight * adv.generator + cfg.alpha * perc
    else:
        lam = 0.0
        total = l_vq + cfg.alpha * perc
    _finite_or_raise(total, step, "autoencoder loss")

    optimizers.autoencoder.zero_grad(set_to_none=True)
    total.backward()
    optimizers.autoencoder.step()

    optimizers.discriminator.zero_grad(set_to_none=True)
    if adversarial_on:
        d_terms = adversarial_losses(x, x_hat, model, slice_idx, detach_fake=True)
        d_obj = d_terms.discriminator_2d + d_terms.discriminator_3d
        _finite_or_raise(d_obj, step, "discriminator loss")
        (-d_obj).backward()
        optimizers.discriminator.step()
        gen_value = float(adv.generator.detach())
    else:
        with torch.no_grad():
            d_terms = adversarial_losses(x, x_hat, model, slice_idx, detach_fake=True)
        gen_value = float(d_terms.generator.detach())

    report = LossReport(
        step=step,
        L_rec=float(rec.detach()),
        L_codebook=float(q.codebook_term.detach()),
        L_commit=float(q.commitment_term.detach()),
        L_perc=float(perc.detach()),
        L_G=gen_value,
        L_D2D=float(d_terms.discriminator_2d.detach()),
        L_D3D=float(d_terms.discriminator_3d.detach()),
        lambda_=lam,
    )
    return report, q.indices.detach()
