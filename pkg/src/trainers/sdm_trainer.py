"""2단계: 고정된 VQ-GAN 잠재공간 위에서 semantic diffusion 모델 학습.

- VQ-GAN 파라미터는 동결 (requires_grad=False, eval 모드)
- 옵티마이저에는 U-Net(semantic encoder 포함) 파라미터만 등록
- 결과: sdm 체크포인트, losses_sdm.csv
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import torch
from tqdm import tqdm

from src.data.manifest import DatasetManifest, load_samples, make_batches
from src.data.volume_io import map_to_tensor
from src.models.diffusion import DiffusionSchedule, build_cosine_schedule, forward_sample, simple_loss
from src.models.denoiser import DenoiserConfig, UNet, predict_noise
from src.models.latent_space import LatentRange, minmax_map
from src.models.vqgan import VQGAN
from src.storage.checkpoint_store import (
    CheckpointBundle,
    load_checkpoint,
    load_module_arrays,
    load_optimizer_state,
    module_arrays,
    optimizer_state,
    save_checkpoint,
)
from src.trainers.vqgan_trainer import TrainReport, load_vqgan, stack_volumes
from src.utils.config import RunConfig
from src.utils.errors import ShapeError, TrainingDivergenceError
from src.utils.seeding import pick_device, seed_everything


SDM_LOSS_COLUMNS = ["step", "loss", "t_mean"]


def freeze(model: torch.nn.Module) -> torch.nn.Module:
    model.requires_grad_(False)
    model.eval()
    return model


def registered_parameter_names(optimizer: torch.optim.Optimizer, named: Dict[str, torch.nn.Module]) -> List[str]:
    """Dotted names (``<module>.<param>``) of every parameter the optimizer updates."""
    by_id = {
        id(p): f"{prefix}.{name}"
        for prefix, module in named.items()
        for name, p in module.named_parameters()
    }
    return [by_id.get(id(p), "<unnamed>") for g in optimizer.param_groups for p in g["params"]]


def state_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode("utf-8"))
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def denoiser_config_for(cfg: RunConfig, vqgan: VQGAN) -> DenoiserConfig:
    base = DenoiserConfig.from_run(cfg)
    t = vqgan.cfg.t
    if any(s % t for s in cfg.data.shape):
        raise ShapeError(f"data.shape {cfg.data.shape} not divisible by the checkpoint's t={t}")
    return replace(base, n_z=vqgan.cfg.n_z, t=t, latent_shape=tuple(s // t for s in cfg.data.shape))


def sdm_bundle(
    unet: UNet,
    optimizer: Optional[torch.optim.Optimizer],
    schedule: DiffusionSchedule,
    latent_range: LatentRange,
    step: int,
    seed: int,
    cfg: RunConfig,
) -> CheckpointBundle:
    arrays = module_arrays(unet, "model")
    dn = asdict(unet.cfg)
    meta: Dict[str, Any] = {
        "denoiser": {k: list(v) if isinstance(v, tuple) else v for k, v in dn.items()},
        "schedule": schedule.to_dict(),
        "latent_range": latent_range.to_dict(),
    }
    if optimizer is not None:
        arr, info = optimizer_state(optimizer, "optim_unet")
        arrays.update(arr)
        meta["optim_unet"] = info
    return CheckpointBundle(phase="sdm", step=step, seed=seed, config=cfg.to_dict(), arrays=arrays, meta=meta)


def load_sdm(
    source: CheckpointBundle | str | Path,
    device: torch.device | str = "cpu",
    optimizer_kwargs: Optional[Dict[str, Any]] = None,
):
    """Rebuild (unet, schedule, latent_range) and, with ``optimizer_kwargs``, the Adam state too."""
    bundle = source if isinstance(source, CheckpointBundle) else load_checkpoint(source, expected_phase="sdm")
    raw = dict(bundle.meta["denoiser"])
    for key in ("latent_shape", "channels", "attention_levels"):
        raw[key] = tuple(raw[key])
    unet = UNet(DenoiserConfig(**raw))
    load_module_arrays(unet, bundle, "model")
    unet.to(device)
    schedule = DiffusionSchedule.from_dict(bundle.meta["schedule"])
    latent_range = LatentRange.from_dict(bundle.meta["latent_range"])
    if optimizer_kwargs is None:
        return unet, schedule, latent_range
    opt = torch.optim.Adam(unet.parameters(), **optimizer_kwargs)
    load_optimizer_state(opt, bundle, "optim_unet", "optim_unet")
    return unet, schedule, latent_range, opt


def train_sdm_phase(
    manifest: DatasetManifest,
    vqgan_ckpt: CheckpointBundle | str | Path,
    cfg: RunConfig,
    seed: int,
    out_dir: Optional[str | Path] = None,
    ckpt_path: Optional[str | Path] = None,
) -> Tuple[CheckpointBundle, TrainReport]:
    t0 = time.time()
    manifest.require_labeled()
    gen = seed_everything(seed)
    device = pick_device()
    train = cfg.sdm_train

    vqgan, latent_range = load_vqgan(vqgan_ckpt, device)
    freeze(vqgan)
    digest_before = state_digest(vqgan)
    dn_cfg = denoiser_config_for(cfg, vqgan)
    unet = UNet(dn_cfg).to(device)
    optimizer = torch.optim.Adam(unet.parameters(), lr=cfg.optimizer.lr, betas=(cfg.optimizer.beta1, cfg.optimizer.beta2))
    schedule = build_cosine_schedule(cfg.diffusion.T, cfg.diffusion.s)

    samples = load_samples(manifest, cfg.data.shape)
    for s in samples.values():
        if s.map is not None and s.map.num_classes != dn_cfg.num_classes:
            raise ShapeError(f"{s.id}: map has {s.map.num_classes} classes, config expects {dn_cfg.num_classes}")
    maps = {i: map_to_tensor(s.map) for i, s in samples.items()}

    report = TrainReport(phase="sdm")
    report.extras["optimizer_registry"] = registered_parameter_names(optimizer, {"unet": unet, "vqgan": vqgan})
    batches = make_batches(manifest, train.batch_size, seed, epochs=None)
    logging.info(
        "sdm phase: %d pairs, steps=%d batch=%d T=%d latent=%s device=%s",
        len(samples), train.steps, train.batch_size, schedule.T, dn_cfg.latent_shape, device,
    )

    for step in tqdm(range(1, train.steps + 1), desc="sdm", leave=False):
        batch = next(batches)
        x = stack_volumes(samples, batch.ids, device)
        m = torch.stack([maps[i] for i in batch.ids]).to(device)
        with torch.no_grad():
            z0 = minmax_map(vqgan.encode(x), latent_range, "forward")
        t = torch.randint(1, schedule.T + 1, (x.shape[0],), generator=gen)
        eps = torch.randn(z0.shape, generator=gen).to(device)
        noised = forward_sample(z0, t, eps, schedule)

        unet.train()
        pred = predict_noise(noised.z_t, t.to(device), m, unet)
        loss = simple_loss(eps, pred)
        if not torch.isfinite(loss):
            logging.warning("sdm loss is not finite at step %d", step)
            if out_dir is not None:
                report.write_csv(Path(out_dir) / "losses_sdm.csv", SDM_LOSS_COLUMNS)
            raise TrainingDivergenceError(f"non-finite diffusion loss at step {step}", step=step)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        report.records.append({"step": step, "loss": float(loss.detach()), "t_mean": float(t.float().mean())})
        if step % train.log_every == 0:
            logging.info("[sdm %d] loss=%.5f", step, float(loss.detach()))

    digest_after = state_digest(vqgan)
    report.extras.update(vqgan_digest_before=digest_before, vqgan_digest_after=digest_after)
    if digest_after != digest_before:
        raise RuntimeError("frozen VQ-GAN parameters changed during the diffusion phase")

    bundle = sdm_bundle(unet, optimizer, schedule, latent_range, train.steps, seed, cfg)
    losses = [r["loss"] for r in report.records]
    window = max(1, min(10, len(losses) // 4 or 1))
    if losses:
        report.metrics["initial_loss"] = sum(losses[:window]) / window
        report.metrics["final_loss"] = sum(losses[-window:]) / window
    report.wall_clock = time.time() - t0
    logging.info("sdm done: %s (%.1fs)", report.metrics, report.wall_clock)

    if out_dir is not None:
        report.write_csv(Path(out_dir) / "losses_sdm.csv", SDM_LOSS_COLUMNS)
    if ckpt_path is not None:
        save_checkpoint(bundle, ckpt_path)
    return bundle, report
