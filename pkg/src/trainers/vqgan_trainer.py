"""1단계: VQ-GAN 압축 모델 학습.

- 라벨 맵 없이 볼륨만 사용 (unlabeled 항목 허용)
- 결과: vqgan 체크포인트, losses_vqgan.csv, codebook_usage.csv
- 발산 시 마지막 정상 체크포인트를 저장하고 예외를 다시 던진다
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from src.data.manifest import DatasetManifest, make_batches, load_samples
from src.data.volume_io import PairedSample, volume_to_tensor
from src.models.latent_space import LatentRange, codebook_range
from src.models.losses import LOSS_COLUMNS, make_vqgan_optimizers, reconstruction_loss, vqgan_train_step
from src.models.vqgan import VQGAN, CompressionConfig, codebook_usage, perplexity
from src.storage.checkpoint_store import (
    CheckpointBundle,
    load_checkpoint,
    load_module_arrays,
    load_optimizer_state,
    module_arrays,
    optimizer_state,
    save_checkpoint,
)
from src.utils.config import RunConfig
from src.utils.errors import TrainingDivergenceError
from src.utils.seeding import pick_device, seed_everything


@dataclass
class TrainReport:
    phase: str
    records: List[Dict[str, float]] = field(default_factory=list)
    wall_clock: float = 0.0
    metrics: Dict[str, float] = field(default_factory=dict)
    extras: Dict[str, Any] = field(default_factory=dict)

    def to_frame(self, columns: Sequence[str]) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=list(columns))

    def write_csv(self, path: str | Path, columns: Sequence[str]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame(columns).to_csv(path, index=False)
        return path


def stack_volumes(samples: Dict[str, PairedSample], ids: Sequence[str], device: torch.device) -> torch.Tensor:
    return torch.stack([volume_to_tensor(samples[i].volume) for i in ids]).to(device)


# ---------- checkpoint bundling ----------

def vqgan_bundle(
    model: VQGAN,
    optimizers,
    step: int,
    seed: int,
    cfg: RunConfig,
) -> CheckpointBundle:
    arrays = module_arrays(model, "model")
    meta: Dict[str, Any] = {
        "compression": _plain(asdict(model.cfg)),
        "latent_range": codebook_range(model.codebook.entries).to_dict(),
    }
    if optimizers is not None:
        for name in ("autoencoder", "discriminator"):
            arr, info = optimizer_state(getattr(optimizers, name), f"optim_{name}")
            arrays.update(arr)
            meta[f"optim_{name}"] = info
    return CheckpointBundle(phase="vqgan", step=step, seed=seed, config=cfg.to_dict(), arrays=arrays, meta=meta)


def _plain(d: Dict[str, Any]) -> Dict[str, Any]:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def compression_from_meta(meta: Dict[str, Any]) -> CompressionConfig:
    raw = dict(meta["compression"])
    raw["feature_channels"] = tuple(raw.get("feature_channels", ()))
    return CompressionConfig(**raw)


def load_vqgan(
    source: CheckpointBundle | str | Path,
    device: torch.device | str = "cpu",
    with_optimizers: bool = False,
    lr: float = 3e-4,
    betas: Tuple[float, float] = (0.9, 0.999),
):
    """Rebuild the VQ-GAN (and its latent range) from a checkpoint."""
    bundle = source if isinstance(source, CheckpointBundle) else load_checkpoint(source, expected_phase="vqgan")
    model = VQGAN(compression_from_meta(bundle.meta))
    load_module_arrays(model, bundle, "model")
    model.to(device)
    latent_range = LatentRange.from_dict(bundle.meta["latent_range"])
    if not with_optimizers:
        return model, latent_range
    optimizers = make_vqgan_optimizers(model, lr=lr, betas=betas)
    for name in ("autoencoder", "discriminator"):
        load_optimizer_state(getattr(optimizers, name), bundle, f"optim_{name}", f"optim_{name}")
    return model, latent_range, optimizers


# ---------- training loop ----------

def _eval_mse(model: VQGAN, x: torch.Tensor) -> float:
    model.eval()
    with torch.no_grad():
        x_hat, _, _ = model(x)
        return float(reconstruction_loss(x, x_hat)) / float(x[0].numel())


def train_vqgan_phase(
    manifest: DatasetManifest,
    cfg: RunConfig,
    seed: int,
    out_dir: Optional[str | Path] = None,
    ckpt_path: Optional[str | Path] = None,
) -> Tuple[CheckpointBundle, TrainReport]:
    t0 = time.time()
    seed_everything(seed)
    device = pick_device()
    comp = CompressionConfig.from_run(cfg)
    train = cfg.vqgan_train

    samples = load_samples(manifest, cfg.data.shape)
    model = VQGAN(comp).to(device)
    optimizers = make_vqgan_optimizers(model, lr=cfg.optimizer.lr, betas=(cfg.optimizer.beta1, cfg.optimizer.beta2))
    slice_gen = torch.Generator(device="cpu").manual_seed(seed + 1)

    held_ids = [e.id for e in manifest.entries[: min(4, len(manifest))]]
    held = stack_volumes(samples, held_ids, device)
    report = TrainReport(phase="vqgan")
    report.metrics["initial_mse"] = _eval_mse(model, held)

    usage = np.zeros(comp.K, dtype=np.int64)
    last_good: Optional[CheckpointBundle] = None
    batches = make_batches(manifest, train.batch_size, seed, epochs=None)
    logging.info(
        "vqgan phase: %d volumes, steps=%d batch=%d t=%d n_z=%d K=%d device=%s",
        len(samples), train.steps, train.batch_size, comp.t, comp.n_z, comp.K, device,
    )

    try:
        for step in tqdm(range(1, train.steps + 1), desc="vqgan", leave=False):
            batch = next(batches)
            x = stack_volumes(samples, batch.ids, device)
            rec, indices = vqgan_train_step(x, model, optimizers, step, slice_gen)
            usage += codebook_usage(indices, comp.K)[0]
            report.records.append(rec.as_record())
            if step % train.log_every == 0:
                logging.info(
                    "[vqgan %d] rec=%.4f cb=%.4f commit=%.4f perc=%.4f G=%.4f D2D=%.4f D3D=%.4f lambda=%.3g",
                    step, rec.L_rec, rec.L_codebook, rec.L_commit, rec.L_perc, rec.L_G, rec.L_D2D, rec.L_D3D, rec.lambda_,
                )
            if step % train.checkpoint_every == 0:
                last_good = vqgan_bundle(model, optimizers, step, seed, cfg)
    except TrainingDivergenceError as exc:
        logging.exception("vqgan training diverged at step %s", exc.step)
        if out_dir is not None:
            report.write_csv(Path(out_dir) / "losses_vqgan.csv", LOSS_COLUMNS)
        if last_good is not None and ckpt_path is not None:
            save_checkpoint(last_good, ckpt_path)
            logging.warning("kept last good checkpoint (step %d) at %s", last_good.step, ckpt_path)
        raise

    bundle = vqgan_bundle(model, optimizers, train.steps, seed, cfg)
    ppl = perplexity(usage)
    report.metrics.update(
        final_mse=_eval_mse(model, held),
        perplexity=ppl,
        active_codes=float((usage > 0).sum()),
    )
    report.wall_clock = time.time() - t0
    logging.info(
        "vqgan done: mse %.5f -> %.5f, perplexity %.2f, active codes %d/%d (%.1fs)",
        report.metrics["initial_mse"], report.metrics["final_mse"], ppl, int((usage > 0).sum()), comp.K,
        report.wall_clock,
    )

    if out_dir is not None:
        out = Path(out_dir)
        report.write_csv(out / "losses_vqgan.csv", LOSS_COLUMNS)
        pd.DataFrame({"index": np.arange(comp.K), "count": usage}).to_csv(out / "codebook_usage.csv", index=False)
    if ckpt_path is not None:
        save_checkpoint(bundle, ckpt_path)
    return bundle, report

