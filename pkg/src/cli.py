"""Command-line entrypoint: python -m src.cli <subcommand> [--config PATH] [--set k=v ...] [--seed N] [--out DIR]

Exit codes: see EXIT_CODES.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
import torch

from src.analyzer.faithfulness import faithfulness_harness, synthetic_pairs
from src.analyzer.metrics import FeatureExtractor, evaluate_sets, noise_set, write_summary
from src.analyzer.montage import latent_montage, plot_losses, slice_montage, snapshot_montage
from src.data.manifest import load_samples, read_manifest
from src.data.toy_loader import generate_toy_dataset
from src.data.volume_io import (
    PairedSample,
    SemanticMap,
    Volume,
    load_nifti,
    preprocess,
    preprocess_map,
    save_nifti,
    tensor_to_volume,
    volume_to_tensor,
)
from src.models.denoiser import DenoiserConfig, UNet
from src.models.segmentation import SegHarnessConfig, SegUNet3D
from src.models.vqgan import VQGAN, CompressionConfig
from src.trainers.sdm_trainer import load_sdm, train_sdm_phase
from src.trainers.synthesis import Synthesizer
from src.trainers.vqgan_trainer import load_vqgan, train_vqgan_phase
from src.utils.config import RunConfig, dump_config, override_list, parse_config
from src.utils.errors import DataError, MedLsdmError, exit_code_for
from src.utils.project_root import default_settings_path, ensure_repo_root


LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"
EXIT_CODES = (
    "exit codes: 0 ok, 1 unexpected error, 2 config, "
    "3 data (bad files, shapes, out-of-range arguments, non-finite voxels), "
    "4 divergence or numeric failure, 5 checkpoint corruption"
)


def _out_dir(args: argparse.Namespace, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args: argparse.Namespace, cfg: RunConfig, seed: int):
    return read_manifest(args.manifest or cfg.data.manifest, seed=seed)


def _load_map(path: str, cfg: RunConfig) -> SemanticMap:
    obj = load_nifti(path)
    if not isinstance(obj, SemanticMap):
        raise DataError(f"{path} does not hold a label map")
    return preprocess_map(obj, cfg.data.shape)


def _load_volume(path: str, cfg: RunConfig) -> Volume:
    obj = load_nifti(path)
    if not isinstance(obj, Volume):
        raise DataError(f"{path} holds a label map, expected an image volume")
    return preprocess(obj, cfg.data.shape)


def _extractors(cfg: RunConfig, channels: int):
    ev = cfg.evaluation
    if ev.extractor_weights:
        ext3d = FeatureExtractor.external(ev.extractor_weights, channels, ev.feature_dim)
    else:
        ext3d = FeatureExtractor.random3d(channels, ev.feature_dim, ev.extractor_seed)
    return ext3d, FeatureExtractor.random2d(channels, ev.feature_dim, ev.extractor_seed)


def _synthetic_dir(samples_dir: str, ids: List[str], real: Dict[str, PairedSample], cfg: RunConfig) -> List[PairedSample]:
    out = []
    for i in ids:
        vol = _load_volume(str(Path(samples_dir) / f"{i}.nii"), cfg)
        out.append(PairedSample(volume=vol, map=real[i].map, id=f"synth_{i}", split="synthetic"))
    return out


# ---------- subcommands ----------

def cmd_gen_toy(args, cfg: RunConfig, seed: int) -> int:
    d = cfg.data
    out = Path(args.out or d.toy_dir)
    n = args.n if args.n is not None else d.toy_train + d.toy_test
    n_test = args.n_test if args.n_test is not None else d.toy_test
    generate_toy_dataset(n, d.shape, d.num_classes, seed, out, n_test=n_test, n_unlabeled=d.toy_unlabeled, spacing=d.spacing)
    dump_config(cfg, out)
    return 0


def cmd_train_vqgan(args, cfg: RunConfig, seed: int) -> int:
    out = _out_dir(args, cfg)
    dump_config(cfg, out)
    manifest = _manifest(args, cfg, seed).filter_split("train")
    _, report = train_vqgan_phase(manifest, cfg, seed, out_dir=out, ckpt_path=out / "vqgan.ckpt")
    logging.info("train-vqgan: %s", report.metrics)
    return 0


def cmd_train_sdm(args, cfg: RunConfig, seed: int) -> int:
    out = _out_dir(args, cfg)
    dump_config(cfg, out)
    manifest = _manifest(args, cfg, seed).filter_split("train").labeled_only()
    vqgan_ckpt = args.vqgan or cfg.paths.vqgan_ckpt
    _, report = train_sdm_phase(manifest, vqgan_ckpt, cfg, seed, out_dir=out, ckpt_path=out / "sdm.ckpt")
    logging.info("train-sdm: %s", report.metrics)
    return 0


def cmd_sample(args, cfg: RunConfig, seed: int) -> int:
    out = _out_dir(args, cfg)
    dump_config(cfg, out)
    if args.map:
        maps = [(Path(p).name.split(".")[0], _load_map(p, cfg)) for p in args.map]
    else:
        samples = load_samples(_manifest(args, cfg, seed).labeled_only(), cfg.data.shape, split=args.split)
        maps = [(i, s.map) for i, s in samples.items()]
    every = args.snapshot_every or cfg.sampling.snapshot_every
    synth = Synthesizer(args.vqgan or cfg.paths.vqgan_ckpt, args.sdm or cfg.paths.sdm_ckpt)
    sample_dir = out / "samples"
    for k, (sid, smap) in enumerate(maps):
        result = synth(smap, seed=seed + k, snapshot_every=every)
        save_nifti(result.volume, sample_dir / f"{sid}.nii")
        for t, vol in result.snapshots:
            save_nifti(vol, sample_dir / f"{sid}_t{t:04d}.nii")
        if result.snapshots:
            snapshot_montage(result.snapshots, sample_dir / f"{sid}_snapshots.png")
    logging.info("sample: %d volumes -> %s", len(maps), sample_dir)
    return 0


def cmd_evaluate(args, cfg: RunConfig, seed: int) -> int:
    out = _out_dir(args, cfg)
    dump_config(cfg, out)
    real = load_samples(_manifest(args, cfg, seed).labeled_only(), cfg.data.shape, split=args.split)
    ids = list(real)
    real_vols = [real[i].volume for i in ids]
    sets = {"synthetic": [s.volume for s in _synthetic_dir(args.samples, ids, real, cfg)]}
    sets["noise"] = noise_set(len(ids), real_vols[0].data.shape, cfg.evaluation.noise_seed)
    ext3d, ext2d = _extractors(cfg, real_vols[0].channels)
    table = evaluate_sets(real_vols, sets, ext3d, ext2d, peak=cfg.evaluation.peak)
    write_summary(table, out / "metrics.csv")
    print(table.to_string(index=False))
    return 0


def cmd_faithfulness(args, cfg: RunConfig, seed: int) -> int:
    out = _out_dir(args, cfg)
    dump_config(cfg, out)
    manifest = _manifest(args, cfg, seed).labeled_only()
    train = load_samples(manifest, cfg.data.shape, split="train")
    test = load_samples(manifest, cfg.data.shape, split="test")
    if args.samples:
        synth = _synthetic_dir(args.samples, list(test), test, cfg)
    else:
        synthesizer = Synthesizer(args.vqgan or cfg.paths.vqgan_ckpt, args.sdm or cfg.paths.sdm_ckpt)
        synth = synthetic_pairs(list(test.values()), synthesizer, seed)
    table = faithfulness_harness(
        list(train.values()), list(test.values()), synth, SegHarnessConfig.from_run(cfg), seed
    )
    write_summary(table, out / "faithfulness.csv")
    print(table.to_string(index=False))
    return 0


def cmd_montage(args, cfg: RunConfig, seed: int) -> int:
    out = _out_dir(args, cfg)
    items: Dict[str, object] = {}
    for p in args.volume or []:
        items[Path(p).name.split(".")[0]] = load_nifti(p)
    for p in args.map or []:
        items[f"{Path(p).name.split('.')[0]} (map)"] = load_nifti(p)
    if args.latent:
        if not args.volume:
            raise DataError("montage --latent needs at least one --volume")
        model, _ = load_vqgan(args.vqgan or cfg.paths.vqgan_ckpt)
        model.eval()
        vol = _load_volume(args.volume[0], cfg)
        with torch.no_grad():
            x = volume_to_tensor(vol)[None]
            x_hat, z_hat, _ = model(x)
        items["reconstruction"] = tensor_to_volume(x_hat[0].clamp(-1.0, 1.0), vol.spacing)
        latent_montage(z_hat[0].numpy(), out / "latent.png")
    if not items:
        raise DataError("montage needs --volume and/or --map inputs")
    slice_montage(items, out / "montage.png")
    return 0


def _count(module: torch.nn.Module) -> int:
    return int(sum(p.numel() for p in module.parameters()))


def cmd_info(args, cfg: RunConfig, seed: int) -> int:
    vqgan = load_vqgan(args.vqgan)[0] if args.vqgan else VQGAN(CompressionConfig.from_run(cfg))
    unet = load_sdm(args.sdm)[0] if args.sdm else UNet(DenoiserConfig.from_run(cfg))
    seg = SegUNet3D(SegHarnessConfig.from_run(cfg))
    rows = [
        ("vqgan.encoder", _count(vqgan.encoder)),
        ("vqgan.decoder", _count(vqgan.decoder)),
        ("vqgan.codebook", _count(vqgan.codebook)),
        ("vqgan.disc2d", _count(vqgan.disc2d)),
        ("vqgan.disc3d", _count(vqgan.disc3d)),
        ("vqgan.perceptual", _count(vqgan.perceptual)),
        ("denoiser.semantic_encoder", _count(unet.semantic)),
        ("denoiser.unet", _count(unet) - _count(unet.semantic)),
        ("segmenter", _count(seg)),
    ]
    table = pd.DataFrame(rows, columns=["component", "parameters"])
    print(table.to_string(index=False))
    if args.out:
        out = _out_dir(args, cfg)
        table.to_csv(out / "param_counts.csv", index=False)
    return 0


def cmd_plot_losses(args, cfg: RunConfig, seed: int) -> int:
    plot_losses(args.csv, args.png)
    return 0


# ---------- parser ----------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML settings file (default: config/settings.yaml if present)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key, repeatable (e.g. diffusion.T=10)")
    common.add_argument("--seed", type=int, default=None, help="random seed (default: config seed)")
    common.add_argument("--out", default=None, help="output directory (default: paths.out_dir)")

    parser = argparse.ArgumentParser(prog="medlsdm", description="3D semantic latent diffusion: train, sample, evaluate", epilog=EXIT_CODES)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", parents=[common], help="write the procedural toy dataset")
    p.add_argument("--n", type=int, default=None, help="labeled pairs (default: data.toy_train + data.toy_test)")
    p.add_argument("--n-test", type=int, default=None, help="how many labeled pairs get the test split")
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("train-vqgan", parents=[common], help="phase 1: train the VQ-GAN")
    p.add_argument("--manifest", default=None, help="dataset manifest TSV (default: data.manifest)")
    p.set_defaults(func=cmd_train_vqgan)

    p = sub.add_parser("train-sdm", parents=[common], help="phase 2: train the semantic diffusion model")
    p.add_argument("--manifest", default=None, help="dataset manifest TSV (default: data.manifest)")
    p.add_argument("--vqgan", default=None, help="phase-1 checkpoint (default: paths.vqgan_ckpt)")
    p.set_defaults(func=cmd_train_sdm)

    p = sub.add_parser("sample", parents=[common], help="synthesize volumes from semantic maps")
    p.add_argument("--map", action="append", default=None, help="label-map NIfTI, repeatable (default: manifest split)")
    p.add_argument("--manifest", default=None, help="dataset manifest TSV (default: data.manifest)")
    p.add_argument("--split", default="test", help="manifest split to sample from")
    p.add_argument("--vqgan", default=None, help="phase-1 checkpoint (default: paths.vqgan_ckpt)")
    p.add_argument("--sdm", default=None, help="phase-2 checkpoint (default: paths.sdm_ckpt)")
    p.add_argument("--snapshot-every", type=int, default=None, help="also write decoded z_t every k reverse steps")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", parents=[common], help="FID / 3D-FID / SSIM / RMSE / PSNR table")
    p.add_argument("--manifest", default=None, help="dataset manifest TSV (default: data.manifest)")
    p.add_argument("--split", default="test", help="real reference split")
    p.add_argument("--samples", required=True, help="directory of synthesized <id>.nii volumes")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("faithfulness", parents=[common], help="Dice of a segmenter trained on real-train")
    p.add_argument("--manifest", default=None, help="dataset manifest TSV (default: data.manifest)")
    p.add_argument("--samples", default=None, help="directory of synthesized <id>.nii volumes (default: synthesize now)")
    p.add_argument("--vqgan", default=None, help="phase-1 checkpoint (default: paths.vqgan_ckpt)")
    p.add_argument("--sdm", default=None, help="phase-2 checkpoint (default: paths.sdm_ckpt)")
    p.set_defaults(func=cmd_faithfulness)

    p = sub.add_parser("montage", parents=[common], help="axial/coronal/sagittal slice grid as PNG")
    p.add_argument("--volume", action="append", default=None, help="image NIfTI, repeatable")
    p.add_argument("--map", action="append", default=None, help="label-map NIfTI, repeatable")
    p.add_argument("--latent", action="store_true", help="also render the latent channels and reconstruction of the first volume")
    p.add_argument("--vqgan", default=None, help="phase-1 checkpoint for --latent (default: paths.vqgan_ckpt)")
    p.set_defaults(func=cmd_montage)

    p = sub.add_parser("info", parents=[common], help="parameter counts per component")
    p.add_argument("--vqgan", default=None, help="count a trained phase-1 checkpoint instead of the config")
    p.add_argument("--sdm", default=None, help="count a trained phase-2 checkpoint instead of the config")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("plot-losses", parents=[common], help="render a loss CSV to PNG")
    p.add_argument("--csv", required=True, help="losses_vqgan.csv or losses_sdm.csv")
    p.add_argument("--png", default=None, help="output image (default: next to the CSV)")
    p.set_defaults(func=cmd_plot_losses)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    args = build_parser().parse_args(argv)
    try:
        config_path = args.config or default_settings_path()
        cfg = parse_config(config_path, override_list(args.set))
        seed = args.seed if args.seed is not None else cfg.seed
        return int(args.func(args, cfg, seed) or 0)
    except MedLsdmError as exc:
        logging.error("%s: %s", type(exc).__name__, exc)
        return exit_code_for(exc)


if __name__ == "__main__":
    ensure_repo_root()
    sys.exit(main())
