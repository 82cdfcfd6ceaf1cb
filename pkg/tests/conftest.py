from __future__ import annotations

import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from src.analyzer.faithfulness import synthetic_pairs  # noqa: E402
from src.data.manifest import load_samples  # noqa: E402
from src.data.toy_loader import generate_toy_dataset  # noqa: E402
from src.models.denoiser import DenoiserConfig  # noqa: E402
from src.models.vqgan import CompressionConfig  # noqa: E402
from src.trainers.sdm_trainer import train_sdm_phase  # noqa: E402
from src.trainers.synthesis import Synthesizer  # noqa: E402
from src.trainers.vqgan_trainer import train_vqgan_phase  # noqa: E402
from src.utils.config import build_config, parse_config  # noqa: E402


TINY_SHAPE = (8, 8, 4)

TINY_TREE = {
    "data": {"shape": list(TINY_SHAPE), "num_classes": 3, "toy_train": 6, "toy_test": 2},
    "compression": {
        "t": 2,
        "n_z": 2,
        "K": 8,
        "base_channels": 4,
        "num_groups": 2,
        "disc_channels": 4,
        "feature_channels": [2, 2],
        "num_slices": 1,
    },
    "vqgan_train": {"steps": 3, "batch_size": 2, "log_every": 1, "checkpoint_every": 2},
    "diffusion": {"T": 5},
    "denoiser": {
        "channels": [4, 8],
        "num_groups": 2,
        "time_dim": 8,
        "map_channels": 4,
        "spade_hidden": 4,
        "attention_levels": [0, 1],
    },
    "sdm_train": {"steps": 3, "batch_size": 2, "log_every": 1, "checkpoint_every": 2},
    "segmentation": {"base_channels": 2, "epochs": 1, "batch_size": 2, "patch_size": [8, 8, 4]},
    "evaluation": {"feature_dim": 4},
}


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def tiny_cfg():
    return build_config(TINY_TREE)


@pytest.fixture
def tiny_compression() -> CompressionConfig:
    return CompressionConfig(
        t=2, n_z=2, K=8, base_channels=4, num_groups=2, disc_channels=4, feature_channels=(2, 2), num_slices=1
    )


@pytest.fixture
def tiny_denoiser() -> DenoiserConfig:
    return DenoiserConfig(
        n_z=2,
        num_classes=3,
        latent_shape=(4, 4, 2),
        t=2,
        channels=(4, 8),
        num_groups=2,
        time_dim=8,
        map_channels=4,
        spade_hidden=4,
        spade_kernel=3,
        attention_levels=(0, 1),
    )


@pytest.fixture
def toy_manifest(tmp_path):
    return generate_toy_dataset(6, TINY_SHAPE, 3, seed=0, out_dir=tmp_path / "toy", n_test=2)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    yield


DESK_SETTINGS = ROOT / "config" / "settings.yaml"


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Default-settings toy run: 64/16 pairs, both phases, one synthetic volume per test map."""
    root = tmp_path_factory.mktemp("desk")
    cfg = parse_config(DESK_SETTINGS)
    d = cfg.data
    manifest = generate_toy_dataset(
        d.toy_train + d.toy_test, d.shape, d.num_classes, seed=0, out_dir=root / "toy", n_test=d.toy_test, spacing=d.spacing
    )
    train_split = manifest.filter_split("train")
    train_vqgan_phase(train_split, cfg, seed=0, out_dir=root, ckpt_path=root / "vqgan.ckpt")
    train_sdm_phase(train_split, root / "vqgan.ckpt", cfg, seed=0, out_dir=root, ckpt_path=root / "sdm.ckpt")
    synthesizer = Synthesizer(root / "vqgan.ckpt", root / "sdm.ckpt", device="cpu")
    train = list(load_samples(manifest, d.shape, split="train").values())
    test = list(load_samples(manifest, d.shape, split="test").values())
    return SimpleNamespace(
        cfg=cfg,
        root=root,
        synthesizer=synthesizer,
        train=train,
        test=test,
        synth=synthetic_pairs(test, synthesizer, seed=0),
    )
