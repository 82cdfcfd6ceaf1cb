import json
import zipfile

import numpy as np
import pytest
import torch

from src.models.losses import make_vqgan_optimizers, vqgan_train_step
from src.models.vqgan import VQGAN
from src.storage.checkpoint_store import (
    CheckpointBundle,
    checkpoint_roundtrip,
    load_checkpoint,
    save_checkpoint,
)
from src.trainers.vqgan_trainer import load_vqgan, vqgan_bundle
from src.utils.config import RunConfig
from src.utils.errors import CheckpointCorruptError, CheckpointVersionError


def _bundle(**kw) -> CheckpointBundle:
    base = dict(phase="vqgan", step=3, seed=1, config={"seed": 1}, arrays={"a/w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    base.update(kw)
    return CheckpointBundle(**base)


def test_bundle_roundtrip(tmp_path):
    back = checkpoint_roundtrip(_bundle(meta={"note": "x"}), tmp_path / "c.ckpt")
    assert back.step == 3 and back.seed == 1
    assert back.meta == {"note": "x"}
    assert np.array_equal(back.arrays["a/w"], np.arange(6, dtype=np.float32).reshape(2, 3))


def test_identical_bundles_give_identical_bytes(tmp_path):
    save_checkpoint(_bundle(), tmp_path / "a.ckpt")
    save_checkpoint(_bundle(), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_vqgan_outputs_bit_equal_after_reload(tmp_path, tiny_compression):
    model = VQGAN(tiny_compression)
    opts = make_vqgan_optimizers(model)
    x = torch.rand(2, 1, 8, 8, 4) * 2 - 1
    vqgan_train_step(x, model, opts, step=1)
    save_checkpoint(vqgan_bundle(model, opts, 1, 0, RunConfig()), tmp_path / "v.ckpt")

    loaded, latent_range, loaded_opts = load_vqgan(tmp_path / "v.ckpt", with_optimizers=True)
    model.eval()
    loaded.eval()
    with torch.no_grad():
        assert torch.equal(model(x)[0], loaded(x)[0])
    assert latent_range.lo == float(model.codebook.entries.min())
    p = next(iter(model.encoder.parameters()))
    q = next(iter(loaded.encoder.parameters()))
    assert torch.equal(opts.autoencoder.state[p]["exp_avg"], loaded_opts.autoencoder.state[q]["exp_avg"])


def test_truncated_archive_is_corrupt(tmp_path):
    path = save_checkpoint(_bundle(), tmp_path / "c.ckpt")
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path)


def test_tampered_array_fails_digest(tmp_path):
    path = save_checkpoint(_bundle(), tmp_path / "c.ckpt")
    with zipfile.ZipFile(path) as zf:
        members = {name: zf.read(name) for name in zf.namelist()}
    raw = bytearray(members["arrays/a/w.f32"])
    raw[0] ^= 0xFF
    members["arrays/a/w.f32"] = bytes(raw)
    with zipfile.ZipFile(path, "w") as zf:
        for name, data in members.items():
            zf.writestr(name, data)
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path)


def test_future_version_rejected(tmp_path):
    path = save_checkpoint(_bundle(version=2), tmp_path / "c.ckpt")
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_wrong_phase_and_missing_file(tmp_path):
    path = save_checkpoint(_bundle(), tmp_path / "c.ckpt")
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path, expected_phase="sdm")
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(tmp_path / "absent.ckpt")
    with pytest.raises(ValueError):
        _bundle(phase="segmenter")


def test_manifest_lists_array_digests(tmp_path):
    path = save_checkpoint(_bundle(), tmp_path / "c.ckpt")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
    assert manifest["version"] == 1
    assert manifest["arrays"]["a/w"]["shape"] == [2, 3]
    assert len(manifest["arrays"]["a/w"]["sha256"]) == 64
