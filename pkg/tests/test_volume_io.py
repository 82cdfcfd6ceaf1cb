import numpy as np
import pytest
import torch

from src.data.volume_io import (
    SemanticMap,
    Volume,
    load_nifti,
    map_to_tensor,
    one_hot,
    preprocess,
    preprocess_map,
    save_nifti,
    tensor_to_volume,
    volume_to_tensor,
)
from src.utils.errors import (
    CorruptFileError,
    DegenerateInputError,
    InvalidLabelError,
    NiftiFormatError,
    NonFiniteError,
    NumericError,
    ShapeError,
    UnsupportedDtypeError,
)


def _vol(rng, shape=(6, 5, 4, 1), spacing=(2.0, 2.0, 3.0)):
    return Volume(data=rng.standard_normal(shape).astype(np.float32), spacing=spacing)


def test_float_roundtrip_bit_equal(tmp_path, rng):
    vol = _vol(rng)
    save_nifti(vol, tmp_path / "v.nii")
    back = load_nifti(tmp_path / "v.nii")
    assert isinstance(back, Volume)
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.spacing == (2.0, 2.0, 3.0)


def test_int16_payload_roundtrip(tmp_path, rng):
    arr = rng.integers(-500, 500, size=(4, 4, 2, 1)).astype(np.int16)
    save_nifti(Volume(data=arr), tmp_path / "i.nii")
    back = load_nifti(tmp_path / "i.nii")
    assert np.array_equal(np.asarray(back.data), arr)


def test_bad_magic_rejected(tmp_path, rng):
    path = tmp_path / "v.nii"
    save_nifti(_vol(rng), path)
    raw = bytearray(path.read_bytes())
    raw[344:348] = b"xyz\x00"
    path.write_bytes(bytes(raw))
    with pytest.raises(NiftiFormatError):
        load_nifti(path)


def test_truncated_payload(tmp_path, rng):
    path = tmp_path / "v.nii"
    save_nifti(_vol(rng), path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CorruptFileError):
        load_nifti(path)


def test_short_header(tmp_path):
    path = tmp_path / "tiny.nii"
    path.write_bytes(b"\x00" * 100)
    with pytest.raises(CorruptFileError):
        load_nifti(path)


def test_non_finite_rejected_before_write(tmp_path, rng):
    vol = _vol(rng)
    vol.data[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        save_nifti(vol, tmp_path / "nan.nii")
    assert not (tmp_path / "nan.nii").exists()


def test_unsupported_dtype_on_write(tmp_path):
    with pytest.raises(UnsupportedDtypeError):
        save_nifti(Volume(data=np.linspace(0, 1, 16).reshape(2, 2, 4, 1)), tmp_path / "f64.nii")


def test_semantic_map_roundtrip(tmp_path, rng):
    smap = SemanticMap(labels=rng.integers(0, 3, size=(4, 4, 2)), num_classes=3, spacing=(2.0, 2.0, 3.0))
    save_nifti(smap, tmp_path / "m.nii")
    back = load_nifti(tmp_path / "m.nii")
    assert isinstance(back, SemanticMap)
    assert back.num_classes == 3
    assert np.array_equal(back.labels, smap.labels)
    assert back.spacing == smap.spacing


def test_preprocess_identity_on_conforming_volume():
    data = np.linspace(-1.0, 1.0, 8 * 8 * 4).reshape(8, 8, 4, 1).astype(np.float32)
    vol = Volume(data=data)
    assert preprocess(vol, (8, 8, 4)) is vol


def test_preprocess_ramp_endpoints():
    data = np.arange(8 * 8 * 4, dtype=np.float32).reshape(8, 8, 4, 1)
    out = preprocess(Volume(data=data), (8, 8, 4))
    assert out.data.min() == -1.0
    assert out.data.max() == 1.0
    assert out.data[0, 0, 0, 0] == -1.0
    assert out.data[-1, -1, -1, 0] == 1.0


def test_preprocess_crop_and_resample(rng):
    big = preprocess(_vol(rng, shape=(10, 12, 6, 1)), (8, 8, 4))
    small = preprocess(_vol(rng, shape=(4, 4, 2, 1)), (8, 8, 4))
    assert big.data.shape == (8, 8, 4, 1)
    assert small.data.shape == (8, 8, 4, 1)
    assert small.data.min() >= -1.0 and small.data.max() <= 1.0


def test_preprocess_is_idempotent(rng):
    once = preprocess(_vol(rng, shape=(10, 10, 6, 1)), (8, 8, 4))
    assert preprocess(once, (8, 8, 4)) is once


def test_constant_volume_degenerate():
    with pytest.raises(DegenerateInputError):
        preprocess(Volume(data=np.full((4, 4, 2, 1), 3.0, dtype=np.float32)), (4, 4, 2))


def test_preprocess_map_keeps_labels_integral(rng):
    smap = SemanticMap(labels=rng.integers(0, 3, size=(4, 4, 2)), num_classes=3)
    out = preprocess_map(smap, (8, 8, 4))
    assert out.shape == (8, 8, 4)
    assert set(np.unique(out.labels)) <= {0, 1, 2}


def test_one_hot_single_voxel():
    oh = one_hot(SemanticMap(labels=np.array([[[2]]]), num_classes=3))
    assert oh.shape == (1, 1, 1, 3)
    assert oh[0, 0, 0].tolist() == [0.0, 0.0, 1.0]


def test_one_hot_against_loop(rng):
    labels = rng.integers(0, 4, size=(4, 4, 2))
    oh = one_hot(SemanticMap(labels=labels, num_classes=4))
    for idx in np.ndindex(labels.shape):
        for c in range(4):
            assert oh[idx + (c,)] == (1.0 if labels[idx] == c else 0.0)
    assert np.all(oh.sum(axis=-1) == 1.0)
    assert np.array_equal(oh.argmax(axis=-1), labels)


def test_label_out_of_range():
    with pytest.raises(InvalidLabelError):
        SemanticMap(labels=np.array([[[0, 3]]]), num_classes=3)


def test_shape_contracts():
    with pytest.raises(ShapeError):
        Volume(data=np.zeros((4, 4, 2), dtype=np.float32))
    with pytest.raises(ShapeError):
        SemanticMap(labels=np.zeros((4, 4), dtype=np.int64), num_classes=2)


def test_tensor_bridges(rng):
    vol = _vol(rng, shape=(4, 6, 2, 1))
    t = volume_to_tensor(vol)
    assert tuple(t.shape) == (1, 4, 6, 2)
    back = tensor_to_volume(t, spacing=vol.spacing)
    assert np.array_equal(back.data, vol.data)
    smap = SemanticMap(labels=rng.integers(0, 3, size=(4, 6, 2)), num_classes=3)
    m = map_to_tensor(smap)
    assert tuple(m.shape) == (3, 4, 6, 2)
    assert torch.equal(m.argmax(dim=0), torch.from_numpy(smap.labels))


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_volume_rejects_non_finite_data(rng, bad):
    data = rng.standard_normal((4, 4, 2, 1)).astype(np.float32)
    data[1, 2, 0, 0] = bad
    with pytest.raises(NumericError) as info:
        Volume(data=data)
    assert isinstance(info.value, NonFiniteError)
