import numpy as np

from src.analyzer.montage import center_slices, latent_montage, slice_montage, snapshot_montage
from src.data.volume_io import SemanticMap, Volume


def test_center_slices_views():
    arr = np.arange(4 * 6 * 3).reshape(4, 6, 3)
    views = center_slices(arr)
    assert views["axial"].shape == (4, 6)
    assert views["coronal"].shape == (4, 3)
    assert views["sagittal"].shape == (6, 3)
    assert np.array_equal(views["axial"], arr[:, :, 1])


def test_pngs_written(tmp_path, rng):
    vol = Volume(data=rng.uniform(-1, 1, size=(8, 8, 4, 1)).astype(np.float32))
    smap = SemanticMap(labels=rng.integers(0, 3, size=(8, 8, 4)), num_classes=3)
    paths = [
        slice_montage({"real": vol, "map": smap}, tmp_path / "m" / "montage.png"),
        latent_montage(rng.standard_normal((2, 4, 4, 2)), tmp_path / "latent.png"),
        snapshot_montage([(5, vol), (1, vol)], tmp_path / "snap.png"),
    ]
    for p in paths:
        assert p.exists() and p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
