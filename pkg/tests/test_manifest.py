import itertools

import pytest

from src.data.manifest import (
    DatasetManifest,
    ManifestEntry,
    load_samples,
    make_batches,
    read_manifest,
    write_manifest,
)
from src.utils.errors import DataError, EmptyDatasetError, UnlabeledEntryError


def _manifest(n: int, unlabeled=()) -> DatasetManifest:
    return DatasetManifest(
        [
            ManifestEntry(id=f"s{i}", volume_path=f"images/s{i}.nii", map_path=None if i in unlabeled else f"maps/s{i}.nii")
            for i in range(n)
        ]
    )


def test_tsv_roundtrip(tmp_path):
    m = _manifest(4, unlabeled={2})
    write_manifest(m, tmp_path / "manifest.tsv")
    back = read_manifest(tmp_path / "manifest.tsv")
    assert [e.id for e in back.entries] == ["s0", "s1", "s2", "s3"]
    assert back.entries[2].map_path is None
    assert back.entries[1].map_path == "maps/s1.nii"
    assert back.root == tmp_path


def test_single_entry_single_batch():
    batches = list(make_batches(_manifest(1), batch_size=1, seed=0))
    assert len(batches) == 1
    assert batches[0].ids == ["s0"]


def test_epoch_covers_every_entry_once():
    batches = list(make_batches(_manifest(7), batch_size=2, seed=3))
    ids = [i for b in batches for i in b.ids]
    assert sorted(ids) == sorted(f"s{i}" for i in range(7))
    assert [len(b.ids) for b in batches] == [2, 2, 2, 1]


def test_seeded_replay():
    m = _manifest(10)
    first = [b.ids for b in make_batches(m, 2, seed=7, epochs=2)]
    again = [b.ids for b in make_batches(m, 2, seed=7, epochs=2)]
    other = [b.ids for b in make_batches(m, 2, seed=8, epochs=2)]
    assert first == again
    assert first != other


def test_infinite_iteration_advances_epochs():
    batches = list(itertools.islice(make_batches(_manifest(3), 3, seed=0, epochs=None), 4))
    assert [b.epoch for b in batches] == [0, 1, 2, 3]


def test_empty_manifest():
    with pytest.raises(EmptyDatasetError):
        next(make_batches(DatasetManifest([]), 2, seed=0))


def test_duplicate_ids():
    e = ManifestEntry(id="a", volume_path="a.nii", map_path=None)
    with pytest.raises(DataError):
        DatasetManifest([e, e])


def test_require_labeled():
    m = _manifest(3, unlabeled={1})
    with pytest.raises(UnlabeledEntryError):
        m.require_labeled()
    m.labeled_only().require_labeled()


def test_load_samples_by_split(toy_manifest):
    train = load_samples(toy_manifest, (8, 8, 4), split="train")
    test = load_samples(toy_manifest, (8, 8, 4), split="test")
    assert list(test) == ["toy_0004", "toy_0005"]
    assert len(train) == 4
    sample = test["toy_0004"]
    assert sample.volume.data.shape == (8, 8, 4, 1)
    assert sample.map.num_classes == 3
    with pytest.raises(EmptyDatasetError):
        load_samples(toy_manifest, (8, 8, 4), split="validation")
