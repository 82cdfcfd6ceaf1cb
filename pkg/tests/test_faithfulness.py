import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from conftest import TINY_SHAPE
from src.analyzer.faithfulness import (
    REAL_TEST,
    REAL_TRAIN,
    SYNTHETIC,
    ProvenanceError,
    TaggedBatch,
    check_provenance,
    faithfulness_harness,
    patch_batches,
    synthetic_pairs,
    target_labels,
)
from src.data.manifest import load_samples
from src.data.volume_io import PairedSample, SemanticMap, Volume
from src.models.segmentation import SegHarnessConfig, SegUNet3D, make_seg_loss
from src.utils.errors import InvalidLabelError, UnlabeledEntryError

SEG = SegHarnessConfig(num_classes=3, base_channels=2, epochs=1, batch_size=2, patch_size=(8, 8, 4), lr=1e-3)


@pytest.fixture
def pairs(toy_manifest):
    train = list(load_samples(toy_manifest, TINY_SHAPE, split="train").values())
    test = list(load_samples(toy_manifest, TINY_SHAPE, split="test").values())
    return train, test


def test_synthetic_alias_of_test_gives_equal_dice(pairs):
    train, test = pairs
    df = faithfulness_harness(train, test, test, SEG, seed=0)
    values = dict(zip(df["dataset"], df["value"]))
    assert list(df["metric"]) == ["dice"] * 3
    assert set(values) == {REAL_TRAIN, REAL_TEST, SYNTHETIC}
    assert values[SYNTHETIC] == values[REAL_TEST]
    assert all(0.0 <= v <= 1.0 for v in values.values())


def test_harness_is_seeded(pairs):
    train, test = pairs
    a = faithfulness_harness(train, test, test, SEG, seed=3)
    b = faithfulness_harness(train, test, test, SEG, seed=3)
    assert a["value"].tolist() == b["value"].tolist()


def test_empty_synthetic_set_reports_nan(pairs):
    train, test = pairs
    df = faithfulness_harness(train, test, [], SEG, seed=0)
    assert math.isnan(float(df.loc[df["dataset"] == SYNTHETIC, "value"].iloc[0]))


def test_class_count_mismatch(pairs):
    train, test = pairs
    odd = test[0]
    relabeled = PairedSample(
        volume=odd.volume,
        map=SemanticMap(labels=odd.map.labels, num_classes=4),
        id="odd",
        split="test",
    )
    with pytest.raises(InvalidLabelError):
        faithfulness_harness(train, [relabeled], test, SEG, seed=0)


def test_unlabeled_sample_rejected(pairs):
    train, test = pairs
    bare = PairedSample(volume=test[0].volume, map=None, id="bare", split="test")
    with pytest.raises(UnlabeledEntryError):
        faithfulness_harness(train, test, [bare], SEG, seed=0)


def test_non_training_batch_is_refused():
    batch = TaggedBatch(
        x=torch.zeros(2, 1, 8, 8, 4),
        y=torch.zeros(2, 8, 8, 4, dtype=torch.long),
        ids=("a", "b"),
        provenance=(REAL_TRAIN, SYNTHETIC),
    )
    with pytest.raises(ProvenanceError):
        check_provenance(batch)
    check_provenance(TaggedBatch(x=batch.x, y=batch.y, ids=batch.ids, provenance=(REAL_TRAIN, REAL_TRAIN)))


def test_patch_batches_keep_tags(pairs):
    train, _ = pairs
    tagged = [(REAL_TRAIN, s) for s in train]
    cfg = SegHarnessConfig(num_classes=2, batch_size=3, patch_size=(4, 4, 2))
    batches = list(patch_batches(tagged, cfg, 3, np.random.default_rng(0)))
    assert [len(b.ids) for b in batches] == [3, 1]
    assert tuple(batches[0].x.shape) == (3, 1, 4, 4, 2)
    assert int(batches[0].y.max()) <= 1
    assert all(set(b.provenance) == {REAL_TRAIN} for b in batches)


def test_target_labels_binarize():
    labels = np.array([[[0, 1, 2]]])
    assert target_labels(labels, 3, 2).tolist() == [[[0, 1, 1]]]
    assert target_labels(labels, 3, 3).tolist() == [[[0, 1, 2]]]
    with pytest.raises(InvalidLabelError):
        target_labels(labels, 3, 4)


def test_dice_ce_loss_prefers_correct_logits():
    target = torch.randint(0, 2, (1, 4, 4, 2), generator=torch.Generator().manual_seed(0))
    good = torch.nn.functional.one_hot(target, 2).permute(0, 4, 1, 2, 3).float() * 10.0
    loss = make_seg_loss()
    assert float(loss(good, target[:, None])) < float(loss(-good, target[:, None]))
    assert SegUNet3D(SEG)(torch.zeros(1, 1, 8, 8, 4)).shape == (1, 3, 8, 8, 4)


def test_synthetic_pairs_seed_and_ids(pairs):
    _, test = pairs
    seen = []

    def fake(m, seed):
        seen.append(seed)
        return SimpleNamespace(volume=Volume(data=np.zeros(m.shape + (1,), dtype=np.float32)))

    out = synthetic_pairs(test, fake, seed=10)
    assert seen == [10, 11]
    assert [s.id for s in out] == ["synth_toy_0004", "synth_toy_0005"]
    assert all(s.map is t.map for s, t in zip(out, test))


@pytest.mark.slow
def test_desk_run_dice_ordering(desk_run):
    seg = SegHarnessConfig.from_run(desk_run.cfg)
    assert seg.num_classes == 2
    df = faithfulness_harness(desk_run.train, desk_run.test, desk_run.synth, seg, seed=0)
    values = dict(zip(df["dataset"], df["value"]))
    assert values[REAL_TRAIN] >= values[REAL_TEST] >= 0.6
    assert values[SYNTHETIC] >= 0.8 * values[REAL_TEST]
    again = faithfulness_harness(desk_run.train, desk_run.test, desk_run.synth, seg, seed=0)
    assert again["value"].tolist() == df["value"].tolist()


@pytest.mark.slow
def test_desk_run_synthesis_repeats_bitwise(desk_run):
    again = synthetic_pairs(desk_run.test, desk_run.synthesizer, seed=0)
    for first, second in zip(desk_run.synth, again):
        assert np.array_equal(first.volume.data, second.volume.data)
