"""마스크 충실도(mask faithfulness) 평가 하네스.

- real-train 세트로만 3D 분할 네트워크를 학습 (배치마다 provenance 태그로 검사)
- real-train / real-test / synthetic 세트에서 Dice 평가
- synthetic 세트는 real-test의 semantic map으로 생성한 볼륨
- 결과: metric,dataset,value 형식의 표 (faithfulness.csv)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from src.analyzer.metrics import SUMMARY_COLUMNS, dice
from src.data.volume_io import PairedSample, volume_to_tensor
from src.models.segmentation import SegHarnessConfig, SegUNet3D, make_seg_loss
from src.utils.errors import DataError, InvalidLabelError, UnlabeledEntryError


REAL_TRAIN = "real-train"
REAL_TEST = "real-test"
SYNTHETIC = "synthetic"
DATASETS = (REAL_TRAIN, REAL_TEST, SYNTHETIC)


class ProvenanceError(DataError):
    """A batch that is not real-train data reached the segmentation optimizer."""


@dataclass(frozen=True)
class TaggedBatch:
    x: torch.Tensor
    y: torch.Tensor
    ids: Tuple[str, ...]
    provenance: Tuple[str, ...]


def check_provenance(batch: TaggedBatch, allowed: str = REAL_TRAIN) -> None:
    bad = sorted({p for p in batch.provenance if p != allowed})
    if bad:
        raise ProvenanceError(f"training batch carries {bad} data: {list(batch.ids)}")


def _class_count(sets: Dict[str, Sequence[PairedSample]]) -> int:
    counts = set()
    for name, samples in sets.items():
        for s in samples:
            if s.map is None:
                raise UnlabeledEntryError(f"{name}/{s.id} has no semantic map")
            counts.add(s.map.num_classes)
    if len(counts) != 1:
        raise InvalidLabelError(f"class counts differ across sets: {sorted(counts)}")
    return counts.pop()


def target_labels(labels: np.ndarray, map_classes: int, seg_classes: int) -> np.ndarray:
    """Map labels onto the segmenter's classes; a 2-class segmenter sees foreground vs background."""
    if seg_classes == map_classes:
        return labels.astype(np.int64)
    if seg_classes == 2:
        return (labels > 0).astype(np.int64)
    raise InvalidLabelError(f"segmenter has {seg_classes} classes, maps have {map_classes}")


def _patch(rng: np.random.Generator, shape: Sequence[int], patch: Sequence[int]) -> Tuple[slice, ...]:
    out = []
    for s, p in zip(shape, patch):
        size = min(s, p)
        start = int(rng.integers(0, s - size + 1))
        out.append(slice(start, start + size))
    return tuple(out)


def patch_batches(
    samples: Sequence[Tuple[str, PairedSample]],
    cfg: SegHarnessConfig,
    map_classes: int,
    rng: np.random.Generator,
) -> Iterator[TaggedBatch]:
    """One epoch of random patches; every batch keeps the provenance tag of each sample."""
    order = rng.permutation(len(samples))
    for start in range(0, len(order), cfg.batch_size):
        chosen = [samples[i] for i in order[start : start + cfg.batch_size]]
        xs, ys = [], []
        for _, s in chosen:
            sl = _patch(rng, s.volume.shape, cfg.patch_size)
            xs.append(volume_to_tensor(s.volume)[(slice(None), *sl)])
            ys.append(torch.from_numpy(target_labels(s.map.labels[sl], map_classes, cfg.num_classes)))
        yield TaggedBatch(
            x=torch.stack(xs),
            y=torch.stack(ys),
            ids=tuple(s.id for _, s in chosen),
            provenance=tuple(tag for tag, _ in chosen),
        )


def train_segmenter(
    train: Sequence[Tuple[str, PairedSample]],
    cfg: SegHarnessConfig,
    map_classes: int,
    seed: int,
) -> SegUNet3D:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SegUNet3D(cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    loss_fn = make_seg_loss()
    rng = np.random.default_rng(seed)
    model.train()
    for epoch in tqdm(range(cfg.epochs), desc="segmenter", leave=False):
        losses = []
        for batch in patch_batches(train, cfg, map_classes, rng):
            check_provenance(batch)
            loss = loss_fn(model(batch.x), batch.y[:, None])
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        logging.info("[segmenter epoch %d] loss=%.4f", epoch + 1, float(np.mean(losses)))
    return model.eval()


def segment(model: SegUNet3D, sample: PairedSample) -> np.ndarray:
    with torch.no_grad():
        logits = model(volume_to_tensor(sample.volume)[None])
    return logits.argmax(dim=1)[0].numpy()


def mean_dice(model: SegUNet3D, samples: Sequence[PairedSample], map_classes: int) -> float:
    scores = []
    for s in samples:
        gt = target_labels(s.map.labels, map_classes, model.num_classes)
        scores.append(dice(segment(model, s), gt, num_classes=model.num_classes).mean)
    return float(np.mean(scores))


def faithfulness_harness(
    real_train: Sequence[PairedSample],
    real_test: Sequence[PairedSample],
    synth_set: Sequence[PairedSample],
    seg_config: SegHarnessConfig,
    seed: int,
) -> pd.DataFrame:
    sets = {REAL_TRAIN: real_train, REAL_TEST: real_test, SYNTHETIC: synth_set}
    if not real_train:
        raise DataError("faithfulness harness needs at least one real-train pair")
    map_classes = _class_count(sets)
    tagged = [(REAL_TRAIN, s) for s in real_train]
    logging.info(
        "faithfulness: train=%d test=%d synthetic=%d classes=%d/%d",
        len(real_train), len(real_test), len(synth_set), map_classes, seg_config.num_classes,
    )
    model = train_segmenter(tagged, seg_config, map_classes, seed)
    rows = []
    for name in DATASETS:
        value = mean_dice(model, sets[name], map_classes) if sets[name] else float("nan")
        rows.append(("dice", name, value))
        logging.info("dice[%s] = %.4f", name, value)
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def synthetic_pairs(real_test: Sequence[PairedSample], synthesizer, seed: int) -> List[PairedSample]:
    """Synthesize one volume per test map (seed + i) and pair it with that map."""
    out = []
    for i, s in enumerate(tqdm(real_test, desc="synthesize", leave=False)):
        result = synthesizer(s.map, seed=seed + i)
        out.append(PairedSample(volume=result.volume, map=s.map, id=f"synth_{s.id}", split="synthetic"))
    return out
