"""Dataset manifests and deterministic batch iteration.

Manifest file: one line per sample, ``id<TAB>volume_path<TAB>map_path|-<TAB>split``.
Relative paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.data.volume_io import PairedSample, SemanticMap, Volume, load_nifti, preprocess, preprocess_map
from src.utils.errors import DataError, EmptyDatasetError, UnlabeledEntryError


MANIFEST_COLUMNS = ["id", "volume_path", "map_path", "split"]
NO_MAP = "-"


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    volume_path: str
    map_path: Optional[str]
    split: str = "train"

    @property
    def labeled(self) -> bool:
        return self.map_path is not None


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    seed: int = 0
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate manifest ids: {dupes}")

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def filter_split(self, split: Optional[str]) -> "DatasetManifest":
        if split is None:
            return self
        return DatasetManifest([e for e in self.entries if e.split == split], seed=self.seed, root=self.root)

    def labeled_only(self) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.labeled], seed=self.seed, root=self.root)

    def require_labeled(self) -> None:
        missing = [e.id for e in self.entries if not e.labeled]
        if missing:
            raise UnlabeledEntryError(f"{len(missing)} unlabeled entries where maps are required: {missing[:5]}")


def read_manifest(path: str | Path, seed: int = 0) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    df = pd.read_csv(path, sep="\t", header=None, names=MANIFEST_COLUMNS, dtype=str, comment="#")
    entries = []
    for _, row in df.iterrows():
        map_path = str(row["map_path"]).strip()
        entries.append(
            ManifestEntry(
                id=str(row["id"]).strip(),
                volume_path=str(row["volume_path"]).strip(),
                map_path=None if map_path in ("", NO_MAP, "nan") else map_path,
                split=str(row["split"]).strip() if isinstance(row["split"], str) else "train",
            )
        )
    return DatasetManifest(entries=entries, seed=seed, root=path.parent)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [
        {"id": e.id, "volume_path": e.volume_path, "map_path": e.map_path or NO_MAP, "split": e.split}
        for e in manifest.entries
    ]
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(path, sep="\t", header=False, index=False)
    return path


@dataclass(frozen=True)
class Batch:
    epoch: int
    index: int
    entries: Tuple[ManifestEntry, ...]

    @property
    def ids(self) -> List[str]:
        return [e.id for e in self.entries]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), int(epoch)])
    return rng.permutation(n)


def make_batches(
    manifest: DatasetManifest,
    batch_size: int,
    seed: int,
    epochs: Optional[int] = 1,
) -> Iterator[Batch]:
    """Seeded per-epoch permutations cut into batches; the last batch may be short.

    ``epochs=None`` iterates forever.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(manifest) == 0:
        raise EmptyDatasetError("manifest has no entries")
    epoch = 0
    while epochs is None or epoch < epochs:
        order = epoch_order(len(manifest), seed, epoch)
        for bi, start in enumerate(range(0, len(order), batch_size)):
            idx = order[start:start + batch_size]
            yield Batch(epoch=epoch, index=bi, entries=tuple(manifest.entries[i] for i in idx))
        epoch += 1


def load_sample(manifest: DatasetManifest, entry: ManifestEntry, target_shape: Sequence[int]) -> PairedSample:
    vol = load_nifti(manifest.resolve(entry.volume_path))
    if not isinstance(vol, Volume):
        raise DataError(f"{entry.id}: volume path holds a label map")
    vol = preprocess(vol, tuple(target_shape))
    smap = None
    if entry.map_path is not None:
        smap = load_nifti(manifest.resolve(entry.map_path))
        if not isinstance(smap, SemanticMap):
            raise DataError(f"{entry.id}: map path does not hold a label map")
        smap = preprocess_map(smap, tuple(target_shape))
    return PairedSample(volume=vol, map=smap, id=entry.id, split=entry.split)


def load_samples(
    manifest: DatasetManifest,
    target_shape: Sequence[int],
    split: Optional[str] = None,
) -> Dict[str, PairedSample]:
    """Load and preprocess every entry (optionally one split) keyed by id."""
    sub = manifest.filter_split(split)
    if len(sub) == 0:
        raise EmptyDatasetError(f"no manifest entries for split={split!r}")
    out: Dict[str, PairedSample] = {}
    for entry in sub.entries:
        try:
            out[entry.id] = load_sample(sub, entry, target_shape)
        except DataError:
            logging.exception("failed to load sample %s", entry.id)
            raise
    logging.info("loaded %d samples (split=%s, shape=%s)", len(out), split or "all", tuple(target_shape))
    return out
