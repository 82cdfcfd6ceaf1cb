"""Procedural toy dataset: smooth ellipsoidal structures on a dim background.

Every structure's label region is exactly the set of voxels whose intensity
exceeds ``BACKGROUND_THRESHOLD``; background voxels stay below it.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter
from tqdm import tqdm

from src.data.manifest import DatasetManifest, ManifestEntry, write_manifest
from src.data.volume_io import SemanticMap, Volume, save_nifti
from src.utils.errors import GeometryError


BACKGROUND_MAX = 0.15
BACKGROUND_THRESHOLD = 0.2
MIN_EXTENT = 4
MANIFEST_NAME = "manifest.tsv"


def _smooth_field(rng: np.random.Generator, shape: Tuple[int, int, int], sigma: float) -> np.ndarray:
    """Smooth noise rescaled to [-1, 1]."""
    raw = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    span = np.abs(raw).max()
    return raw / span if span > 0 else raw


def _class_level(c: int, num_classes: int) -> float:
    return 0.35 + 0.6 * c / max(1, num_classes - 1)


def make_toy_pair(
    rng: np.random.Generator,
    shape: Tuple[int, int, int],
    num_classes: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """Return (intensity (H, W, L) float32, labels (H, W, L) int64)."""
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"), axis=-1)
    labels = np.zeros(shape, dtype=np.int64)
    depth = np.full(shape, np.inf)

    for c in range(1, num_classes):
        radii = np.array([max(1.0, rng.uniform(0.15, 0.3) * s) for s in shape])
        lo = np.minimum(radii, (np.array(shape) - 1) / 2.0)
        hi = np.array(shape) - 1 - lo
        center = np.array([rng.uniform(a, b) if b > a else a for a, b in zip(lo, hi)])
        dist = (((grid - center) / radii) ** 2).sum(axis=-1)
        bump = 1.0 + 0.2 * _smooth_field(rng, shape, sigma=max(1.0, min(shape) / 4.0))
        inside = dist <= bump
        inside[tuple(np.clip(np.rint(center).astype(int), 0, np.array(shape) - 1))] = True
        labels[inside] = c
        depth[inside] = np.clip(dist[inside] / bump[inside], 0.0, 1.0)

    background = BACKGROUND_MAX * 0.5 * (1.0 + _smooth_field(rng, shape, sigma=2.0))
    image = background.copy()
    for c in range(1, num_classes):
        region = labels == c
        image[region] = _class_level(c, num_classes) * (0.85 + 0.15 * (1.0 - depth[region]))
    return image.astype(np.float32), labels


def generate_toy_dataset(
    n: int,
    shape: Sequence[int],
    num_classes: int,
    seed: int,
    out_dir: str | Path,
    n_test: int = 0,
    n_unlabeled: int = 0,
    spacing: Sequence[float] = (2.0, 2.0, 3.0),
) -> DatasetManifest:
    """Write ``n`` labeled pairs (+ optional unlabeled volumes) and their manifest."""
    shape = tuple(int(s) for s in shape)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if num_classes < 2:
        raise GeometryError(f"num_classes must be >= 2 (background + a structure), got {num_classes}")
    if len(shape) != 3 or min(shape) < MIN_EXTENT:
        raise GeometryError(f"shape {shape} is too small to hold a structure (every axis >= {MIN_EXTENT})")
    if not 0 <= n_test <= n:
        raise ValueError(f"n_test must lie in [0, {n}], got {n_test}")

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    spacing = tuple(float(s) for s in spacing)

    entries: List[ManifestEntry] = []
    for i in tqdm(range(n + n_unlabeled), desc="toy dataset", leave=False):
        rng = np.random.default_rng([int(seed), i])
        image, labels = make_toy_pair(rng, shape, num_classes)
        labeled = i < n
        sample_id = f"toy_{i:04d}" if labeled else f"toy_u{i - n:04d}"
        vol_rel = f"images/{sample_id}.nii"
        save_nifti(Volume(data=image[..., np.newaxis], spacing=spacing), out / vol_rel)
        map_rel = None
        if labeled:
            map_rel = f"maps/{sample_id}.nii"
            save_nifti(SemanticMap(labels=labels, num_classes=num_classes, spacing=spacing), out / map_rel)
        split = "test" if labeled and i >= n - n_test else "train"
        entries.append(ManifestEntry(id=sample_id, volume_path=vol_rel, map_path=map_rel, split=split))

    manifest = DatasetManifest(entries=entries, seed=seed, root=out)
    write_manifest(manifest, out / MANIFEST_NAME)
    logging.info(
        "toy dataset: %d labeled (%d test) + %d unlabeled, shape=%s classes=%d -> %s",
        n, n_test, n_unlabeled, shape, num_classes, out,
    )
    return manifest
