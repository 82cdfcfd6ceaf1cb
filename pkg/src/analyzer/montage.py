"""Slice montages and loss curves as PNG files (matplotlib)."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from src.data.volume_io import SemanticMap, Volume


VIEWS = ("axial", "coronal", "sagittal")

Renderable = Union[Volume, SemanticMap, np.ndarray]


def _grid(item: Renderable) -> Tuple[np.ndarray, bool]:
    if isinstance(item, SemanticMap):
        return item.labels, True
    data = item.data if isinstance(item, Volume) else np.asarray(item)
    if data.ndim == 4:
        data = data[..., 0]
    return data, False


def center_slices(arr: np.ndarray) -> Dict[str, np.ndarray]:
    h, w, l = arr.shape
    return {
        "axial": arr[:, :, l // 2],
        "coronal": arr[:, w // 2, :],
        "sagittal": arr[h // 2, :, :],
    }


def _save(fig, out_path: str | Path) -> Path:
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    logging.info("saved %s", out)
    return out


def slice_montage(items: Dict[str, Renderable], out_path: str | Path) -> Path:
    """One row per item, axial / coronal / sagittal center slices as columns."""
    fig, axes = plt.subplots(len(items), len(VIEWS), figsize=(3 * len(VIEWS), 3 * len(items)), squeeze=False)
    for row, (name, item) in enumerate(items.items()):
        arr, is_map = _grid(item)
        for col, (view, sl) in enumerate(center_slices(arr).items()):
            ax = axes[row][col]
            if is_map:
                ax.imshow(sl.T, cmap="tab10", vmin=0, vmax=9, origin="lower", interpolation="nearest")
            else:
                ax.imshow(sl.T, cmap="gray", vmin=-1.0, vmax=1.0, origin="lower")
            ax.set_title(f"{name} / {view}", fontsize=8)
            ax.axis("off")
    return _save(fig, out_path)


def latent_montage(z: np.ndarray, out_path: str | Path, title: str = "latent") -> Path:
    """(n_z, h, w, l) latent -> one panel per channel at the middle depth slice."""
    n_z = z.shape[0]
    fig, axes = plt.subplots(1, n_z, figsize=(2 * n_z, 2.4), squeeze=False)
    mid = z.shape[-1] // 2
    for c in range(n_z):
        ax = axes[0][c]
        ax.imshow(z[c, :, :, mid].T, cmap="viridis", origin="lower")
        ax.set_title(f"{title}[{c}]", fontsize=8)
        ax.axis("off")
    return _save(fig, out_path)


def snapshot_montage(snapshots: Sequence[Tuple[int, Volume]], out_path: str | Path) -> Path:
    """Progressive generation: decoded z_t per snapshot, axial center slice."""
    n = len(snapshots)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.6), squeeze=False)
    for i, (t, vol) in enumerate(snapshots):
        arr, _ = _grid(vol)
        ax = axes[0][i]
        ax.imshow(center_slices(arr)["axial"].T, cmap="gray", vmin=-1.0, vmax=1.0, origin="lower")
        ax.set_title(f"t={t}", fontsize=8)
        ax.axis("off")
    return _save(fig, out_path)


def plot_losses(csv_path: str | Path, out_path: Optional[str | Path] = None, columns: Optional[List[str]] = None) -> Path:
    df = pd.read_csv(csv_path)
    cols = columns or [c for c in df.columns if c != "step"]
    fig, axes = plt.subplots(len(cols), 1, figsize=(8, 2.2 * len(cols)), sharex=True, squeeze=False)
    for ax, col in zip(axes[:, 0], cols):
        ax.plot(df["step"], df[col], lw=0.8)
        ax.set_ylabel(col, fontsize=8)
        ax.grid(True)
    axes[-1][0].set_xlabel("step")
    out = out_path or Path(csv_path).with_suffix(".png")
    return _save(fig, out)
