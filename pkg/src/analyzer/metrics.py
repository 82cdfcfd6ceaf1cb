"""Image-quality and distribution metrics for real vs synthetic volumes.

- rmse_psnr / ssim: paired, per volume
- 3D-FID / FID: Fréchet distance between Gaussians fitted to extractor features
- dice: per-class overlap between label maps
Summary tables use the columns ``metric,dataset,value``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from skimage.metrics import structural_similarity

from src.data.volume_io import SemanticMap, Volume
from src.utils.errors import DomainError, NumericError, ShapeError


PSNR_CAP = 99.0
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSD_TOL = 1e-6
SUMMARY_COLUMNS = ["metric", "dataset", "value"]

VolumeLike = Union[Volume, np.ndarray]


def _data(v: VolumeLike) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)


# ---------- paired metrics ----------

def rmse_psnr(a: VolumeLike, b: VolumeLike, peak: float = 2.0) -> Tuple[float, float]:
    x, y = _data(a), _data(b)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    if peak <= 0:
        raise DomainError(f"peak must be > 0, got {peak}")
    rmse = float(np.sqrt(np.mean((x - y) ** 2)))
    if rmse == 0.0:
        return rmse, PSNR_CAP
    return rmse, float(min(PSNR_CAP, 20.0 * math.log10(peak / rmse)))


def ssim(a: VolumeLike, b: VolumeLike, window_size: int = SSIM_WINDOW) -> float:
    """Mean slice-wise 2D SSIM; inputs in [-1, 1] are rescaled to [0, 1]."""
    x, y = _data(a), _data(b)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 3:
        x, y = x[..., None], y[..., None]
    x, y = (x + 1.0) / 2.0, (y + 1.0) / 2.0
    h, w = x.shape[:2]
    k = min(window_size, h, w)
    if k % 2 == 0:
        k -= 1
    if k < window_size:
        logging.warning("ssim: slice %dx%d smaller than %d window, using %d", h, w, window_size, k)
    vals = [
        structural_similarity(
            x[:, :, l, c],
            y[:, :, l, c],
            win_size=k,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            data_range=1.0,
            K1=SSIM_K1,
            K2=SSIM_K2,
        )
        for l in range(x.shape[2])
        for c in range(x.shape[3])
    ]
    return float(np.mean(vals))


# ---------- feature extractors ----------

def _random_stack(conv: type, in_channels: int, dim: int) -> nn.Sequential:
    return nn.Sequential(
        conv(in_channels, 16, 3, stride=2, padding=1),
        nn.LeakyReLU(0.2),
        conv(16, 32, 3, stride=2, padding=1),
        nn.LeakyReLU(0.2),
        conv(32, dim, 3, padding=1),
    )


class FeatureExtractor:
    """Volume (or slice) -> d-vector via conv stack + global average pooling.

    kind: ``fixed-seed-random`` (seeded init), ``external`` (weights file) or ``trained`` (given module).
    """

    def __init__(self, net: nn.Module, dim: int, kind: str, spatial_dims: int = 3):
        if dim < 2:
            raise DomainError(f"feature dimension must be >= 2, got {dim}")
        self.net = net.eval().requires_grad_(False)
        self.dim = dim
        self.kind = kind
        self.spatial_dims = spatial_dims

    @classmethod
    def random3d(cls, in_channels: int = 1, dim: int = 64, seed: int = 0) -> "FeatureExtractor":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = _random_stack(nn.Conv3d, in_channels, dim)
        return cls(net, dim, "fixed-seed-random", 3)

    @classmethod
    def random2d(cls, in_channels: int = 1, dim: int = 64, seed: int = 0) -> "FeatureExtractor":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = _random_stack(nn.Conv2d, in_channels, dim)
        return cls(net, dim, "fixed-seed-random", 2)

    @classmethod
    def external(cls, weights: str | Path, in_channels: int = 1, dim: int = 64) -> "FeatureExtractor":
        net = _random_stack(nn.Conv3d, in_channels, dim)
        state = torch.load(weights, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
        logging.info("feature extractor weights loaded from %s", weights)
        return cls(net, dim, "external", 3)

    def __call__(self, x: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            feats = self.net(x.float())
        return feats.flatten(2).mean(dim=2).double().numpy()

    def volume_features(self, volumes: Sequence[VolumeLike]) -> np.ndarray:
        """One row per volume (3D) or per depth slice (2D)."""
        rows = []
        for v in volumes:
            arr = torch.from_numpy(np.ascontiguousarray(_data(v), dtype=np.float32))
            x = arr.permute(3, 0, 1, 2)[None]
            if self.spatial_dims == 2:
                x = x[0].permute(3, 0, 1, 2)
            rows.append(self(x))
        return np.concatenate(rows, axis=0)


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    covariance: np.ndarray
    n: int

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "GaussianSummary":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise DomainError(f"need at least 2 feature rows, got shape {feats.shape}")
        cov = np.cov(feats, rowvar=False, ddof=1).reshape(feats.shape[1], feats.shape[1])
        return cls(mean=feats.mean(axis=0), covariance=(cov + cov.T) / 2.0, n=int(feats.shape[0]))


def extract_features(volumes: Sequence[VolumeLike], extractor: FeatureExtractor) -> GaussianSummary:
    if len(volumes) < 2:
        raise DomainError(f"need at least 2 volumes for a feature summary, got {len(volumes)}")
    return GaussianSummary.from_features(extractor.volume_features(volumes))


def _psd_sqrt(mat: np.ndarray, name: str) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2.0)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -PSD_TOL * scale:
        raise NumericError(f"{name} is not positive semi-definite (min eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(p: GaussianSummary, q: GaussianSummary) -> float:
    """||μp - μq||² + Tr(Σp + Σq - 2(Σp Σq)^½), with (Σp Σq)^½ traced via √Σp Σq √Σp."""
    if p.mean.shape != q.mean.shape:
        raise ShapeError(f"feature dimensions differ: {p.mean.shape} vs {q.mean.shape}")
    sqrt_p = _psd_sqrt(p.covariance, "Σp")
    _psd_sqrt(q.covariance, "Σq")
    m = sqrt_p @ q.covariance @ sqrt_p
    eig = np.linalg.eigvalsh((m + m.T) / 2.0)
    tr_sqrt = float(np.sqrt(np.clip(eig, 0.0, None)).sum())
    diff = p.mean - q.mean
    value = float(diff @ diff + np.trace(p.covariance) + np.trace(q.covariance) - 2.0 * tr_sqrt)
    if value < -PSD_TOL:
        logging.warning("frechet distance %.3g below zero, clamped", value)
    return max(0.0, value)


# ---------- label overlap ----------

@dataclass(frozen=True)
class DiceResult:
    per_class: Dict[int, float]
    mean: float


def dice(pred: Union[SemanticMap, np.ndarray], gt: Union[SemanticMap, np.ndarray], num_classes: Optional[int] = None) -> DiceResult:
    """Per-class Dice, 1.0 when a class is absent from both maps.

    ``mean`` averages over classes present in pred ∪ gt. The union is symmetric in
    (pred, gt), so dice(a, b).mean == dice(b, a).mean; absent classes would only pad
    the mean with 1.0.
    """
    if isinstance(pred, SemanticMap) and isinstance(gt, SemanticMap) and pred.num_classes != gt.num_classes:
        raise ShapeError(f"class counts differ: {pred.num_classes} vs {gt.num_classes}")
    p = pred.labels if isinstance(pred, SemanticMap) else np.asarray(pred)
    g = gt.labels if isinstance(gt, SemanticMap) else np.asarray(gt)
    if p.shape != g.shape:
        raise ShapeError(f"shape mismatch: {p.shape} vs {g.shape}")
    k = num_classes or (gt.num_classes if isinstance(gt, SemanticMap) else int(max(p.max(), g.max())) + 1)
    per_class: Dict[int, float] = {}
    present = []
    for c in range(k):
        pc, gc = p == c, g == c
        sp, sg = int(pc.sum()), int(gc.sum())
        if sp == 0 and sg == 0:
            per_class[c] = 1.0
            continue
        per_class[c] = 2.0 * int((pc & gc).sum()) / (sp + sg)
        present.append(c)
    mean = float(np.mean([per_class[c] for c in present])) if present else 1.0
    return DiceResult(per_class=per_class, mean=mean)


# ---------- set-level evaluation ----------

def noise_set(n: int, shape: Sequence[int], seed: int) -> List[Volume]:
    """Uniform [-1, 1] noise volumes, a floor reference for the distribution metrics."""
    rng = np.random.default_rng(seed)
    return [Volume(data=rng.uniform(-1.0, 1.0, size=tuple(shape)).astype(np.float32)) for _ in range(n)]


def paired_metrics(real: Sequence[VolumeLike], synth: Sequence[VolumeLike], peak: float = 2.0) -> Dict[str, float]:
    if len(real) != len(synth):
        raise ShapeError(f"paired metrics need equal set sizes, got {len(real)} and {len(synth)}")
    rows = [(*rmse_psnr(a, b, peak), ssim(a, b)) for a, b in zip(real, synth)]
    arr = np.asarray(rows, dtype=np.float64)
    return {"RMSE": float(arr[:, 0].mean()), "PSNR": float(arr[:, 1].mean()), "SSIM": float(arr[:, 2].mean())}


def evaluate_sets(
    real: Sequence[VolumeLike],
    sets: Dict[str, Sequence[VolumeLike]],
    extractor3d: FeatureExtractor,
    extractor2d: FeatureExtractor,
    peak: float = 2.0,
) -> pd.DataFrame:
    """Metric table of every candidate set against ``real`` (paired by position)."""
    real_3d = extract_features(real, extractor3d)
    real_2d = GaussianSummary.from_features(extractor2d.volume_features(real))
    rows = []
    for name, vols in sets.items():
        rows.append(("3D-FID", name, frechet_distance(real_3d, extract_features(vols, extractor3d))))
        rows.append(("FID", name, frechet_distance(real_2d, GaussianSummary.from_features(extractor2d.volume_features(vols)))))
        for metric, value in paired_metrics(real, vols, peak).items():
            rows.append((metric, name, value))
        logging.info("evaluated set %s (%d volumes)", name, len(vols))
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def write_summary(df: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df[SUMMARY_COLUMNS].to_csv(path, index=False)
    return path
