"""Volumes, semantic maps and their NIfTI-1 persistence.

Arrays follow the (H, W, L, C) layout on disk and in ``Volume``; torch tensors
use (C, H, W, L) so the depth (slice) axis is always the last one.
"""

from __future__ import annotations

import gzip
import io
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import nibabel as nib
import numpy as np
import torch
import torch.nn.functional as F

from src.utils.errors import (
    CorruptFileError,
    DegenerateInputError,
    GeometryError,
    InvalidLabelError,
    NiftiFormatError,
    NonFiniteError,
    ShapeError,
    UnsupportedDtypeError,
)


NIFTI_HEADER_SIZE = 348
NIFTI_SINGLE_MAGIC = b"n+1"
# NIfTI datatype codes accepted on read and write.
SUPPORTED_DTYPES = {2: np.dtype(np.uint8), 4: np.dtype(np.int16), 16: np.dtype(np.float32)}
LABEL_INTENT = "label"

Shape3 = Tuple[int, int, int]
Spacing = Tuple[float, float, float]


@dataclass
class Volume:
    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    intensity_range: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"volume must be rank 4 (H, W, L, C), got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ShapeError(f"volume dims must be >= 1, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteError(f"volume contains {int((~np.isfinite(self.data)).sum())} non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)  # type: ignore[assignment]
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ShapeError(f"spacing must be three positive values, got {self.spacing}")
        if self.intensity_range is None and self.data.size:
            self.intensity_range = (float(np.min(self.data)), float(np.max(self.data)))

    @property
    def shape(self) -> Shape3:
        return tuple(self.data.shape[:3])  # type: ignore[return-value]

    @property
    def channels(self) -> int:
        return int(self.data.shape[3])


@dataclass
class SemanticMap:
    labels: np.ndarray
    num_classes: int
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise ShapeError(f"semantic map must be rank 3 (H, W, L), got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise InvalidLabelError(f"labels must be integers, got dtype {self.labels.dtype}")
        if self.num_classes < 1:
            raise InvalidLabelError(f"num_classes must be positive, got {self.num_classes}")
        self.spacing = tuple(float(s) for s in self.spacing)  # type: ignore[assignment]
        check_labels(self.labels, self.num_classes)

    @property
    def shape(self) -> Shape3:
        return tuple(self.labels.shape)  # type: ignore[return-value]


@dataclass
class PairedSample:
    volume: Volume
    map: Optional[SemanticMap]
    id: str
    split: str = "train"

    def __post_init__(self):
        if self.map is not None and self.map.shape != self.volume.shape:
            raise ShapeError(
                f"sample {self.id}: map shape {self.map.shape} != volume shape {self.volume.shape}"
            )


def check_labels(labels: np.ndarray, num_classes: int) -> None:
    if labels.size == 0:
        return
    lo, hi = int(labels.min()), int(labels.max())
    if lo < 0 or hi >= num_classes:
        raise InvalidLabelError(f"labels must lie in [0, {num_classes}), found range [{lo}, {hi}]")


# --- NIfTI-1 ---

def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise CorruptFileError(f"{path}: truncated gzip stream") from exc
    return raw


def _parse_header(raw: bytes, path: Path) -> nib.Nifti1Header:
    if len(raw) < NIFTI_HEADER_SIZE:
        raise CorruptFileError(f"{path}: {len(raw)} bytes is shorter than a NIfTI-1 header")
    hdr = nib.Nifti1Header.from_fileobj(io.BytesIO(raw[:NIFTI_HEADER_SIZE]), check=False)
    if int(hdr["sizeof_hdr"]) != NIFTI_HEADER_SIZE:
        raise NiftiFormatError(f"{path}: sizeof_hdr is {int(hdr['sizeof_hdr'])}, expected 348")
    if hdr.endianness != "<":
        raise NiftiFormatError(f"{path}: only little-endian NIfTI-1 is supported")
    magic = bytes(hdr["magic"]).rstrip(b"\x00")
    if magic != NIFTI_SINGLE_MAGIC:
        raise NiftiFormatError(f"{path}: bad magic {magic!r}, expected single-file 'n+1'")
    code = int(hdr["datatype"])
    if code not in SUPPORTED_DTYPES:
        raise UnsupportedDtypeError(f"{path}: unsupported NIfTI datatype code {code}")
    return hdr


def load_nifti(path: Union[str, Path]) -> Union[Volume, SemanticMap]:
    """Read a single-file NIfTI-1 image.

    Files written with intent ``label`` come back as a SemanticMap, everything
    else as an un-normalized Volume with its intensity range recorded.
    """
    path = Path(path)
    raw = _read_bytes(path)
    hdr = _parse_header(raw, path)
    shape = hdr.get_data_shape()
    if len(shape) not in (3, 4):
        raise NiftiFormatError(f"{path}: expected 3 or 4 dimensions, got {shape}")
    itemsize = SUPPORTED_DTYPES[int(hdr["datatype"])].itemsize
    needed = int(hdr.get_data_offset()) + int(np.prod(shape)) * itemsize
    if len(raw) < needed:
        raise CorruptFileError(f"{path}: payload truncated ({len(raw)} of {needed} bytes)")

    img = nib.Nifti1Image.from_bytes(raw)
    data = np.asanyarray(img.dataobj)
    spacing = tuple(float(z) for z in hdr.get_zooms()[:3])

    if hdr.get_intent()[0] == LABEL_INTENT:
        if data.ndim == 4:
            data = data[..., 0]
        num_classes = _classes_from_descrip(hdr, data)
        return SemanticMap(labels=np.ascontiguousarray(data).astype(np.int64), num_classes=num_classes, spacing=spacing)

    if data.ndim == 3:
        data = data[..., np.newaxis]
    data = np.ascontiguousarray(data)
    return Volume(data=data, spacing=spacing, intensity_range=(float(data.min()), float(data.max())))


def _classes_from_descrip(hdr: nib.Nifti1Header, labels: np.ndarray) -> int:
    descrip = bytes(hdr["descrip"]).rstrip(b"\x00").decode("ascii", errors="ignore")
    for token in descrip.split():
        if token.startswith("num_classes="):
            try:
                return int(token.split("=", 1)[1])
            except ValueError:
                break
    return int(labels.max()) + 1 if labels.size else 1


def _affine(spacing: Spacing) -> np.ndarray:
    return np.diag([spacing[0], spacing[1], spacing[2], 1.0])


def save_nifti(obj: Union[Volume, SemanticMap], path: Union[str, Path]) -> None:
    """Write ``obj`` as single-file NIfTI-1, atomically (temp file then rename)."""
    path = Path(path)
    if isinstance(obj, SemanticMap):
        labels = obj.labels
        dtype = np.uint8 if obj.num_classes <= 256 else np.int16
        img = nib.Nifti1Image(labels.astype(dtype), _affine(obj.spacing))
        img.header.set_intent(LABEL_INTENT)
        img.header["descrip"] = f"num_classes={obj.num_classes}".encode("ascii")
    else:
        data = obj.data
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"refusing to write {path}: volume contains non-finite values")
        if data.dtype not in SUPPORTED_DTYPES.values():
            raise UnsupportedDtypeError(
                f"cannot write dtype {data.dtype}; supported: uint8, int16, float32"
            )
        img = nib.Nifti1Image(data, _affine(obj.spacing))
        img.header.set_data_dtype(data.dtype)
        img.header.set_zooms(tuple(obj.spacing) + (1.0,))
    img.header.set_xyzt_units("mm")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp.nii")
    try:
        nib.save(img, str(tmp))
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


# --- preprocessing ---

def _center_crop(arr: np.ndarray, target: Shape3) -> np.ndarray:
    slices = []
    for size, want in zip(arr.shape[:3], target):
        if size > want:
            start = (size - want) // 2
            slices.append(slice(start, start + want))
        else:
            slices.append(slice(None))
    return arr[tuple(slices)]


def _resample(arr: np.ndarray, target: Shape3, mode: str) -> np.ndarray:
    """Resample a (H, W, L, C) array to ``target`` spatial size."""
    if tuple(arr.shape[:3]) == tuple(target):
        return arr
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64)).permute(3, 0, 1, 2).unsqueeze(0)
    if mode == "trilinear":
        out = F.interpolate(t, size=tuple(target), mode="trilinear", align_corners=True)
    else:
        out = F.interpolate(t, size=tuple(target), mode="nearest")
    return out.squeeze(0).permute(1, 2, 3, 0).numpy()


def preprocess(volume: Volume, target_shape: Shape3) -> Volume:
    """Center-crop/resample to ``target_shape`` and min-max map intensities to [-1, 1]."""
    target = tuple(int(s) for s in target_shape)
    if len(target) != 3 or min(target) < 1:
        raise GeometryError(f"target shape must be three dims >= 1, got {target_shape}")
    data = volume.data
    lo, hi = float(np.min(data)), float(np.max(data))
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise NonFiniteError("volume contains non-finite values")
    if hi == lo:
        raise DegenerateInputError(f"constant-intensity volume (value {lo}) cannot be normalized")
    if volume.shape == target and lo >= -1.0 and hi <= 1.0:
        return volume

    arr = _center_crop(data.astype(np.float64), target)
    arr = _resample(arr, target, "trilinear")
    arr = 2.0 * (arr - lo) / (hi - lo) - 1.0
    arr = np.clip(arr, -1.0, 1.0).astype(np.float32)
    src_range = volume.intensity_range or (lo, hi)
    return Volume(data=arr, spacing=volume.spacing, intensity_range=src_range)


def preprocess_map(smap: SemanticMap, target_shape: Shape3) -> SemanticMap:
    target = tuple(int(s) for s in target_shape)
    if smap.shape == target:
        return smap
    arr = _center_crop(smap.labels[..., np.newaxis], target)
    arr = _resample(arr, target, "nearest")
    labels = np.rint(arr[..., 0]).astype(np.int64)
    return SemanticMap(labels=labels, num_classes=smap.num_classes, spacing=smap.spacing)


def one_hot(smap: SemanticMap) -> np.ndarray:
    """(H, W, L) labels -> (H, W, L, num_classes) indicator array."""
    check_labels(smap.labels, smap.num_classes)
    eye = np.eye(smap.num_classes, dtype=np.float32)
    return eye[smap.labels]


# --- tensor bridges ---

def volume_to_tensor(volume: Volume) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(volume.data, dtype=np.float32)).permute(3, 0, 1, 2).contiguous()


def tensor_to_volume(t: torch.Tensor, spacing: Spacing = (1.0, 1.0, 1.0)) -> Volume:
    if t.dim() != 4:
        raise ShapeError(f"expected a (C, H, W, L) tensor, got shape {tuple(t.shape)}")
    arr = t.detach().to("cpu", torch.float32).permute(1, 2, 3, 0).contiguous().numpy()
    return Volume(data=arr, spacing=spacing, intensity_range=(-1.0, 1.0))


def map_to_tensor(smap: SemanticMap) -> torch.Tensor:
    """One-hot (K, H, W, L) tensor for the semantic encoder."""
    return torch.from_numpy(one_hot(smap)).permute(3, 0, 1, 2).contiguous()


def describe(volume: Volume) -> str:
    lo, hi = volume.intensity_range or (float("nan"), float("nan"))
    return f"shape={volume.data.shape} spacing={volume.spacing} range=({lo:.4g}, {hi:.4g})"


def log_volume(name: str, volume: Volume) -> None:
    logging.info("%s %s", name, describe(volume))
