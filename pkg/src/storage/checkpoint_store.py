"""Checkpoint container: one zip archive per training phase.

Layout:
    manifest.json          version, phase, step, seed, config, meta, and per-array shape + sha256
    arrays/<name>.f32      raw little-endian float32 bytes, named by parameter path

Writes go to a temp file first and are moved into place with ``os.replace``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import zipfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch
import torch.nn as nn

from src.utils.errors import CheckpointCorruptError, CheckpointVersionError


FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
ARRAY_DIR = "arrays"
ARRAY_DTYPE = np.dtype("<f4")
# fixed member timestamp keeps archives byte-identical across runs
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)

PHASES = ("vqgan", "sdm")


@dataclass
class CheckpointBundle:
    phase: str
    step: int
    seed: int
    config: Dict[str, Any]
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown checkpoint phase {self.phase!r}")

    def subset(self, prefix: str) -> Dict[str, np.ndarray]:
        head = f"{prefix}/"
        return {k[len(head):]: v for k, v in self.arrays.items() if k.startswith(head)}


# ---------- module / optimizer state ----------

def module_arrays(module: nn.Module, prefix: str) -> Dict[str, np.ndarray]:
    return {
        f"{prefix}/{name}": t.detach().cpu().to(torch.float32).numpy().copy()
        for name, t in module.state_dict().items()
    }


def load_module_arrays(module: nn.Module, bundle: CheckpointBundle, prefix: str) -> None:
    arrays = bundle.subset(prefix)
    current = module.state_dict()
    missing = sorted(set(current) - set(arrays))
    if missing:
        raise CheckpointCorruptError(f"checkpoint lacks {prefix} arrays: {missing[:5]}")
    state = {}
    for name, ref in current.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointCorruptError(f"{prefix}/{name}: shape {arr.shape} != expected {tuple(ref.shape)}")
        state[name] = torch.from_numpy(arr.copy()).to(dtype=ref.dtype)
    module.load_state_dict(state)


def optimizer_state(optimizer: torch.optim.Optimizer, prefix: str) -> tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Split an optimizer state_dict into arrays (moments) and JSON scalars."""
    sd = optimizer.state_dict()
    arrays: Dict[str, np.ndarray] = {}
    scalars: Dict[str, Dict[str, float]] = {}
    for pid, pstate in sd["state"].items():
        for key, value in pstate.items():
            if isinstance(value, torch.Tensor) and value.ndim > 0:
                arrays[f"{prefix}/state/{pid}/{key}"] = value.detach().cpu().to(torch.float32).numpy().copy()
            else:
                scalars.setdefault(str(pid), {})[key] = float(value)
    groups = json.loads(json.dumps(sd["param_groups"], default=list))
    return arrays, {"scalars": scalars, "param_groups": groups}


def load_optimizer_state(
    optimizer: torch.optim.Optimizer,
    bundle: CheckpointBundle,
    prefix: str,
    meta_key: str,
) -> None:
    info = bundle.meta.get(meta_key)
    if info is None:
        raise CheckpointCorruptError(f"checkpoint has no optimizer record {meta_key!r}")
    arrays = bundle.subset(prefix)
    state: Dict[int, Dict[str, Any]] = {}
    for name, arr in arrays.items():
        _, pid, key = name.split("/", 2)
        state.setdefault(int(pid), {})[key] = torch.from_numpy(arr.copy())
    for pid, scal in info["scalars"].items():
        for key, value in scal.items():
            state.setdefault(int(pid), {})[key] = torch.tensor(value, dtype=torch.float32)
    groups = info["param_groups"]
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    optimizer.load_state_dict({"state": state, "param_groups": groups})


# ---------- archive I/O ----------

def _digest(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    return info


def save_checkpoint(bundle: CheckpointBundle, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = {}
    payloads = {}
    for name in sorted(bundle.arrays):
        arr = np.ascontiguousarray(bundle.arrays[name], dtype=ARRAY_DTYPE)
        raw = arr.tobytes()
        index[name] = {"shape": list(arr.shape), "dtype": ARRAY_DTYPE.str, "sha256": _digest(raw)}
        payloads[name] = raw
    manifest = {
        "version": bundle.version,
        "phase": bundle.phase,
        "step": int(bundle.step),
        "seed": int(bundle.seed),
        "config": bundle.config,
        "meta": bundle.meta,
        "arrays": index,
    }
    tmp = path.with_name(f".{path.name}.tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_member(MANIFEST_NAME), json.dumps(manifest, sort_keys=True, indent=1))
        for name, raw in payloads.items():
            zf.writestr(_member(f"{ARRAY_DIR}/{name}.f32"), raw)
    os.replace(tmp, path)
    logging.info("checkpoint saved: %s (phase=%s step=%d arrays=%d)", path, bundle.phase, bundle.step, len(index))
    return path


def load_checkpoint(path: str | Path, expected_phase: Optional[str] = None) -> CheckpointBundle:
    path = Path(path)
    if not path.exists():
        raise CheckpointCorruptError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path, "r") as zf:
            try:
                manifest = json.loads(zf.read(MANIFEST_NAME).decode("utf-8"))
            except KeyError as exc:
                raise CheckpointCorruptError(f"{path}: missing {MANIFEST_NAME}") from exc
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise CheckpointCorruptError(f"{path}: unreadable {MANIFEST_NAME}") from exc

            version = manifest.get("version")
            if version != FORMAT_VERSION:
                raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")

            arrays: Dict[str, np.ndarray] = {}
            for name, spec in manifest.get("arrays", {}).items():
                try:
                    raw = zf.read(f"{ARRAY_DIR}/{name}.f32")
                except KeyError as exc:
                    raise CheckpointCorruptError(f"{path}: missing array {name}") from exc
                if _digest(raw) != spec["sha256"]:
                    raise CheckpointCorruptError(f"{path}: digest mismatch for {name}")
                shape = tuple(int(s) for s in spec["shape"])
                if len(raw) != int(np.prod(shape, dtype=np.int64)) * ARRAY_DTYPE.itemsize:
                    raise CheckpointCorruptError(f"{path}: size mismatch for {name}")
                arrays[name] = np.frombuffer(raw, dtype=ARRAY_DTYPE).reshape(shape).copy()
    except (zipfile.BadZipFile, EOFError, OSError, zlib.error) as exc:
        raise CheckpointCorruptError(f"{path}: damaged archive ({exc})") from exc

    phase = manifest.get("phase")
    if phase not in PHASES:
        raise CheckpointCorruptError(f"{path}: unknown phase {phase!r}")
    if expected_phase is not None and phase != expected_phase:
        raise CheckpointCorruptError(f"{path}: expected a {expected_phase} checkpoint, found {phase!r}")
    return CheckpointBundle(
        phase=phase,
        step=int(manifest.get("step", 0)),
        seed=int(manifest.get("seed", 0)),
        config=manifest.get("config", {}),
        arrays=arrays,
        meta=manifest.get("meta", {}),
        version=version,
    )


def checkpoint_roundtrip(bundle: CheckpointBundle, path: str | Path) -> CheckpointBundle:
    save_checkpoint(bundle, path)
    return load_checkpoint(path, expected_phase=bundle.phase)
