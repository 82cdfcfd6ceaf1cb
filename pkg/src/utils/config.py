from __future__ import annotations

import copy
import os
import re
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import yaml

from src.utils.errors import ConfigError, ConfigRangeError


_env_pattern = re.compile(r"\${([^}]+)}")


@dataclass(frozen=True)
class DataSettings:
    shape: Tuple[int, int, int] = (32, 32, 8)
    channels: int = 1
    num_classes: int = 3
    manifest: str = "data/toy/manifest.tsv"
    toy_dir: str = "data/toy"
    toy_train: int = 64
    toy_test: int = 16
    toy_unlabeled: int = 0
    spacing: Tuple[float, float, float] = (2.0, 2.0, 3.0)


@dataclass(frozen=True)
class CompressionSettings:
    t: int = 2
    n_z: int = 8
    K: int = 512
    base_channels: int = 16
    num_groups: int = 4
    alpha: float = 1.0
    disc_weight: float = 1.0
    disc_start: int = 0
    num_slices: int = 2
    disc_channels: int = 16
    feature_channels: Tuple[int, ...] = (8, 16)
    feature_seed: int = 1234
    lambda_max: float = 1.0e4


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 2000
    batch_size: int = 2
    log_every: int = 50
    checkpoint_every: int = 250


@dataclass(frozen=True)
class DiffusionSettings:
    T: int = 300
    s: float = 0.008


@dataclass(frozen=True)
class DenoiserSettings:
    channels: Tuple[int, ...] = (32, 64)
    num_groups: int = 8
    time_dim: int = 64
    map_channels: int = 32
    spade_hidden: int = 32
    spade_kernel: int = 3
    attention_levels: Tuple[int, ...] = (0, 1)


@dataclass(frozen=True)
class OptimizerSettings:
    lr: float = 3.0e-4
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass(frozen=True)
class SegmentationSettings:
    # foreground vs background; None inherits data.num_classes
    num_classes: Optional[int] = 2
    in_channels: int = 1
    kernel_size: int = 3
    base_channels: int = 16
    lr: float = 5.0e-5
    epochs: int = 10
    batch_size: int = 4
    patch_size: Tuple[int, int, int] = (32, 32, 8)


@dataclass(frozen=True)
class EvaluationSettings:
    peak: float = 2.0
    feature_dim: int = 64
    extractor_seed: int = 0
    extractor_weights: Optional[str] = None
    noise_seed: int = 99


@dataclass(frozen=True)
class SamplingSettings:
    snapshot_every: Optional[int] = None


@dataclass(frozen=True)
class PathSettings:
    out_dir: str = "runs/default"
    vqgan_ckpt: str = "runs/default/vqgan.ckpt"
    sdm_ckpt: str = "runs/default/sdm.ckpt"


@dataclass(frozen=True)
class RunConfig:
    data: DataSettings = field(default_factory=DataSettings)
    compression: CompressionSettings = field(default_factory=CompressionSettings)
    vqgan_train: TrainSettings = field(default_factory=TrainSettings)
    diffusion: DiffusionSettings = field(default_factory=DiffusionSettings)
    denoiser: DenoiserSettings = field(default_factory=DenoiserSettings)
    sdm_train: TrainSettings = field(
        default_factory=lambda: TrainSettings(steps=5000, log_every=100, checkpoint_every=500)
    )
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    segmentation: SegmentationSettings = field(default_factory=SegmentationSettings)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    sampling: SamplingSettings = field(default_factory=SamplingSettings)
    paths: PathSettings = field(default_factory=PathSettings)
    seed: int = 0

    @property
    def latent_shape(self) -> Tuple[int, int, int]:
        t = self.compression.t
        return tuple(s // t for s in self.data.shape)  # type: ignore[return-value]

    @property
    def seg_classes(self) -> int:
        return self.segmentation.num_classes or self.data.num_classes

    def to_dict(self) -> Dict[str, Any]:
        return _plain(asdict(self))

    def with_overrides(self, overrides: Iterable[str]) -> "RunConfig":
        return build_config(self.to_dict(), overrides)


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _sub_env(value: str) -> str:
    """Replace ${VAR} with environment variable if present."""
    def repl(match: re.Match[str]) -> str:
        key = match.group(1)
        return os.environ.get(key, match.group(0))

    return _env_pattern.sub(repl, value)


def load_yaml(path: str | Path) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        raw = f.read()
    try:
        data = yaml.safe_load(_sub_env(raw)) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config document {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config document {path} must be a mapping")
    return data


# --- merge / override ---

def _merge(base: Dict[str, Any], update: Dict[str, Any], prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {path}", (path,))
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigRangeError(f"{path}: expected a mapping, got {value!r}", (path,))
            _merge(base[key], value, prefix=f"{path}.")
        else:
            base[key] = value


def _apply_override(tree: Dict[str, Any], item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override must look like key=value: {item!r}")
    key, raw = item.split("=", 1)
    key = key.strip()
    parts = key.split(".")
    node: Dict[str, Any] = tree
    for part in parts[:-1]:
        nxt = node.get(part)
        if not isinstance(nxt, dict):
            raise ConfigError(f"unknown config key: {key}", (key,))
        node = nxt
    leaf = parts[-1]
    if leaf not in node or isinstance(node[leaf], dict):
        raise ConfigError(f"unknown config key: {key}", (key,))
    node[leaf] = yaml.safe_load(raw)


# --- typed construction ---

def _coerce(value: Any, hint: Any, path: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigRangeError(f"{path}: expected a list, got {value!r}", (path,))
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigRangeError(f"{path}: expected {len(args)} values, got {len(value)}", (path,))
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if hint is bool:
        if isinstance(value, bool):
            return value
        raise ConfigRangeError(f"{path}: expected true/false, got {value!r}", (path,))
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigRangeError(f"{path}: expected an integer, got {value!r}", (path,))
        return int(value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigRangeError(f"{path}: expected a number, got {value!r}", (path,))
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigRangeError(f"{path}: expected a string, got {value!r}", (path,))
        return value
    return value


def _build(cls: type, mapping: Dict[str, Any], prefix: str = "") -> Any:
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in fields(cls):
        path = f"{prefix}{f.name}"
        value = mapping[f.name]
        hint = hints[f.name]
        if is_dataclass(hint):
            kwargs[f.name] = _build(hint, value, prefix=f"{path}.")
        else:
            kwargs[f.name] = _coerce(value, hint, path)
    return cls(**kwargs)


def _require(cond: bool, message: str, *keys: str) -> None:
    if not cond:
        raise ConfigRangeError(message, tuple(keys))


def validate(cfg: RunConfig) -> RunConfig:
    d, c = cfg.data, cfg.compression
    _require(all(s >= 1 for s in d.shape), f"data.shape must be positive: {d.shape}", "data.shape")
    _require(d.channels >= 1, "data.channels must be >= 1", "data.channels")
    _require(d.num_classes >= 2, "data.num_classes must be >= 2", "data.num_classes")
    _require(all(s > 0 for s in d.spacing), "data.spacing must be positive", "data.spacing")
    _require(c.t >= 1, "compression.t must be >= 1", "compression.t")
    _require(
        all(s % c.t == 0 for s in d.shape),
        f"data.shape {d.shape} is not divisible by compression.t={c.t}",
        "data.shape",
        "compression.t",
    )
    _require(c.t & (c.t - 1) == 0, f"compression.t must be a power of two, got {c.t}", "compression.t")
    _require(c.K >= 2, "compression.K must be >= 2", "compression.K")
    _require(c.n_z >= 1, "compression.n_z must be >= 1", "compression.n_z")
    _require(
        c.base_channels % c.num_groups == 0,
        "compression.base_channels must be divisible by compression.num_groups",
        "compression.base_channels",
        "compression.num_groups",
    )
    _require(c.num_slices >= 1, "compression.num_slices must be >= 1", "compression.num_slices")
    _require(c.alpha >= 0 and c.disc_weight >= 0, "loss weights must be >= 0", "compression.alpha", "compression.disc_weight")
    _require(cfg.diffusion.T >= 1, "diffusion.T must be >= 1", "diffusion.T")
    _require(cfg.diffusion.s > 0, "diffusion.s must be > 0", "diffusion.s")
    dn = cfg.denoiser
    _require(len(dn.channels) >= 1 and all(ch > 0 for ch in dn.channels), "denoiser.channels must be positive", "denoiser.channels")
    _require(
        all(ch % dn.num_groups == 0 for ch in dn.channels),
        "every denoiser.channels entry must be divisible by denoiser.num_groups",
        "denoiser.channels",
        "denoiser.num_groups",
    )
    _require(dn.time_dim >= 2 and dn.time_dim % 2 == 0, "denoiser.time_dim must be even", "denoiser.time_dim")
    _require(dn.spade_kernel in (1, 3), "denoiser.spade_kernel must be 1 or 3", "denoiser.spade_kernel")
    _require(
        all(0 <= lv < len(dn.channels) for lv in dn.attention_levels),
        "denoiser.attention_levels out of range",
        "denoiser.attention_levels",
    )
    for name in ("vqgan_train", "sdm_train"):
        tr: TrainSettings = getattr(cfg, name)
        _require(tr.steps >= 0, f"{name}.steps must be >= 0", f"{name}.steps")
        _require(tr.batch_size >= 1, f"{name}.batch_size must be >= 1", f"{name}.batch_size")
        _require(tr.log_every >= 1, f"{name}.log_every must be >= 1", f"{name}.log_every")
        _require(tr.checkpoint_every >= 1, f"{name}.checkpoint_every must be >= 1", f"{name}.checkpoint_every")
    _require(cfg.optimizer.lr > 0, "optimizer.lr must be > 0", "optimizer.lr")
    _require(0 <= cfg.optimizer.beta1 < 1 and 0 <= cfg.optimizer.beta2 < 1, "optimizer betas must be in [0, 1)", "optimizer.beta1", "optimizer.beta2")
    seg = cfg.segmentation
    _require(seg.num_classes is None or seg.num_classes >= 2, "segmentation.num_classes must be >= 2", "segmentation.num_classes")
    _require(seg.epochs >= 1 and seg.batch_size >= 1, "segmentation epochs/batch_size must be >= 1", "segmentation.epochs", "segmentation.batch_size")
    _require(all(p >= 1 for p in seg.patch_size), "segmentation.patch_size must be positive", "segmentation.patch_size")
    _require(cfg.evaluation.peak > 0, "evaluation.peak must be > 0", "evaluation.peak")
    _require(cfg.evaluation.feature_dim >= 2, "evaluation.feature_dim must be >= 2", "evaluation.feature_dim")
    snap = cfg.sampling.snapshot_every
    _require(snap is None or snap >= 1, "sampling.snapshot_every must be >= 1", "sampling.snapshot_every")
    return cfg


def build_config(tree: Dict[str, Any], overrides: Iterable[str] = ()) -> RunConfig:
    merged = _plain(asdict(RunConfig()))
    _merge(merged, copy.deepcopy(tree))
    for item in overrides:
        _apply_override(merged, item)
    return validate(_build(RunConfig, merged))


def parse_config(path: Optional[str | Path] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults <- YAML file <- ``key=value`` overrides, validated."""
    tree: Dict[str, Any] = load_yaml(path) if path else {}
    return build_config(tree, overrides)


def dump_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
    return path


def override_list(values: Optional[List[str]]) -> List[str]:
    return [v for v in (values or []) if v.strip()]
