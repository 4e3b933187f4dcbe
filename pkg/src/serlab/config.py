"""Run configuration: flat dotted keys in a ``key = value`` text file.

Parsing is strict.  Unknown keys, malformed values and out-of-range values
are errors that cite the line number.  :func:`dump` writes every key, so a
run manifest can be parsed back into the identical configuration.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

from . import group as G
from .augment import AugConfig
from .losses import EquivLossConfig, InvLossConfig
from .model import ModelConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _scales(text: str) -> str:
    vals = G.parse_scales(text)
    if not vals:
        raise ValueError("scale set is empty")
    return ",".join(str(v) for v in vals)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {t!r}")
        return t
    return parse


# dotted key -> (field name, parser)
_KEYS: dict[str, tuple[str, Callable[[str], Any]]] = {
    "aug.crop_scale_min": ("crop_scale_min", float),
    "aug.crop_scale_max": ("crop_scale_max", float),
    "aug.aspect_min": ("aspect_min", float),
    "aug.aspect_max": ("aspect_max", float),
    "aug.hflip": ("aug_hflip", _bool),
    "aug.jitter": ("jitter", float),
    "aug.p_gray": ("p_gray", float),
    "aug.noise_sigma": ("noise_sigma", float),
    "geo.rot90": ("geo_rot90", _bool),
    "geo.hflip": ("geo_hflip", _bool),
    "geo.scales": ("geo_scales", _scales),
    "part.r": ("r", float),
    "loss.kind": ("loss_kind", _choice("contrastive", "redundancy")),
    "loss.tau_inv": ("tau_inv", float),
    "loss.tau_eq": ("tau_eq", float),
    "loss.lambda": ("lam", float),
    "loss.off_diag_weight": ("off_diag_weight", float),
    "loss.proj_dim": ("proj_dim", int),
    "loss.proj_hidden": ("proj_hidden", int),
    "loss.inv_dim": ("inv_dim", int),
    "loss.inv_hidden": ("inv_hidden", int),
    "loss.all_layers": ("all_layers", _bool),
    "loss.augself": ("augself", float),
    "loss.augself_layer": ("augself_layer", int),
    "loss.augself_hidden": ("augself_hidden", int),
    "model.image": ("image", int),
    "model.patch": ("patch", int),
    "model.channels": ("channels", int),
    "model.dim": ("dim", int),
    "model.depth": ("depth", int),
    "model.heads": ("heads", int),
    "model.mlp_ratio": ("mlp_ratio", int),
    "model.l_eq": ("l_eq", int),
    "model.l_cls": ("l_cls", int),
    "train.method": ("method", _choice("ser", "baseline")),
    "train.epochs": ("epochs", int),
    "train.batch_size": ("batch_size", int),
    "train.base_lr": ("base_lr", float),
    "train.weight_decay": ("weight_decay", float),
    "train.warmup_epochs": ("warmup_epochs", int),
    "train.seed": ("seed", int),
    "train.precision": ("precision", _choice("f32", "f64")),
    "train.ckpt_every": ("ckpt_every", int),
    "train.data": ("data", str),
    "data.n_images": ("n_images", int),
    "data.classes": ("n_classes", int),
    "data.seed": ("data_seed", int),
    "eval.probe_data": ("probe_data", str),
    "eval.probe_epochs": ("probe_epochs", int),
    "eval.knn_k": ("knn_k", int),
    "eval.equiv_samples": ("equiv_samples", int),
}

_FIELD_TO_KEY = {f: k for k, (f, _) in _KEYS.items()}

# resuming compares every key except these
RESUME_EXEMPT = ("train.ckpt_every",)


@dataclass(frozen=True)
class TrainConfig:
    crop_scale_min: float = 0.4
    crop_scale_max: float = 1.0
    aspect_min: float = 0.75
    aspect_max: float = 4 / 3
    aug_hflip: bool = True
    jitter: float = 0.2
    p_gray: float = 0.2
    noise_sigma: float = 0.02
    geo_rot90: bool = True
    geo_hflip: bool = True
    geo_scales: str = "3/4,1,5/4"
    r: float = 0.25
    loss_kind: str = "contrastive"
    tau_inv: float = 0.2
    tau_eq: float = 0.3
    lam: float = 0.5
    off_diag_weight: float = 0.0051
    proj_dim: int = 32
    proj_hidden: int = 128
    inv_dim: int = 32
    inv_hidden: int = 128
    all_layers: bool = False
    augself: float = 0.0
    augself_layer: int = -1
    augself_hidden: int = 64
    image: int = 32
    patch: int = 8
    channels: int = 3
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    l_eq: int = 1
    l_cls: int = 1
    method: str = "ser"
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 3
    seed: int = 0
    precision: str = "f32"
    ckpt_every: int = 0
    data: str = ""
    n_images: int = 2000
    n_classes: int = 5
    data_seed: int = 0
    probe_data: str = ""
    probe_epochs: int = 50
    knn_k: int = 0
    equiv_samples: int = 500

    # -- derived configs -------------------------------------------------

    @property
    def aug(self) -> AugConfig:
        return AugConfig(self.crop_scale_min, self.crop_scale_max, self.aspect_min, self.aspect_max,
                         self.aug_hflip, self.jitter, self.p_gray, self.noise_sigma, self.image)

    @property
    def geo(self) -> G.GeometricPolicy:
        return G.GeometricPolicy(self.geo_rot90, self.geo_hflip, G.parse_scales(self.geo_scales))

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.image, self.patch, self.channels, self.dim, self.depth, self.heads,
                           self.mlp_ratio, self.l_eq, self.l_cls)

    @property
    def equiv(self) -> EquivLossConfig:
        return EquivLossConfig(self.tau_eq, self.lam)

    @property
    def inv(self) -> InvLossConfig:
        return InvLossConfig(self.loss_kind, self.tau_inv, self.off_diag_weight)

    @property
    def dtype(self) -> str:
        return "float32" if self.precision == "f32" else "float64"

    def replace(self, **changes) -> "TrainConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def with_keys(self, values: dict[str, Any]) -> "TrainConfig":
        """Copy with dotted-key overrides (values already typed or as text)."""
        changes = {}
        for key, val in values.items():
            if key not in _KEYS:
                raise ConfigError(f"unknown key {key!r}")
            name, parser = _KEYS[key]
            changes[name] = parser(val) if isinstance(val, str) else val
        return self.replace(**changes)

    def validate(self) -> None:
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(f"{key}: {msg}")

        need(0 <= self.r <= 1, "part.r", f"value {self.r} outside [0,1]")
        need(0 < self.crop_scale_min <= self.crop_scale_max <= 1, "aug.crop_scale_min",
             "crop scale range must satisfy 0 < min <= max <= 1")
        need(0 < self.aspect_min <= self.aspect_max, "aug.aspect_min", "aspect range must be positive and ordered")
        need(0 <= self.jitter < 1, "aug.jitter", f"value {self.jitter} outside [0,1)")
        need(0 <= self.p_gray <= 1, "aug.p_gray", f"value {self.p_gray} outside [0,1]")
        need(self.noise_sigma >= 0, "aug.noise_sigma", "must be >= 0")
        need(self.tau_inv > 0, "loss.tau_inv", "must be > 0")
        need(self.tau_eq > 0, "loss.tau_eq", "must be > 0")
        need(self.lam >= 0, "loss.lambda", "must be >= 0")
        need(self.off_diag_weight >= 0, "loss.off_diag_weight", "must be >= 0")
        for key in ("loss.proj_dim", "loss.proj_hidden", "loss.inv_dim", "loss.inv_hidden", "loss.augself_hidden",
                    "model.image", "model.patch", "model.channels", "model.dim", "model.depth", "model.heads",
                    "model.mlp_ratio", "train.epochs", "train.batch_size", "data.n_images", "data.classes",
                    "eval.probe_epochs", "eval.equiv_samples"):
            v = getattr(self, _KEYS[key][0])
            need(v >= 1, key, f"must be >= 1, got {v}")
        need(self.augself >= 0, "loss.augself", "must be >= 0")
        need(-1 <= self.augself_layer <= self.depth, "loss.augself_layer", f"must lie in [-1, {self.depth}]")
        need(self.image % self.patch == 0, "model.image", f"image side {self.image} not divisible by patch {self.patch}")
        need(self.dim % self.heads == 0, "model.dim", f"dim {self.dim} not divisible by heads {self.heads}")
        need(0 <= self.l_eq <= self.depth, "model.l_eq", f"must lie in [0, {self.depth}]")
        need(0 <= self.l_cls < self.depth, "model.l_cls", f"must lie in [0, {self.depth - 1}]")
        need(self.base_lr > 0, "train.base_lr", "must be > 0")
        need(self.weight_decay >= 0, "train.weight_decay", "must be >= 0")
        need(0 <= self.warmup_epochs <= self.epochs, "train.warmup_epochs", "must lie in [0, train.epochs]")
        need(self.ckpt_every >= 0, "train.ckpt_every", "must be >= 0")
        need(self.knn_k >= 0, "eval.knn_k", "must be >= 0 (0 picks 20 or 5 by training-set size)")
        need(2 <= self.n_classes <= 5 or self.n_classes == 1, "data.classes", "must lie in [1, 5]")
        # the scale set must keep the training images on the patch grid
        grid = self.image // self.patch
        for s in G.parse_scales(self.geo_scales):
            need((s * grid).denominator == 1, "geo.scales",
                 f"scale {s} maps the {grid}x{grid} token grid to a non-integer size")

    # -- serialization ---------------------------------------------------

    def items(self) -> list[tuple[str, Any]]:
        return [(k, getattr(self, f)) for k, (f, _) in _KEYS.items()]


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, Fraction):
        return str(v)
    return str(v)


def dump(cfg: TrainConfig) -> str:
    lines = [f"{k} = {_fmt(v)}" for k, v in cfg.items()]
    return "\n".join(lines) + "\n"


def parse_text(text: str, path: str | None = None, base: TrainConfig | None = None) -> TrainConfig:
    changes: dict[str, Any] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, path)
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno, path)
        if key in lines:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", lineno, path)
        name, parser = _KEYS[key]
        try:
            changes[name] = parser(val)
        except (ValueError, ZeroDivisionError, G.GroupConfigError) as exc:
            raise ConfigError(f"malformed value for {key}: {exc}", lineno, path) from None
        lines[key] = lineno
    cfg = dataclasses.replace(base or TrainConfig(), **changes)
    try:
        cfg.validate()
    except ConfigError as exc:
        key = str(exc).split(":", 1)[0]
        if key in lines:
            raise ConfigError(str(exc), lines[key], path) from None
        raise
    return cfg


def parse_config(path) -> TrainConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path=str(p)) from None
    return parse_text(text, str(p))


def defaults_text() -> str:
    head = "# every key with its default value\n"
    return head + dump(TrainConfig())


def diff_keys(a: TrainConfig, b: TrainConfig, exempt=RESUME_EXEMPT) -> list[str]:
    return [k for (k, va), (_, vb) in zip(a.items(), b.items()) if va != vb and k not in exempt]


def field_names() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
