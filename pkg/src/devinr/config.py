"""Flat ``key = value`` run configuration with namespaced keys.

Lines are ``namespace.key = value``; ``#`` starts a comment. Unknown keys are
rejected and every key has a default, so an empty file is a valid config.
Tuples are written comma-separated (``phantom.shape = 64,64``).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    default: Any
    kind: str  # int, float, bool, str, opt_float, ints, floats
    doc: str


KEYS: dict[str, Key] = {
    # paths
    "data.dir": Key("data", "str", "dataset directory holding train/val/test manifests"),
    "data.out": Key("out", "str", "output directory"),
    "data.checkpoint": Key("", "str", "checkpoint to read (predict/eval/atlas) or resume from (train)"),
    # phantom dataset
    "phantom.n_train_single": Key(72, "int", "training subjects with one scan"),
    "phantom.n_train_multi": Key(8, "int", "training subjects with two scans"),
    "phantom.n_val": Key(4, "int", "validation subjects (two scans)"),
    "phantom.n_test": Key(16, "int", "test subjects (two scans)"),
    "phantom.shape": Key((64, 64), "ints", "image shape, 2 or 3 axes"),
    "phantom.spacing": Key((0.3, 0.3), "floats", "voxel size in cm per axis"),
    "phantom.seed": Key(0, "int", "master seed of the dataset"),
    "phantom.hc_slope": Key(1.090, "float", "synthetic HC = slope * circumference + intercept + noise"),
    "phantom.hc_intercept": Key(1.758, "float", "cm"),
    "phantom.hc_noise_sd": Key(0.3, "float", "cm"),
    "phantom.min_gap_weeks": Key(4.0, "float", "minimum PMA gap between the scans of one subject"),
    # network
    "net.latent_dim": Key(128, "int", "latent dimension"),
    "net.hidden_dim": Key(128, "int", "hidden width"),
    "net.n_layers": Key(8, "int", "number of WIRE layers"),
    "net.omega0": Key(10.0, "float", "WIRE frequency scale"),
    "net.s0": Key(10.0, "float", "WIRE Gaussian width scale"),
    "net.seed": Key(0, "int", "initialization seed"),
    # training
    "train.steps": Key(200_000, "int", "total iterations (one scan each)"),
    "train.lr": Key(1e-4, "float", "network learning rate"),
    "train.latent_lr": Key(None, "opt_float", "latent learning rate; empty means train.lr"),
    "train.weight_decay": Key(1e-2, "float", "decoupled weight decay"),
    "train.decay_latents": Key(False, "bool", "apply weight decay to latent vectors"),
    "train.pixel_fraction": Key(0.05, "float", "fraction of voxels sampled per iteration"),
    "train.fg_bg_ratio": Key(0.9, "float", "foreground share of the sampled voxels"),
    "train.sgla_p": Key(0.10, "float", "probability of substituting the global latent"),
    "train.ssl": Key(True, "bool", "share one latent across the scans of a subject"),
    "train.sgla": Key(True, "bool", "stochastic global latent augmentation"),
    "train.seed": Key(0, "int", "seed of the training streams"),
    "train.micro_batch_size": Key(0, "int", "split each batch into chunks of this size (0: off)"),
    "train.checkpoint_every": Key(0, "int", "also write a checkpoint every n iterations (0: only at the end)"),
    # inversion
    "invert.steps": Key(2000, "int", "latent optimization steps"),
    "invert.lr": Key(1e-3, "float", "latent learning rate"),
    "invert.pixel_policy": Key("all", "str", "'all' voxels every step or 'sampled' like training"),
    "invert.pixel_fraction": Key(0.05, "float", "voxel fraction for the sampled policy"),
    "invert.fg_bg_ratio": Key(0.9, "float", "foreground share for the sampled policy"),
    "invert.micro_batch_size": Key(4096, "int", "voxels per forward/backward chunk"),
    "invert.seed": Key(0, "int", "seed of the sampled policy"),
    # evaluation
    "eval.threshold": Key(0.05, "float", "foreground threshold on predicted images"),
    "eval.smoothing": Key(0.9, "float", "outline smoothing (voxels) for circumference measurement"),
    "eval.bc_method": Key("contour", "str", "contour, centers or ellipse"),
    "eval.save_volumes": Key(False, "bool", "write predicted volumes during eval"),
    # experiment runners
    "psweep.values": Key((0.0, 0.05, 0.10, 0.15, 0.20, 0.25), "floats", "SGLA probabilities to train"),
    "atlas.n_points": Key(20, "int", "PMA samples on each growth curve"),
}


def _parse_value(key: str, spec: Key, text: str):
    text = text.strip()
    try:
        if spec.kind == "int":
            return int(text)
        if spec.kind == "float":
            return float(text)
        if spec.kind == "opt_float":
            return None if text in ("", "none", "None") else float(text)
        if spec.kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on", "y"):
                return True
            if low in ("0", "false", "no", "off", "n"):
                return False
            raise ValueError(text)
        if spec.kind == "str":
            return text
        if spec.kind == "ints":
            return tuple(int(v) for v in text.replace("x", ",").split(",") if v.strip())
        if spec.kind == "floats":
            return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {spec.kind}") from exc
    raise AssertionError(spec.kind)


def _format_value(spec: Key, value) -> str:
    if spec.kind == "bool":
        return "true" if value else "false"
    if spec.kind == "opt_float":
        return "" if value is None else repr(float(value))
    if spec.kind == "float":
        return repr(float(value))
    if spec.kind in ("ints", "floats"):
        return ",".join(repr(v) for v in value)
    return str(value)


class RunConfig:
    """Typed view over the key table; ``cfg["train.lr"]``."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values = {k: spec.default for k, spec in KEYS.items()}
        for k, v in (values or {}).items():
            self[k] = v

    def __getitem__(self, key: str):
        return self.values[key]

    def __setitem__(self, key: str, value):
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str) and KEYS[key].kind != "str":
            value = _parse_value(key, KEYS[key], value)
        self.values[key] = value

    def copy(self) -> "RunConfig":
        return RunConfig(dict(self.values))

    def update_from_text(self, text: str, source: str = "<config>") -> "RunConfig":
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in KEYS:
                raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
            self.values[key] = _parse_value(key, KEYS[key], value)
        self.validate()
        return self

    def validate(self) -> None:
        shape, spacing = self["phantom.shape"], self["phantom.spacing"]
        if len(shape) not in (2, 3) or len(spacing) != len(shape):
            raise ConfigError("phantom.shape and phantom.spacing must both have 2 or 3 entries")
        if self["invert.pixel_policy"] not in ("all", "sampled"):
            raise ConfigError("invert.pixel_policy must be 'all' or 'sampled'")
        if self["eval.bc_method"] not in ("contour", "centers", "ellipse"):
            raise ConfigError("eval.bc_method must be contour, centers or ellipse")
        if not 0 <= self["train.sgla_p"] <= 1:
            raise ConfigError("train.sgla_p must lie in [0, 1]")
        if not 0 < self["train.pixel_fraction"] <= 1:
            raise ConfigError("train.pixel_fraction must lie in (0, 1]")

    def dump(self) -> str:
        return "".join(f"{k} = {_format_value(KEYS[k], self.values[k])}\n" for k in KEYS)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    return RunConfig().update_from_text(text, source)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
