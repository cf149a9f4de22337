"""Run configuration: nested dataclasses, validation, presets and file I/O.

Configuration files are JSON or YAML key-value trees. Values are layered as
defaults < preset < file < command-line overrides; unknown keys are rejected.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    source: str = "synthetic"
    path: list[str] = field(default_factory=list)
    test_path: list[str] = field(default_factory=list)
    max_records: typing.Optional[int] = None
    num_classes: int = 4
    per_class: int = 1600
    test_per_class: int = 250
    side: int = 16
    channels: int = 3
    noise_sigma: float = 0.2


@dataclass
class StreamSection:
    stc: int = 500
    num_clients: int = 5
    segment_size: int = 128
    segments_per_round: typing.Optional[int] = None


@dataclass
class PolicySection:
    name: str = "is"
    lazy_interval: typing.Optional[int] = None
    weak_method: str = "hflip"
    rr_mode: str = "union"


@dataclass
class EncoderSection:
    kind: str = "smallconv"
    hidden: list[int] = field(default_factory=lambda: [16, 32])
    out_dim: int = 32
    predictor_hidden: int = 64


@dataclass
class AugmentSection:
    crop_pad: int = 4
    hflip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    grayscale_p: float = 0.1


@dataclass
class TrainingSection:
    lr: float = 0.06
    weight_decay: float = 0.0001
    ema_tau: float = 0.99
    rounds: int = 300
    symmetrize_loss: bool = False
    loss: str = "byol"
    temperature: float = 0.5
    precision: int = 64
    aggregation: str = "uniform"
    participation: float = 1.0


@dataclass
class ProbeSection:
    label_fractions: list[float] = field(default_factory=lambda: [0.01, 0.1, 1.0])
    epochs: int = 50
    lr: float = 0.01
    batch_size: int = 128
    momentum: float = 0.9
    eval_every: int = 0
    eval_fraction: float = 0.1


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    stream: StreamSection = field(default_factory=StreamSection)
    policy: PolicySection = field(default_factory=PolicySection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    seed: int = 0
    output_dir: str = "runs/default"
    jobs: int = 1
    checkpoint_every: int = 0
    log_scores: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> RunConfig:
        errors = []

        def need(cond, key, msg):
            if not cond:
                errors.append(f"{key}: {msg}")

        d, s, p, e, t, pr = self.dataset, self.stream, self.policy, self.encoder, self.training, self.probe
        need(d.source in ("synthetic", "cifar10"), "dataset.source", "must be 'synthetic' or 'cifar10'")
        if d.source == "cifar10":
            need(bool(d.path), "dataset.path", "cifar10 source needs at least one training batch file")
            need(bool(d.test_path), "dataset.test_path", "cifar10 source needs a test batch file")
        need(d.max_records is None or d.max_records >= 1, "dataset.max_records", "must be positive")
        for key in ("num_classes", "per_class", "test_per_class", "side", "channels"):
            need(getattr(d, key) >= 1, f"dataset.{key}", "must be >= 1")
        need(d.noise_sigma >= 0, "dataset.noise_sigma", "must be nonnegative")
        for key in ("stc", "num_clients", "segment_size"):
            need(getattr(s, key) >= 1, f"stream.{key}", "must be >= 1")
        need(s.segments_per_round is None or s.segments_per_round >= 0, "stream.segments_per_round",
             "must be nonnegative")
        need(p.name.lower() in ("is", "importance_scoring", "rr", "random_replacement", "fifo", "kcenter", "k_center"),
             "policy.name", "must be one of is, rr, fifo, kcenter")
        need(p.lazy_interval is None or p.lazy_interval >= 1, "policy.lazy_interval", "must be >= 1 or null")
        need(p.weak_method in ("hflip", "crop", "grayscale", "jitter"), "policy.weak_method",
             "must be hflip, crop, grayscale or jitter")
        need(p.rr_mode in ("union", "reservoir"), "policy.rr_mode", "must be union or reservoir")
        need(e.kind in ("mlp", "smallconv"), "encoder.kind", "must be mlp or smallconv")
        need(bool(e.hidden) and min(e.hidden) >= 1, "encoder.hidden", "widths must be positive")
        need(e.out_dim >= 2, "encoder.out_dim", "must be >= 2")
        need(e.predictor_hidden >= 1, "encoder.predictor_hidden", "must be >= 1")
        for key in ("hflip_p", "jitter_p", "grayscale_p", "brightness", "contrast", "saturation"):
            need(0.0 <= getattr(self.augment, key) <= 1.0, f"augment.{key}", "must lie in [0, 1]")
        need(self.augment.crop_pad >= 0, "augment.crop_pad", "must be nonnegative")
        need(t.lr >= 0, "training.lr", "must be nonnegative")
        need(t.weight_decay >= 0, "training.weight_decay", "must be nonnegative")
        need(0.0 <= t.ema_tau < 1.0, "training.ema_tau", "must lie in [0, 1)")
        need(t.rounds >= 0, "training.rounds", "must be nonnegative")
        need(t.loss in ("byol", "infonce"), "training.loss", "must be byol or infonce")
        need(t.temperature > 0, "training.temperature", "must be positive")
        need(t.precision in (32, 64), "training.precision", "must be 32 or 64")
        need(t.aggregation in ("uniform", "volume"), "training.aggregation", "must be uniform or volume")
        need(0.0 < t.participation <= 1.0, "training.participation", "must lie in (0, 1]")
        need(all(0.0 < f <= 1.0 for f in pr.label_fractions), "probe.label_fractions", "each must lie in (0, 1]")
        need(0.0 < pr.eval_fraction <= 1.0, "probe.eval_fraction", "must lie in (0, 1]")
        need(pr.epochs >= 0, "probe.epochs", "must be nonnegative")
        need(pr.lr > 0, "probe.lr", "must be positive")
        need(pr.batch_size >= 1, "probe.batch_size", "must be >= 1")
        need(pr.eval_every >= 0, "probe.eval_every", "must be nonnegative")
        need(self.jobs >= 1, "jobs", "must be >= 1")
        need(self.checkpoint_every >= 0, "checkpoint_every", "must be nonnegative")
        if errors:
            raise ConfigError("; ".join(errors))
        return self


PRESETS: dict[str, dict] = {
    "full": {},
    # Small enough for a laptop CPU: 16x16 synthetic images, a two-layer conv
    # encoder and 50 rounds. Without normalization layers the BYOL objective
    # collapses at this size, so training uses in-batch InfoNCE.
    "desk": {
        "dataset": {"source": "synthetic", "num_classes": 4, "per_class": 1600, "test_per_class": 250,
                    "side": 16, "noise_sigma": 1.0},
        "stream": {"stc": 100, "num_clients": 5, "segment_size": 64},
        "encoder": {"kind": "smallconv", "hidden": [16, 32], "out_dim": 32},
        "training": {"rounds": 50, "loss": "infonce", "lr": 0.5, "precision": 32},
    },
}


def _coerce(value, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(value, inner, key)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping, got {type(value).__name__}")
        return _build(tp, value, key)
    if origin is list:
        if isinstance(value, (str, bytes)) and args and args[0] is str:
            value = [value]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {type(value).__name__}")
        return [_coerce(v, args[0], f"{key}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported field type {tp!r}")


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{prefix}." if prefix else ""
        raise ConfigError(f"unknown key(s): {', '.join(where + u for u in unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{prefix}.{k}" if prefix else k) for k, v in data.items()}
    return cls(**kwargs)


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}).validate()


def read_tree(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if str(path).endswith(".json"):
        data = json.loads(text) if text.strip() else {}
    else:
        data = yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def parse_override(item: str) -> dict:
    """``a.b.c=value`` to a nested dict; the value is parsed as a YAML scalar or list."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    value = yaml.safe_load(raw) if raw.strip() else None
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def parse_config(path=None, overrides: list[dict] | None = None, preset: str | None = None) -> RunConfig:
    """Build a validated config from optional preset, file and override layers."""
    tree: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        tree = merge(tree, PRESETS[preset])
    if path is not None:
        tree = merge(tree, read_tree(path))
    for o in overrides or []:
        tree = merge(tree, o)
    return from_dict(tree)


def dump_config(cfg: RunConfig, path) -> None:
    data = cfg.to_dict()
    with open(path, "w", encoding="utf-8") as fh:
        if str(path).endswith(".json"):
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")
        else:
            yaml.safe_dump(data, fh, sort_keys=True)


def derive_seed(master: int, *parts) -> int:
    """Per-component seed: SHA-256 of the master seed and component path, truncated to 63 bits."""
    key = ":".join([str(int(master))] + [str(p) for p in parts]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") >> 1


def output_root() -> str:
    return os.environ.get("STREAMFCL_OUTPUT_ROOT", "")
