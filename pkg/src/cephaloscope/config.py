"""Run configuration: one YAML file mapping every tunable, plus dotted overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, replace
from pathlib import Path

import yaml

from .backbone import BackboneConfig, ConfigError, Head, efficient_nano, efficientnet_b0, scale_config
from .data import SplitSpec, SyntheticSpec
from .pipeline import RetestPolicy, TrainConfig

PRESETS = {"nano": efficient_nano, "b0": efficientnet_b0}


def _defaults() -> dict:
    synth = asdict(SyntheticSpec())
    synth.pop("seed")
    train = asdict(TrainConfig())
    train.pop("seed")
    return {
        "seed": 0,
        "run_root": "runs",
        "synth": synth,
        "split": {"ratios": list(SplitSpec().ratios)},
        "backbone": {
            "preset": "nano",
            "phi": 0.0,
            "alpha_d": 1.2,
            "beta_w": 1.1,
            "gamma_r": 1.15,
            "head": Head.AGE_ONLY.value,
            "input_channels": 2,
            "se_ratio": 4,
        },
        "train": train,
        "retest": asdict(RetestPolicy()),
        "eval": {"ablation": None, "region_offset": 100},
        "saliency": {"mean_per_age": False, "batch_size": 32},
    }


DEFAULTS = json.loads(json.dumps(_defaults()))  # plain lists, as YAML would give


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        elif isinstance(base[key], float) and isinstance(value, (int, str)) and not isinstance(value, bool):
            # YAML 1.1 reads "1e-3" as a string
            try:
                out[key] = float(value)
            except ValueError as exc:
                raise ConfigError(f"{where!r} must be a number, got {value!r}") from exc
        else:
            out[key] = value
    return out


def parse_override(text: str) -> dict:
    """``train.initial_lr=1e-3`` -> {"train": {"initial_lr": 0.001}} (value parsed as YAML)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    dotted, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
    out: dict = {}
    node = out
    keys = dotted.strip().split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
    return out


class RunConfig:
    """Resolved configuration tree with typed accessors for each module."""

    def __init__(self, tree: dict):
        self.tree = _merge(DEFAULTS, tree)
        # build everything once so bad values fail at load time
        self.synth_spec()
        self.split_spec()
        self.backbone_config()
        self.train_config()
        self.retest_policy()

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        tree: dict = {}
        if path is not None:
            try:
                loaded = yaml.safe_load(Path(path).read_text())
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
            if loaded is not None and not isinstance(loaded, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            tree = loaded or {}
        for text in overrides:
            tree = _merge_loose(tree, parse_override(text))
        return cls(tree)

    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    def section(self, name: str) -> dict:
        return self.tree[name]

    def _build(self, cls, values: dict):
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(f"{cls.__name__}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"{cls.__name__}: {exc}") from exc

    def synth_spec(self) -> SyntheticSpec:
        s = dict(self.tree["synth"])
        s["ages"] = tuple(s["ages"])
        s["texture_cycles"] = tuple(s["texture_cycles"])
        return self._build(SyntheticSpec, dict(s, seed=self.seed))

    def split_spec(self) -> SplitSpec:
        return self._build(SplitSpec, {"ratios": tuple(self.tree["split"]["ratios"]), "seed": self.seed})

    def train_config(self) -> TrainConfig:
        return self._build(TrainConfig, dict(self.tree["train"], seed=self.seed))

    def retest_policy(self) -> RetestPolicy:
        return self._build(RetestPolicy, self.tree["retest"])

    def backbone_config(self) -> BackboneConfig:
        b = self.tree["backbone"]
        if b["preset"] not in PRESETS:
            raise ConfigError(f"backbone.preset must be one of {sorted(PRESETS)}, got {b['preset']!r}")
        try:
            base = PRESETS[b["preset"]](b["head"], int(b["input_channels"]))
            base = replace(base, **{k: b[k] for k in ("alpha_d", "beta_w", "gamma_r", "se_ratio")})
            return scale_config(base, float(b["phi"])) if b["phi"] else base
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"backbone: {exc}") from exc

    def canonical(self) -> str:
        return json.dumps(self.tree, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:8]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=True)


def _merge_loose(base: dict, update: dict) -> dict:
    """Merge without key validation (validation happens against the defaults later)."""
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge_loose(out[k], v)
        else:
            out[k] = v
    return out
