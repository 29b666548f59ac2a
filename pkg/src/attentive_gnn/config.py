"""Run configuration documents (JSON).

A run config has the top-level keys ``seed``, ``output_dir``, ``dataset``,
``attention``, ``train`` and ``analysis``. Only ``dataset.source`` is
required; every other key falls back to its documented default. Unknown
keys are rejected. ``RunConfig.to_dict`` emits the complete canonical form,
so a fully specified document round-trips unchanged.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .attention import AttentionConfig
from .episodes import (
    FeatureDataset,
    generate_synthetic,
    load_features_csv,
    split_classes,
)
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration document; the message names the offending key."""


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"
    path: Optional[str] = None
    test_path: Optional[str] = None
    classes: int = 40
    per_class: int = 30
    d: int = 16
    between_sigma: float = 5.0
    within_sigma: float = 1.0
    data_seed: int = 7
    test_classes: int = 20

    def __post_init__(self):
        if self.source not in ("synthetic", "csv"):
            raise ConfigError(f"dataset.source must be 'synthetic' or 'csv', got {self.source!r}")
        if self.source == "csv" and not self.path:
            raise ConfigError("dataset.path is required when dataset.source is 'csv'")
        for key in ("classes", "per_class", "d"):
            if getattr(self, key) < 1:
                raise ConfigError(f"dataset.{key} must be >= 1, got {getattr(self, key)}")
        for key in ("between_sigma", "within_sigma"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"dataset.{key} must be > 0, got {getattr(self, key)}")
        if self.test_classes < 0:
            raise ConfigError(f"dataset.test_classes must be >= 0, got {self.test_classes}")

    def generate(self) -> FeatureDataset:
        return generate_synthetic(self.classes, self.per_class, self.d, self.between_sigma,
                                  self.within_sigma, self.data_seed)

    def load(self) -> tuple[FeatureDataset, FeatureDataset]:
        """Return ``(train, eval)`` splits; eval is train when nothing is held out."""
        full = self.generate() if self.source == "synthetic" else load_features_csv(self.path)
        if self.test_path:
            return full, load_features_csv(self.test_path, split="test")
        if self.test_classes:
            return split_classes(full, self.test_classes)
        return full, full


@dataclass(frozen=True)
class AnalysisConfig:
    epsilon: float = 1e-2
    rank: Optional[int] = None
    tasks: int = 20
    betas: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    export_features: bool = False

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not self.epsilon > 0:
            raise ConfigError(f"analysis.epsilon must be > 0, got {self.epsilon}")
        if self.rank is not None and self.rank < 1:
            raise ConfigError(f"analysis.rank must be >= 1, got {self.rank}")
        if self.tasks < 1:
            raise ConfigError(f"analysis.tasks must be >= 1, got {self.tasks}")
        if not self.betas or any(not 0.0 < b <= 1.0 for b in self.betas):
            raise ConfigError(f"analysis.betas must be non-empty values in (0, 1], got {list(self.betas)}")


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        tr = self.train.to_dict()
        tr.pop("seed")
        an = asdict(self.analysis)
        an["betas"] = list(self.analysis.betas)
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset": asdict(self.dataset),
            "attention": self.attention.to_dict(),
            "train": tr,
            "analysis": an,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_seed(self, seed: int) -> "RunConfig":
        return parse_config({**self.to_dict(), "seed": seed})


_TOP_KEYS = {"seed", "output_dir", "dataset", "attention", "train", "analysis"}


def _section(doc: dict, name: str, cls, exclude=()) -> dict:
    sub = doc.get(name, {})
    if not isinstance(sub, dict):
        raise ConfigError(f"{name} must be an object")
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(sub) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(f'{name}.{k}' for k in unknown)}")
    return dict(sub)


def _build(name: str, cls, kwargs: dict):
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "dataset" not in doc or "source" not in doc.get("dataset", {}):
        raise ConfigError("missing required key dataset.source")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    output_dir = doc.get("output_dir", "runs/default")
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir must be a string")
    dataset = _build("dataset", DatasetConfig, _section(doc, "dataset", DatasetConfig))
    attention = _build("attention", AttentionConfig, _section(doc, "attention", AttentionConfig))
    train_kw = _section(doc, "train", TrainConfig, exclude=("seed",))
    train = _build("train", TrainConfig, {**train_kw, "seed": seed})
    analysis = _build("analysis", AnalysisConfig, _section(doc, "analysis", AnalysisConfig))
    return RunConfig(dataset, attention, train, analysis, seed, output_dir)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc)


def merge(base: dict, overrides: dict) -> dict:
    """Recursive dict update used to apply sweep-variant overrides."""
    out = dict(base)
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def load_sweep(path) -> tuple[dict, dict]:
    """Read a sweep file ``{"base": <run config>, "variants": {name: overrides}}``."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"sweep file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or set(doc) - {"base", "variants"} or "variants" not in doc:
        raise ConfigError("sweep file needs exactly the keys 'base' and 'variants'")
    variants = doc["variants"]
    if not isinstance(variants, dict) or not variants:
        raise ConfigError("variants must be a non-empty object")
    base = doc.get("base", {})
    resolved = {name: parse_config(merge(base, ov)) for name, ov in variants.items()}
    return base, resolved
