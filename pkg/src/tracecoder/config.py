"""Training configuration.

``TrainConfig()`` holds desk-scale defaults for the synthetic corpus;
``MIMIC_III_50`` holds the published full-scale hyper-parameters.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

from tracecoder.errors import ConfigError
from tracecoder.knowledge import SOURCES
from tracecoder.metrics import DEFAULT_GRID


@dataclass(frozen=True)
class TrainConfig:
    # published hyper-parameter keys
    max_length: int = 128
    epochs: int = 200
    batch_size: int = 8
    n_synonym: int = 4  # M, knowledge rows per code
    chunk_size: int = 32
    hidden_size: int = 128
    early_stopping: int = 50
    learning_rate: float = 1e-3
    warmup_steps: int = 50
    # desk-scale encoder
    layers: int = 2
    heads: int = 4
    ff_size: int = 256
    dropout: float = 0.1
    min_freq: int = 1
    # knowledge / attention / head
    sources: tuple[str, ...] = SOURCES
    lsa: bool = True
    lcca: bool = True
    kcca: bool = True
    kcca_literal: bool = False
    attention_dim: int | None = None
    train_label_matrix: bool = False
    head_channels: int = 64
    head_kernel: int = 3
    leaky_slope: float = 0.01
    # thresholds
    threshold_grid: tuple[float, ...] = DEFAULT_GRID
    per_label_threshold: bool = False
    train_threshold: float = 0.5
    # misc
    chunk_stride: int | None = None
    train_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("sources", "threshold_grid"):
            val = getattr(self, name)
            if isinstance(val, str):
                val = [v for v in val.split(",") if v]
            object.__setattr__(self, name, tuple(val))
        object.__setattr__(self, "threshold_grid", tuple(float(g) for g in self.threshold_grid))
        if self.early_stopping < 1:
            raise ConfigError("early_stopping (patience) must be >= 1")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.n_synonym < 1:
            raise ConfigError("epochs, batch_size and n_synonym must be >= 1")
        if self.max_length % self.chunk_size:
            raise ConfigError("max_length must be a multiple of chunk_size")
        if self.hidden_size % self.heads:
            raise ConfigError("hidden_size must be divisible by heads")
        if not (self.lsa or self.lcca or self.kcca):
            raise ConfigError("at least one of lsa/lcca/kcca must be enabled")
        bad = sorted(set(self.sources) - set(SOURCES))
        if bad or not self.sources:
            raise ConfigError(f"sources must be a non-empty subset of {SOURCES}, got {self.sources}")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction must be in (0, 1]")
        if not self.threshold_grid:
            raise ConfigError("threshold_grid must not be empty")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base: "TrainConfig | None" = None) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return replace(base or cls(), **dict(data))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sources"] = list(self.sources)
        d["threshold_grid"] = list(self.threshold_grid)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


MIMIC_III_50 = TrainConfig(
    max_length=5120, epochs=20, batch_size=8, n_synonym=8, chunk_size=512,
    hidden_size=1024, early_stopping=3, learning_rate=2e-5, warmup_steps=2000,
    heads=16, ff_size=4096,
)
MIMIC_FULL = replace(
    MIMIC_III_50, batch_size=4, n_synonym=4, hidden_size=768,
    learning_rate=5e-5, heads=12, ff_size=3072,
)
PRESETS = {"desk": TrainConfig(), "mimic-iii-50": MIMIC_III_50,
           "mimic-full": MIMIC_FULL}


def read_config_file(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a key/value mapping")
    return data


def load_config(path=None, overrides: Mapping[str, Any] | None = None,
                base: TrainConfig | None = None) -> TrainConfig:
    data = read_config_file(path) if path else {}
    data.update(overrides or {})
    return TrainConfig.from_dict(data, base)
