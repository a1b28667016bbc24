"""Run configuration: one flat, documented key set shared by all commands.

A config file is a JSON object using any subset of the keys below; unknown
keys are rejected so typos fail loudly instead of silently training with a
default. Every command echoes the effective config into its output
directory, so a run can be reproduced from its artifacts alone.

Keys and defaults:

  model     emb_size 64, hidden_size 64, n_layers 3, head_hidden 50,
            tie_last true, dtype "f32",
            p_emb 0.05, p_input 0.3, p_hidden 0.3, p_weight 0.5, p_head 0.1
  corpus    min_freq 1, max_len null, keep_tail false,
            train_ratio 0.70, valid_ratio 0.15, test_ratio 0.15
  training  batch_size 16, bptt 70, epochs 10, max_lr 0.03,
            lr_lo 0.0044, lr_hi 0.04, weight_decay 0.0,
            epochs_per_stage 1, warmup_frac 0.3
  misc      seed 0
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Dropouts


class ConfigError(ValueError):
    pass


_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class RunConfig:
    emb_size: int = 64
    hidden_size: int = 64
    n_layers: int = 3
    head_hidden: int = 50
    tie_last: bool = True
    dtype: str = "f32"
    p_emb: float = 0.05
    p_input: float = 0.3
    p_hidden: float = 0.3
    p_weight: float = 0.5
    p_head: float = 0.1

    min_freq: int = 1
    max_len: int | None = None
    keep_tail: bool = False
    train_ratio: float = 0.70
    valid_ratio: float = 0.15
    test_ratio: float = 0.15

    batch_size: int = 16
    bptt: int = 70
    epochs: int = 10
    max_lr: float = 0.03
    lr_lo: float = 0.0044
    lr_hi: float = 0.04
    weight_decay: float = 0.0
    epochs_per_stage: int = 1
    warmup_frac: float = 0.3

    seed: int = 0

    def __post_init__(self):
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")
        for key in ("emb_size", "hidden_size", "n_layers", "head_hidden",
                    "min_freq", "batch_size", "bptt", "epochs_per_stage"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.max_len is not None and self.max_len < 1:
            raise ConfigError("max_len must be >= 1 or null")

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "RunConfig":
        """Defaults, updated by the JSON file, updated by overrides."""
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        raw.update(overrides)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    def replaced(self, **overrides) -> "RunConfig":
        """New config with non-None overrides applied (for CLI flags)."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **changes) if changes else self

    def dropouts(self) -> Dropouts:
        return Dropouts(self.p_emb, self.p_input, self.p_hidden,
                        self.p_weight, self.p_head)

    def ratios(self) -> tuple[float, float, float]:
        return (self.train_ratio, self.valid_ratio, self.test_ratio)

    def np_dtype(self):
        return _DTYPES[self.dtype]

    def write(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / "config.json"
        path.write_text(
            json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        return path
