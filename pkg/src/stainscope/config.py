"""Run configuration: every tunable of the pipeline as one flat document.

Precedence is defaults < JSON config file < explicit CLI overrides; unknown
keys are rejected rather than ignored so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .ae.train import TrainConfig
from .detector import BrownBand
from .errors import ConfigError


@dataclass(frozen=True)
class RunConfig:
    # hue band and score smoothing
    band_lo: float = -20.0
    band_hi: float = 20.0
    sat_min: float = 0.0
    val_min: float = 0.0
    epsilon: float = 1.0
    # patch extraction
    stride: int = 128
    se_radius: int = 1
    min_tissue_area: int = 64
    crops_per_slide: int = 50
    # autoencoder training
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_epochs: int = 100
    patience: int = 5
    val_fraction: float = 0.1
    negative_slope: float = 0.01
    # scoring and evaluation
    score_batch_size: int = 8
    k_folds: int = 5
    seed: int = 0
    jobs: int = 1
    # color normalization
    mvgd_lambda: float = 1e-6

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.se_radius < 1:
            raise ConfigError("se_radius must be >= 1")
        if self.min_tissue_area < 0:
            raise ConfigError("min_tissue_area must be >= 0")
        if self.crops_per_slide < 1:
            raise ConfigError("crops_per_slide must be >= 1")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.k_folds < 2:
            raise ConfigError("k_folds must be >= 2")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.batch_size < 1 or self.score_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.mvgd_lambda < 0:
            raise ConfigError("mvgd_lambda must be >= 0")

    @property
    def band(self) -> BrownBand:
        return BrownBand(
            lo=self.band_lo, hi=self.band_hi,
            sat_min=self.sat_min, val_min=self.val_min,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_epsilon=self.adam_epsilon,
            max_epochs=self.max_epochs,
            patience=self.patience,
            val_fraction=self.val_fraction,
            negative_slope=self.negative_slope,
            seed=self.seed,
        )

    def replaced(self, overrides: dict) -> "RunConfig":
        """New config with ``overrides`` applied; unknown keys rejected."""
        return _build({**dataclasses.asdict(self), **_checked(overrides)})


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _checked(doc: dict) -> dict:
    unknown = sorted(set(doc) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for key, value in doc.items():
        want_int = _FIELDS[key] == "int"
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r}: expected a number, got {value!r}")
        if want_int:
            if float(value) != int(value):
                raise ConfigError(f"config key {key!r}: expected an integer, got {value!r}")
            out[key] = int(value)
        else:
            out[key] = float(value)
    return out


def _build(doc: dict) -> RunConfig:
    try:
        return RunConfig(**doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides``."""
    doc: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        doc.update(_checked(loaded))
    if overrides:
        doc.update(_checked(overrides))
    defaults = dataclasses.asdict(RunConfig())
    return _build({**defaults, **doc})
