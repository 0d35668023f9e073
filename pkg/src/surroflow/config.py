"""Run configuration: one flat record driving generation, training and UQ.

A :class:`RunConfig` is JSON-serialisable, hashable to a stable digest, and
convertible into the per-module parameter objects. Two presets are bundled:
``paper`` mirrors the full-size study setup, ``desk`` is small enough to run
the complete pipeline on a laptop CPU in minutes.

Values can be overridden per run from environment variables named
``SURROFLOW_<FIELD>`` (upper-cased field name); the command line wins over the
environment, which wins over the config file, which wins over the preset.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

from .errors import ConfigError
from .grf import GridSpec, GrfParams
from .network import NetworkConfig
from .simulator import SimConfig
from .training import TrainConfig

DAY_S = 86400.0
ENV_PREFIX = "SURROFLOW_"


@dataclass(frozen=True)
class RunConfig:
    # domain
    grid_height: int = 32
    grid_width: int = 32
    cell_size_m: float = 10.0
    # log-permeability field
    grf_mean: float = 0.0
    grf_variance: float = 0.5
    grf_correlation_m: float = 100.0
    k_ref: float = 2.5e-13
    # flow physics
    injection_rate: float = 1.13e-5
    outlet_pressure: float = 1.2e7
    porosity: float = 0.2
    thickness_m: float = 1.0
    corey_exponent: float = 2.0
    mobility_ratio: float = 2.0
    residual_resident: float = 0.2
    residual_injected: float = 0.05
    resident_viscosity: float = 1.2e-3
    cfl_safety: float = 0.5
    cg_rtol: float = 1e-10
    # snapshot schedule (days)
    train_times_d: tuple[float, ...] = (100.0, 120.0, 140.0, 160.0, 180.0, 200.0)
    test_extra_times_d: tuple[float, ...] = (150.0,)
    uq_times_d: tuple[float, ...] = (100.0, 150.0, 200.0)
    # dataset sizes
    n_train: int = 128
    n_test: int = 64
    # network
    initial_features: int = 16
    growth_rate: int = 8
    block_layers: tuple[int, ...] = (2, 4, 2)
    # training
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    bce_weight: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    scheduler_factor: float = 0.1
    scheduler_patience: int = 10
    scheduler_min_delta: float = 1e-4
    scheduler_min_lr: float = 1e-6
    checkpoint_every: int = 25
    # evaluation
    eval_mask_threshold: float = 0.05
    # uncertainty propagation
    uq_realizations: int = 512
    uq_probes: tuple[tuple[int, int], ...] = ((16, 8), (8, 12), (24, 16), (16, 20))
    uq_batch: int = 64
    # reproducibility
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "train_times_d", _float_tuple(self.train_times_d))
        object.__setattr__(self, "test_extra_times_d", _float_tuple(self.test_extra_times_d))
        object.__setattr__(self, "uq_times_d", _float_tuple(self.uq_times_d))
        object.__setattr__(self, "block_layers", tuple(int(v) for v in self.block_layers))
        object.__setattr__(
            self, "uq_probes", tuple((int(r), int(c)) for r, c in self.uq_probes)
        )
        if not self.train_times_d:
            raise ConfigError("at least one training time is required")
        if len(set(self.train_times_d)) != len(self.train_times_d):
            raise ConfigError(f"duplicate training times: {self.train_times_d}")
        overlap = set(self.test_extra_times_d) & set(self.train_times_d)
        if overlap:
            raise ConfigError(f"withheld times also appear in training times: {overlap}")
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigError("dataset sizes must be positive")
        if self.uq_realizations < 2:
            raise ConfigError("uncertainty propagation needs at least 2 realizations")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        for row, col in self.uq_probes:
            if not (0 <= row < self.grid_height and 0 <= col < self.grid_width):
                raise ConfigError(f"probe ({row}, {col}) outside the grid")

    # ---- derived module parameter objects ----

    def grid(self) -> GridSpec:
        return GridSpec(self.grid_height, self.grid_width, self.cell_size_m)

    def grf_params(self) -> GrfParams:
        return GrfParams(self.grf_mean, self.grf_variance, self.grf_correlation_m)

    def sim_config(self, times_s: tuple[float, ...]) -> SimConfig:
        return SimConfig(
            grid=self.grid(),
            snapshot_times=tuple(times_s),
            injection_rate=self.injection_rate,
            outlet_pressure=self.outlet_pressure,
            porosity=self.porosity,
            thickness_m=self.thickness_m,
            corey_exponent=self.corey_exponent,
            mobility_ratio=self.mobility_ratio,
            residual_resident=self.residual_resident,
            residual_injected=self.residual_injected,
            resident_viscosity=self.resident_viscosity,
            cfl_safety=self.cfl_safety,
            cg_rtol=self.cg_rtol,
        )

    def network_config(self, seed: int | None = None) -> NetworkConfig:
        return NetworkConfig(
            height=self.grid_height,
            width=self.grid_width,
            initial_features=self.initial_features,
            growth_rate=self.growth_rate,
            block_layers=self.block_layers,
            seed=self.seed if seed is None else seed,
        )

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            bce_weight=self.bce_weight,
            betas=(self.adam_beta1, self.adam_beta2),
            seed=self.seed if seed is None else seed,
            scheduler_factor=self.scheduler_factor,
            scheduler_patience=self.scheduler_patience,
            scheduler_min_delta=self.scheduler_min_delta,
            scheduler_min_lr=self.scheduler_min_lr,
        )

    @property
    def train_times_s(self) -> tuple[float, ...]:
        return tuple(t * DAY_S for t in self.train_times_d)

    @property
    def test_times_s(self) -> tuple[float, ...]:
        merged = sorted(set(self.train_times_d) | set(self.test_extra_times_d))
        return tuple(t * DAY_S for t in merged)

    @property
    def uq_times_s(self) -> tuple[float, ...]:
        return tuple(t * DAY_S for t in self.uq_times_d)

    @property
    def time_scale_s(self) -> float:
        return max(self.train_times_s)

    # ---- serialisation ----

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["uq_probes"] = [list(p) for p in self.uq_probes]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        coerced = {}
        for f in dataclasses.fields(cls):
            if f.name not in data:
                continue
            coerced[f.name] = _coerce(f.name, data[f.name])
        try:
            return cls(**coerced)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(data)

    def digest(self) -> str:
        """Stable hash of the full configuration."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _float_tuple(values) -> tuple[float, ...]:
    return tuple(float(v) for v in values)


_INT_FIELDS = {
    f.name
    for f in dataclasses.fields(RunConfig)
    if f.type in ("int",)
}
_FLOAT_FIELDS = {
    f.name
    for f in dataclasses.fields(RunConfig)
    if f.type in ("float",)
}


def _coerce(name: str, value):
    try:
        if name in _INT_FIELDS:
            return int(value)
        if name in _FLOAT_FIELDS:
            return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config field {name!r}: cannot interpret {value!r}") from exc
    return value


def preset(name: str) -> RunConfig:
    """Bundled configurations: ``desk`` (default-sized) or ``paper`` (full)."""
    if name == "desk":
        return RunConfig()
    if name == "paper":
        return RunConfig(
            grid_height=50,
            grid_width=50,
            injection_rate=1.77e-5,
            resident_viscosity=5.0e-4,
            n_train=160,
            n_test=100,
            initial_features=48,
            growth_rate=24,
            block_layers=(4, 9, 4),
            epochs=200,
            batch_size=100,
            uq_realizations=2048,
            uq_probes=((24, 12), (10, 14), (25, 25)),
        )
    raise ConfigError(f"unknown preset {name!r} (expected 'desk' or 'paper')")


def apply_env_overrides(data: dict, environ=None) -> dict:
    """Overlay ``SURROFLOW_<FIELD>`` environment values onto a config dict.

    Scalar fields parse directly; tuple-valued fields take JSON, for example
    ``SURROFLOW_TRAIN_TIMES_D='[100, 150, 200]'``.
    """
    environ = os.environ if environ is None else environ
    out = dict(data)
    names = {f.name for f in dataclasses.fields(RunConfig)}
    for name in names:
        key = ENV_PREFIX + name.upper()
        if key not in environ:
            continue
        raw = environ[key]
        if name in _INT_FIELDS:
            try:
                out[name] = int(raw)
            except ValueError as exc:
                raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
        elif name in _FLOAT_FIELDS:
            try:
                out[name] = float(raw)
            except ValueError as exc:
                raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc
        else:
            try:
                out[name] = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{key}: expected JSON, got {raw!r}") from exc
    return out
