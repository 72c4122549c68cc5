"""Experiment configuration: a documented INI schema with strict validation.

Every command resolves the file into an :class:`ExperimentConfig`, validates
it, and writes the resolved copy into the output directory so a run can be
reproduced bit for bit.  All randomness derives from ``[experiment] seed``
through fixed named streams.

Schema (defaults in parentheses; Kolmogorov-only keys marked K, Lorenz96-only
keys marked L):

  [experiment]   model = lorenz96 | kolmogorov; output_dir; seed (0)
  [dynamics]     grid_size; forcing (8.0, L); dt (0.1, L);
                 viscosity (1e-2, K); forcing_wavenumber (4, K);
                 damping (0.1, K); substeps (25, K); dt_inner (0.0072, K)
  [observation]  stride; window_steps (10)
  [data]         train_trajectories; val_fraction (0.1);
                 stationary_samples; spinup (1000 steps L / 60 snapshots K)
  [whitening]    kind = full | diagonal (full); floor (1e-6)
  [training]     epochs; batch_size (8); learning_rate (1e-3);
                 base_channels (128 L / 64 K); net_window (10)
  [assimilation] budget_physics; budget_observation
  [evaluation]   n_test; horizon (10); gamma_pairs (1000)
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from . import kolmogorov as kflow
from . import lorenz96 as l96
from . import neural
from .observation import ObservationOp

# named seed streams: one root seed per run, split per consumer
STREAMS = ("train_data", "val_data", "stationary_pool", "model_init",
           "training", "test_windows", "gamma", "calibration")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class ExperimentConfig:
    model: str
    output_dir: str
    seed: int = 0
    # dynamics
    grid_size: int = 40
    forcing: float = 8.0
    dt: float = 0.1
    viscosity: float = 1e-2
    forcing_wavenumber: int = 4
    damping: float = 0.1
    substeps: int = 25
    dt_inner: float = 0.18 / 25
    # observation
    stride: int = 4
    window_steps: int = 10
    # data
    train_trajectories: int = 4000
    val_fraction: float = 0.1
    stationary_samples: int = 10000
    spinup: int = 1000
    # whitening
    whitening_kind: str = "full"
    whitening_floor: float = 1e-6
    # training
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-3
    base_channels: int = 128
    net_window: int = 10
    # assimilation
    budget_physics: int = 100
    budget_observation: int = 400
    # evaluation
    n_test: int = 100
    horizon: int = 10
    gamma_pairs: int = 1000

    def validate(self):
        if self.model not in (neural.LORENZ96, neural.KOLMOGOROV):
            raise ConfigError(f"model must be lorenz96 or kolmogorov, got {self.model!r}")
        if not self.output_dir:
            raise ConfigError("output_dir must be set")
        if self.grid_size % self.stride != 0:
            raise ConfigError(f"stride {self.stride} does not divide grid size "
                              f"{self.grid_size}")
        if self.window_steps < 1 or self.net_window < 1:
            raise ConfigError("window lengths must be positive")
        if self.net_window > self.window_steps + 1:
            raise ConfigError("net_window cannot exceed window_steps + 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")
        if self.train_trajectories < 1:
            raise ConfigError("train_trajectories must be >= 1")
        if self.whitening_kind not in ("full", "diagonal"):
            raise ConfigError("whitening kind must be full or diagonal")
        if self.budget_physics < 0 or self.budget_observation < 1:
            raise ConfigError("budgets must be non-negative / positive")
        if self.n_test < 1 or self.horizon < 1 or self.gamma_pairs < 100:
            raise ConfigError("evaluation sizes too small")
        # constructing the parameter objects runs their own validation
        self.dyn_params()
        self.network_config()
        return self

    def dyn_params(self):
        if self.model == neural.LORENZ96:
            return l96.L96Params(k=self.grid_size, forcing=self.forcing, dt=self.dt)
        return kflow.KolmogorovParams(n=self.grid_size, viscosity=self.viscosity,
                                      forcing_wavenumber=self.forcing_wavenumber,
                                      damping=self.damping, substeps=self.substeps,
                                      dt_inner=self.dt_inner)

    def obs_op(self) -> ObservationOp:
        if self.model == neural.LORENZ96:
            return ObservationOp.lorenz96(self.stride)
        return ObservationOp.kolmogorov(self.stride)

    def network_config(self) -> neural.InverseModelConfig:
        if self.model == neural.LORENZ96:
            return neural.lorenz96_config(k=self.grid_size, stride=self.stride,
                                          window=self.net_window,
                                          base_channels=self.base_channels)
        return neural.kolmogorov_config(n=self.grid_size, stride=self.stride,
                                        window=self.net_window,
                                        base_channels=self.base_channels)

    def stream_seed(self, name: str):
        if name not in STREAMS:
            raise ConfigError(f"unknown seed stream {name!r}")
        return np.random.SeedSequence([self.seed, STREAMS.index(name)])

    # ------------------------------------------------------------------
    # paths
    # ------------------------------------------------------------------

    def path(self, *parts) -> str:
        return os.path.join(self.output_dir, *parts)

    def train_data_path(self):
        return self.path("data", "train.bin")

    def val_data_path(self):
        return self.path("data", "val.bin")

    def pool_path(self):
        return self.path("data", "stationary_pool.bin")

    def climatology_path(self):
        return self.path("data", "climatology.bin")

    def whitening_path(self):
        return self.path("whitening.bin")

    def checkpoint_path(self):
        return self.path("model.ckpt")

    def loss_history_path(self):
        return self.path("loss_history.csv")

    def assim_dir(self, method: str, init_scheme: str):
        return self.path("assim", f"{method}_{init_scheme}")

    def eval_dir(self):
        return self.path("eval")

    def report_dir(self):
        return self.path("report")


_SCHEMA = {
    "experiment": {"model": str, "output_dir": str, "seed": int},
    "dynamics": {"grid_size": int, "forcing": float, "dt": float,
                 "viscosity": float, "forcing_wavenumber": int, "damping": float,
                 "substeps": int, "dt_inner": float},
    "observation": {"stride": int, "window_steps": int},
    "data": {"train_trajectories": int, "val_fraction": float,
             "stationary_samples": int, "spinup": int},
    "whitening": {"kind": str, "floor": float},
    "training": {"epochs": int, "batch_size": int, "learning_rate": float,
                 "base_channels": int, "net_window": int},
    "assimilation": {"budget_physics": int, "budget_observation": int},
    "evaluation": {"n_test": int, "horizon": int, "gamma_pairs": int},
}

_FIELD_NAMES = {
    ("whitening", "kind"): "whitening_kind",
    ("whitening", "floor"): "whitening_floor",
}


def load_config(path) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path)
    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            typ = _SCHEMA[section][key]
            field_name = _FIELD_NAMES.get((section, key), key)
            try:
                values[field_name] = typ(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
    if "model" not in values or "output_dir" not in values:
        raise ConfigError("[experiment] must set model and output_dir")
    cfg = ExperimentConfig(**values)
    # model-dependent defaults when the file left them unset
    if cfg.model == neural.KOLMOGOROV:
        if "grid_size" not in values:
            cfg.grid_size = 64
        if "stride" not in values:
            cfg.stride = 16
        if "base_channels" not in values:
            cfg.base_channels = 64
        if "spinup" not in values:
            cfg.spinup = 60
        if "whitening_kind" not in values:
            cfg.whitening_kind = "diagonal"
    return cfg.validate()


def resolved_text(cfg: ExperimentConfig) -> str:
    """Deterministic INI serialization of a resolved configuration."""
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key in keys:
            field_name = _FIELD_NAMES.get((section, key), key)
            lines.append(f"{key} = {getattr(cfg, field_name)!r}"
                         if isinstance(getattr(cfg, field_name), float)
                         else f"{key} = {getattr(cfg, field_name)}")
        lines.append("")
    return "\n".join(lines)


def write_resolved(cfg: ExperimentConfig) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    text = resolved_text(cfg)
    path = cfg.path("config.resolved.ini")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)
    return path


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(resolved_text(cfg).encode("utf-8")).hexdigest()[:16]
