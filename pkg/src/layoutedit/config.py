"""Run configuration: dimensions, schedules, defaults, JSON round-trip."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

INJECTION_SITES = ("down2", "down4", "mid", "all")


class ConfigError(ValueError):
    """Raised on invalid configuration values."""


@dataclass
class InjectionConfig:
    position: str = "down4"
    ip_scale: float = 1.0

    def validate(self):
        if self.position not in INJECTION_SITES:
            raise ConfigError(f"unknown injection position {self.position!r}; "
                              f"valid: {', '.join(INJECTION_SITES)}")


@dataclass
class RunConfig:
    seed: int = 0
    # model dimensions
    d_i: int = 64
    d_t: int = 64
    d_l: int = 64
    d_model: int = 64
    heads: int = 8
    max_n: int = 16
    # encoder / image geometry
    image_size: int = 32
    patch_size: int = 8
    # conditioning and guidance
    lam: float = 0.8
    cfg_w: float = 5.0
    sample_steps: int = 30
    injection: InjectionConfig = field(default_factory=InjectionConfig)
    # training
    lr: float = 2.5e-4
    train_steps: int = 2100
    dropout_rate: float = 0.05
    t_train: int = 1000
    # precision: "float32" for model runs, "float64" for gradient checks
    dtype: str = "float32"
    # paths
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoint"
    report_dir: str = "reports"

    def validate(self):
        for name in ("d_i", "d_t", "d_l", "d_model", "heads", "max_n",
                     "image_size", "patch_size", "sample_steps",
                     "train_steps", "t_train"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.lam < 0.0:
            raise ConfigError("lam must be >= 0")
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be divisible by patch_size")
        for d in (self.d_i, self.d_t, self.d_model):
            if d % self.heads != 0:
                raise ConfigError(f"extent {d} not divisible by heads={self.heads}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unknown dtype {self.dtype!r}")
        self.injection.validate()
        return self

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        inj = d.pop("injection", {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if isinstance(inj, dict):
            cfg.injection = InjectionConfig(**inj)
        return cfg

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def apply_env(self) -> "RunConfig":
        """QL_SEED overrides the configured seed."""
        env = os.environ.get("QL_SEED")
        if env is not None:
            self.seed = int(env)
        return self
