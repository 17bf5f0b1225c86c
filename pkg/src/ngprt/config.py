"""Run configuration: full-scale defaults plus the desk-scale profile.

A configuration is a flat set of named values that round-trips through a
JSON document, so a single human-readable file plus ``key=value`` overrides
fully determines a run.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ngprt.errors import ConfigError

FUSION_MODES = (
    "SUM",
    "SHARED_ATT_INV",
    "SEPARATE_ATT_INV",
    "SHARED_ATT_V",
    "SEPARATE_ATT_V",
    "MLP",
)


@dataclass
class Config:
    # encoding
    n_fine_levels: int = 2
    coarse_resolution: int = 512
    n_coarse_levels: int = 6
    coarse_base_resolution: int = 16
    coarse_table_len: int = 2**21
    fine_table_len: int = 2**22
    fine_resolutions: list[int] | None = None
    fusion_mode: str = "SEPARATE_ATT_V"
    hidden_width: int = 64

    # occupancy / marching
    grid_resolution: int = 512
    pyramid_levels: int = 5
    max_step_rule: bool = False
    early_stop_transmittance: float = 2e-3
    cull_alpha_threshold: float = 0.005

    # optimisation
    iterations: int = 100_000
    lr: float = 0.01
    lr_warmup_iters: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    eta: float = 0.01
    eta_warmup_iters: int = 50_000
    huber_delta: float = 0.1
    ray_cap: int = 8000
    sample_cap: int = 2**21
    gamma_init: float = 1.0
    gamma_min: float = 0.2217
    kappa: float = 0.001
    n_min: float = 3.0
    occ_update_every: int = 256
    occ_warmup_iters: int = 256
    occ_warmup_every: int = 16
    occ_decay: float = 0.95
    occ_alpha_threshold: float = 0.005
    checkpoint_every: int = 0
    log_every: int = 100

    seed: int = 0
    dtype: str = "float32"
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.validate()

    # derived quantities -------------------------------------------------
    @property
    def coarse_resolutions(self) -> list[int]:
        """Geometric ladder from the base resolution up to the coarse grid."""
        n = self.n_coarse_levels
        if n == 1:
            return [self.coarse_resolution]
        growth = (self.coarse_resolution / self.coarse_base_resolution) ** (1.0 / (n - 1))
        return [int(round(self.coarse_base_resolution * growth**k)) for k in range(n)]

    @property
    def fine_level_resolutions(self) -> list[int]:
        if self.fine_resolutions is not None:
            return list(self.fine_resolutions)
        return [2 * self.coarse_resolution * 2**k for k in range(self.n_fine_levels)]

    @property
    def base_step(self) -> float:
        return 2.0 * math.sqrt(3.0) / self.grid_resolution

    @property
    def distance_resolution(self) -> int:
        return self.grid_resolution // 2

    @property
    def pyramid_resolutions(self) -> list[int]:
        return [self.grid_resolution >> k for k in range(self.pyramid_levels)]

    @property
    def decoder_width(self) -> int:
        return 8 + 2 * self.n_fine_levels

    def validate(self) -> None:
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.n_fine_levels < 1:
            raise ConfigError("n_fine_levels must be >= 1")
        if self.fine_resolutions is not None and len(self.fine_resolutions) != self.n_fine_levels:
            raise ConfigError("fine_resolutions must list one entry per fine level")
        res = self.fine_level_resolutions
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ConfigError("fine resolutions must strictly increase")
        co = self.coarse_resolutions
        if any(b <= a for a, b in zip(co, co[1:])):
            raise ConfigError("coarse resolutions must strictly increase")
        if self.grid_resolution % (1 << (self.pyramid_levels - 1)) != 0:
            raise ConfigError("grid_resolution must be divisible by 2**(pyramid_levels-1)")
        if self.eta < 0 or self.huber_delta <= 0:
            raise ConfigError("eta must be >= 0 and huber_delta > 0")
        if not 0 < self.gamma_min <= self.gamma_init <= 1.0:
            raise ConfigError("need 0 < gamma_min <= gamma_init <= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    # serialisation ------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Config":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes: Any) -> "Config":
        return dataclasses.replace(self, **changes)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)


def full_config(**overrides: Any) -> Config:
    return Config(**overrides)


def desk_config(**overrides: Any) -> Config:
    """Small profile that trains on one CPU core in minutes."""
    base = dict(
        n_fine_levels=2,
        coarse_resolution=64,
        coarse_base_resolution=8,
        coarse_table_len=2**17,
        fine_table_len=2**18,
        grid_resolution=128,
        iterations=5000,
        lr_warmup_iters=100,
        eta_warmup_iters=2500,
        ray_cap=256,
        sample_cap=2**14,
        occ_update_every=64,
        occ_warmup_iters=256,
        occ_warmup_every=16,
        log_every=50,
    )
    base.update(overrides)
    return Config(**base)


PROFILES = {"full": full_config, "desk": desk_config}


def apply_overrides(config: Config, pairs: list[str]) -> Config:
    """Apply ``key=value`` strings; values are parsed as JSON when possible."""
    changes: dict[str, Any] = {}
    names = {f.name for f in dataclasses.fields(Config)}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        changes[key] = value
    return config.replace(**changes)
