"""Run configuration: every tunable in one flat, hashable record."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

# excluded from the hash: they change where/how fast, not what
_UNHASHED = {"threads"}


@dataclass(frozen=True)
class RunConfig:
    # network
    queries_per_view: int = 300
    layers: int = 3
    C: int = 256
    heads: int = 4
    levels: int = 2
    points: int = 4
    delta_mu_max: float = 2.0
    s0_factor: float = 0.05
    s_min: float = 0.01
    s_max: float = 10.0
    alpha_bias: float = 2.0
    feat_init_std: float = 0.02
    zero_init_head: bool = False
    # training
    C_R: int = 64
    lr: float = 2e-4
    steps: int = 2000
    batch: int = 1
    seed: int = 0
    seg_aug: bool = False
    seg_hidden: int = 64
    beta: float = 0.2
    clip_norm: float = 10.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    pca_samples: int = 10000
    cover_threshold: float = 0.5
    normalized_depth: bool = True
    log_every: int = 50
    # rendering
    render_downsample: int = 16
    cov_eps: float = 0.3
    z_near: float = 0.05
    # synthetic data
    n_scenes: int = 1
    n_views: int = 2
    image_height: int = 384
    image_width: int = 640
    noise_sigma: float = 0.1
    # occupancy
    voxel_size: float = 0.4
    grid_min: tuple = (-8.0, -8.0, 0.0)
    grid_max: tuple = (8.0, 8.0, 3.2)
    tau_occ: float = 0.1
    # runtime
    threads: int = 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", int) and (isinstance(v, bool) or not isinstance(v, int)):
                if isinstance(v, float) and v.is_integer():
                    object.__setattr__(self, f.name, int(v))
                else:
                    raise ConfigError(f"{f.name} must be an integer, got {v!r}")
            elif f.type in ("float", float) and not isinstance(v, bool) and isinstance(v, (int, float)):
                object.__setattr__(self, f.name, float(v))
            elif f.type in ("bool", bool) and not isinstance(v, bool):
                raise ConfigError(f"{f.name} must be a boolean, got {v!r}")
            elif f.type in ("tuple", tuple):
                if len(v) != 3:
                    raise ConfigError(f"{f.name} needs three components")
                object.__setattr__(self, f.name, tuple(float(x) for x in v))
        if self.C % self.heads:
            raise ConfigError(f"C={self.C} must be divisible by heads={self.heads}")
        if self.C_R > self.C:
            raise ConfigError(f"C_R={self.C_R} cannot exceed C={self.C}")
        for name in ("queries_per_view", "layers", "steps", "batch", "n_views", "n_scenes",
                     "render_downsample", "C_R"):
            if getattr(self, name) < (0 if name == "steps" else 1):
                raise ConfigError(f"{name} must be positive")
        if self.lr < 0 or self.voxel_size <= 0 or self.s0_factor <= 0:
            raise ConfigError("lr must be >= 0; voxel_size and s0_factor must be > 0")

    def to_dict(self):
        return dataclasses.asdict(self)

    def config_hash(self):
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **kw):
        return from_dict({**self.to_dict(), **kw})


def from_dict(d):
    known = {f.name for f in fields(RunConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return RunConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path):
    """Read a JSON or TOML config file."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        if p.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib

            raw = tomllib.loads(text)
        else:
            raw = json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: config must be a table of keys")
    return from_dict(raw)


def parse_override(key, value):
    """Coerce a --key=value string to the field's type."""
    ftypes = {f.name: f.type for f in fields(RunConfig)}
    if key not in ftypes:
        raise ConfigError(f"unknown config key: {key}")
    t = ftypes[key]
    try:
        if t in ("bool", bool):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if t in ("int", int):
            return int(value)
        if t in ("float", float):
            return float(value)
        if t in ("tuple", tuple):
            return tuple(float(x) for x in value.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value
