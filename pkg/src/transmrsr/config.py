"""Training configuration, flat key=value config files and seed fan-out."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .model import AblationFlags


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    decay_factor: float = 0.5
    decay_every_epochs: int = 30
    batch_size: int = 6
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    max_epochs: int = 100
    early_stop_delta: float = 0.05
    early_stop_patience: int = 10
    scale_r: int = 4
    plane: str = "x-z"
    flags: AblationFlags = field(default_factory=AblationFlags)
    phi: float = 0.7
    seed: int = 0
    # beyond the core schedule
    profile: str = "full"
    axis: str = "z"
    max_steps: int = 0  # 0 = no step limit
    lambda_recon: float = 1.0
    lambda_cont: float = 0.5
    lambda_style: float = 0.5
    exact_gram: bool = False
    backbone_width: float = 1.0
    freeze_prior: bool = False
    augment: bool = True
    grad_clip: float = 0.0  # max global grad norm, 0 = off

    def __post_init__(self):
        if self.scale_r < 1:
            raise ConfigError(f"scale_r must be >= 1, got {self.scale_r}")
        if self.plane not in ("x-y", "x-z", "y-z"):
            raise ConfigError(f"unknown plane {self.plane!r}")
        if not 0.0 <= self.phi <= 1.0:
            raise ConfigError(f"phi must lie in [0, 1], got {self.phi}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.decay_every_epochs < 1:
            raise ConfigError("batch_size, max_epochs and decay_every_epochs must be positive")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch index."""
        return self.lr * self.decay_factor ** (epoch // self.decay_every_epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(d.pop("flags"))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        flag_names = {f.name for f in fields(AblationFlags)}
        flags = {k: d.pop(k) for k in list(d) if k in flag_names}
        if isinstance(d.get("flags"), dict):
            flags.update(d.pop("flags"))
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(flags=AblationFlags(**flags), **d)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, value: str, kind):
    kind = kind if isinstance(kind, type) else {"int": int, "float": float, "bool": bool, "str": str}.get(kind, str)
    try:
        if kind is bool:
            v = value.strip().lower()
            if v in _TRUE:
                return True
            if v in _FALSE:
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {value!r}") from None


def _field_types() -> dict:
    types = {f.name: f.type for f in fields(TrainConfig) if f.name != "flags"}
    types.update({f.name: "bool" for f in fields(AblationFlags)})
    return types


def parse_overrides(pairs: dict) -> dict:
    types = _field_types()
    out = {}
    for key, value in pairs.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value, types[key]) if isinstance(value, str) else value
    return out


def read_config(path) -> dict:
    """Parse a flat ``key=value`` file; ``#`` starts a comment."""
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = value
    return parse_overrides(raw)


def write_config(cfg: TrainConfig, path) -> None:
    with open(path, "w") as fh:
        for key, value in cfg.to_dict().items():
            fh.write(f"{key}={str(value).lower() if isinstance(value, bool) else value}\n")


def build_config(path=None, **overrides) -> TrainConfig:
    """File values first, then non-None overrides; seed falls back to ``TMRSR_SEED``."""
    values = read_config(path) if path else {}
    if "seed" not in values and overrides.get("seed") is None and os.environ.get("TMRSR_SEED"):
        values["seed"] = _coerce("seed", os.environ["TMRSR_SEED"], int)
    values.update(parse_overrides({k: v for k, v in overrides.items() if v is not None}))
    return TrainConfig.from_dict(values)


STREAMS = ("data", "augment", "init", "latent")


def seed_streams(root: int) -> dict:
    """Split one root seed into independent integer seeds.

    Stream ``i`` of ``STREAMS`` is ``SeedSequence(root).spawn(4)[i].generate_state(1)[0]``.
    """
    children = np.random.SeedSequence(root).spawn(len(STREAMS))
    return {name: int(child.generate_state(1)[0]) for name, child in zip(STREAMS, children)}


def with_flags(cfg: TrainConfig, **flags) -> TrainConfig:
    return replace(cfg, flags=replace(cfg.flags, **flags))
