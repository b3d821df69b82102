"""Experiment configuration: a nested YAML file mapped onto dataclasses.

Every field has a default, and the resolved configuration (all defaults
filled in) is what reports embed.  ``ExperimentConfig.from_dict(c.to_dict())``
returns an equal object, and so does a YAML round trip.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields

import yaml

from .groups import preset_anosov_family, preset_schottky_sl2, preset_symmetric_power
from .linalg import full_theta, make_theta

PRESETS = ("schottky", "symmetric", "anosov")
SUBSPACE_KINDS = ("line", "full", "principal", "basis")
PSI_KINDS = ("tangent", "sum-of-roots", "first-coordinate", "dual")


@dataclass(frozen=True)
class PresetConfig:
    name: str = "anosov"
    d: int = 3
    spacing: float = 3.0
    m: int = 2
    eps: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.name not in PRESETS:
            raise ValueError(f"unknown preset {self.name!r}; expected one of {PRESETS}")
        if self.d < 2:
            raise ValueError("d must be at least 2")

    def build(self):
        base = preset_schottky_sl2(self.spacing, self.m)
        if self.name == "schottky":
            if self.d != 2:
                raise ValueError("the schottky preset lives in SL_2")
            return base
        if self.name == "symmetric":
            return preset_symmetric_power(base, self.d) if self.d > 2 else base
        return preset_anosov_family(self.d, self.spacing, self.m, self.eps, self.seed)


@dataclass(frozen=True)
class SubspaceConfig:
    """How W is chosen: the line through u, all of a_theta, u plus principal
    transverse axes (``dim`` in total), or an explicit ``basis``."""

    kind: str = "line"
    dim: int = 1
    basis: tuple = None

    def __post_init__(self):
        if self.kind not in SUBSPACE_KINDS:
            raise ValueError(f"unknown subspace kind {self.kind!r}")
        if self.kind == "basis" and not self.basis:
            raise ValueError("subspace kind 'basis' needs basis vectors")


@dataclass(frozen=True)
class PsiConfig:
    kind: str = "tangent"
    dual: tuple = None

    def __post_init__(self):
        if self.kind not in PSI_KINDS:
            raise ValueError(f"unknown psi kind {self.kind!r}")
        if self.kind == "dual" and self.dual is None:
            raise ValueError("psi kind 'dual' needs the dual vector")


@dataclass(frozen=True)
class SeriesConfig:
    radii: tuple = None
    radius_factors: tuple = (0.2, 0.25, 0.3, 0.35, 0.4)
    tgrid_points: int = 24
    min_window: float = 0.05
    tail_fraction: float = 0.05
    grid_resolution: int = 16
    half_angles: tuple = (0.3, 0.2, 0.1)
    cone_shells: int = 3
    indicator_rows: int = 200_000
    antipodal_samples: int = 200
    calibrate: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    preset: PresetConfig = field(default_factory=PresetConfig)
    maxlen: int = 10
    policy: str = "free"
    theta: tuple = None
    direction: tuple = None
    subspace: SubspaceConfig = field(default_factory=SubspaceConfig)
    psi: PsiConfig = field(default_factory=PsiConfig)
    series: SeriesConfig = field(default_factory=SeriesConfig)
    seed: int = 0
    threads: int = 1
    memory_budget: int = None
    include_guarded: bool = False
    out: str = "out"

    def __post_init__(self):
        if self.maxlen < 1:
            raise ValueError("maxlen must be at least 1")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")

    # --- conversion -------------------------------------------------------

    def to_dict(self):
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        nested = {"preset": PresetConfig, "subspace": SubspaceConfig, "psi": PsiConfig, "series": SeriesConfig}
        kwargs = {}
        for key, value in data.items():
            if key in nested:
                kwargs[key] = _sub(nested[key], value)
            else:
                kwargs[key] = _tuplify(value)
        return cls(**kwargs)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    @classmethod
    def from_yaml(cls, text):
        return cls.from_dict(yaml.safe_load(text))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            text = fh.read()
        if not text.strip():
            raise ValueError(f"config file {path} is empty")
        return cls.from_yaml(text)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_yaml())

    # --- resolution -------------------------------------------------------

    @property
    def d(self):
        return self.preset.d

    def resolved_theta(self):
        return full_theta(self.d) if self.theta is None else make_theta(self.theta, self.d)

    def echo(self):
        """The config as embedded in reports: execution-only fields removed.

        Thread count and output directory change neither the numbers nor the
        artifacts, so they stay out of the report to keep reports
        byte-identical across them.
        """
        data = self.to_dict()
        for key in ("threads", "out", "memory_budget"):
            data.pop(key)
        data["theta"] = list(self.resolved_theta())
        return data

    def cache_key(self):
        """Content key of the orbit table this config asks for."""
        gens = self.preset.build()
        key = {"generator_hash": gens.digest(), "maxlen": self.maxlen, "policy": self.policy, "seed": self.seed}
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]

    def cache_path(self):
        return os.path.join(self.out, f"orbit-{self.cache_key()}.aorb")


def _sub(cls, value):
    value = dict(value or {})
    unknown = set(value) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**{k: _tuplify(v) for k, v in value.items()})


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value

