"""Run configuration (TOML) with strict validation."""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field as dc_field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .field import TokamakCircularParams

METHODS = ("eq1", "quasisym", "lattice", "general", "stokes", "poincare", "mc")


class ConfigError(ValueError):
    pass


def _check_keys(cls, block, where):
    names = {f.name for f in fields(cls)}
    unknown = set(block) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")


def _positive(obj, names, where):
    for n in names:
        v = getattr(obj, n)
        if not (isinstance(v, (int, float)) and v > 0):
            raise ConfigError(f"[{where}] {n} must be > 0 (got {v!r})")


@dataclass
class FieldConfig:
    kind: str = "tokamak-circular"
    R0: float = 1.0
    F0: float = 1.0
    eps: float = 0.0
    m: int = 2
    n: int = 1

    def validate(self):
        if self.kind != "tokamak-circular":
            raise ConfigError(f"unknown field kind {self.kind!r}")
        try:
            TokamakCircularParams(self.R0, self.F0, self.eps, self.m, self.n)
        except ValueError as e:
            raise ConfigError(f"[field] {e}") from None

    def block(self):
        return asdict(self)


@dataclass
class ScenarioConfig:
    methods: list = dc_field(default_factory=lambda: ["all"])
    r: float = 0.5                  # minor radius of the target surface
    n_labels: int = 16              # psi nodes for profile methods
    eq1_grid: list = dc_field(default_factory=lambda: [64, 64])
    n_turns: int = 500
    max_turns: int = 4000
    stokes_grid: list = dc_field(default_factory=lambda: [64, 64])
    percival_K: list = dc_field(default_factory=lambda: [4, 20])
    percival_tol: float = 1e-8
    poincare_quad: int = 64
    mc_samples: int = 10_000_000
    rtol: float = 1e-11
    atol: float = 1e-12
    quad_tol: float = 1e-10
    seed: int = 0
    time_budget: float = math.inf   # seconds per method; inf = unlimited

    def validate(self, field_cfg: FieldConfig):
        ms = list(self.methods)
        if not ms:
            raise ConfigError("[scenario] methods is empty")
        for m in ms:
            if m != "all" and m not in METHODS:
                raise ConfigError(f"[scenario] unknown method {m!r}; choose from {METHODS}")
        _positive(self, ["r", "n_labels", "n_turns", "max_turns", "percival_tol",
                         "poincare_quad", "mc_samples", "rtol", "atol", "quad_tol",
                         "time_budget"], "scenario")
        for name in ("eq1_grid", "stokes_grid", "percival_K"):
            v = getattr(self, name)
            if len(v) != 2 or any(int(x) != x or x < 0 for x in v):
                raise ConfigError(f"[scenario] {name} must be two non-negative integers")
        if min(self.eq1_grid) < 2 or min(self.stokes_grid) < 4:
            raise ConfigError("[scenario] grids are too small")
        if not self.r < 0.95 * field_cfg.R0:
            raise ConfigError("[scenario] r lies outside the field domain")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError("[scenario] seed must be a non-negative integer")

    def method_list(self, has_u=True):
        if "all" in self.methods:
            return [m for m in METHODS if has_u or m not in ("quasisym", "lattice")]
        return list(dict.fromkeys(self.methods))


@dataclass
class OutputConfig:
    dir: str = "out"
    prefix: str = "run"

    def validate(self):
        if not self.prefix or "/" in self.prefix:
            raise ConfigError("[output] prefix must be a plain file stem")


@dataclass
class RunConfig:
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    scenario: ScenarioConfig = dc_field(default_factory=ScenarioConfig)
    output: OutputConfig = dc_field(default_factory=OutputConfig)
    workers: int = 1

    def validate(self):
        self.field.validate()
        self.scenario.validate(self.field)
        self.output.validate()
        if int(self.workers) != self.workers or self.workers < 1:
            raise ConfigError("workers must be a positive integer")
        return self

    def to_dict(self):
        d = asdict(self)
        d.pop("workers")    # results do not depend on the worker count
        return d

    def canonical_json(self):
        """Field and scenario tables only: output paths do not change results."""
        d = self.to_dict()
        d.pop("output")
        return json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)

    def hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {"field", "scenario", "output"}
        if unknown:
            raise ConfigError(f"unknown top-level tables: {sorted(unknown)}")
        parts = {}
        for key, sub in (("field", FieldConfig), ("scenario", ScenarioConfig),
                         ("output", OutputConfig)):
            block = d.get(key, {})
            if not isinstance(block, dict):
                raise ConfigError(f"[{key}] must be a table")
            _check_keys(sub, block, key)
            try:
                parts[key] = sub(**block)
            except TypeError as e:
                raise ConfigError(str(e)) from None
        return cls(**parts).validate()

    @classmethod
    def from_toml(cls, path):
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"{path}: {e}") from None
        return cls.from_dict(data)


def benchmark_config(**scenario):
    """Axisymmetric benchmark at r = 0.5 with every method."""
    return RunConfig(scenario=ScenarioConfig(**scenario)).validate()
