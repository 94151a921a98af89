"""Flat ``key = value`` experiment configuration and seed expansion."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigurationError
from .field import GridSpec, Normalization
from .metric import LqgParams
from .stats import AC_SE_MULT, KS_DISTANCE_MAX, KS_P_MIN, KS_REPS_REQUIRED, HolderConfig

_MASK64 = 0xFFFF_FFFF_FFFF_FFFF


def splitmix64(x: int) -> int:
    """One step of the splitmix64 output function."""
    z = (int(x) + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def replicate_seed(base_seed: int, index: int) -> int:
    return splitmix64(int(base_seed) + int(index))


@dataclass(frozen=True)
class ExperimentConfig:
    gamma: float = math.sqrt(8.0 / 3.0)
    d_gamma: float = 4.0
    K: float = 2.0
    delta: float = 0.5
    delta_prime: float = 0.5
    rho: float = 1e-4
    grid_n: int = 2177
    spacing: float = 1.0 / 32.0
    normalization: str = "zero-unit-circle"
    n_probe: int = 4
    n_replicates: int = 2
    base_seed: int = 0
    t_values: tuple = ()  # empty: largest admissible t per replicate
    mesh_resolution: int = 17
    min_inner_sites: float = 30.0
    # planted bottleneck profile; depth = wall = 0 gives the pure GFF
    profile_depth: float = 5.0
    profile_wall: float = 20.0
    profile_width: float = 0.05
    n_q: int = 0  # 0: exact per-vertex integration of Z; else midpoint nodes
    n_empirical: int = 5
    n_candidates: int = 60
    shortcut_epsilons: tuple = (0.2, 0.04)
    chi: float = 0.01
    chi_prime: float = 2.0
    frak_d: float = 0.5
    # thresholds (conventions, see stats)
    ks_p_min: float = KS_P_MIN
    ks_reps_required: int = KS_REPS_REQUIRED
    ks_repetitions: int = 10
    ac_se_mult: float = AC_SE_MULT
    ks_distance_max: float = KS_DISTANCE_MAX
    ratio_drift_max: float = 0.10
    hill_boot: int = 1000
    # fraction of the full-size replicate counts used by the standalone diagnose experiments
    diagnose_scale: float = 1.0

    def __post_init__(self):
        try:
            self.params
            self.grid
            Normalization.coerce(self.normalization)
            self.holder
        except ConfigurationError:
            raise
        except Exception as exc:  # domain errors from owning modules
            raise ConfigurationError(str(exc)) from exc
        if self.n_replicates < 1:
            raise ConfigurationError("n_replicates must be at least 1")
        if not self.K > 1:
            raise ConfigurationError("K must exceed 1")
        if not 0 < self.delta < 1 or not 0 < self.delta_prime < 1:
            raise ConfigurationError("delta and delta_prime must lie in (0, 1)")
        if not self.rho > 0:
            raise ConfigurationError("rho must be positive")
        if self.n_probe < 1 or self.n_q < 0 or self.mesh_resolution < 3:
            raise ConfigurationError("n_probe must be positive, n_q non-negative and mesh_resolution >= 3")
        if any(not 0 < e <= 0.2 for e in self.shortcut_epsilons):
            raise ConfigurationError("shortcut epsilons must lie in (0, 1/5]")
        if not 0 < self.diagnose_scale <= 1:
            raise ConfigurationError("diagnose_scale must lie in (0, 1]")
        if any(t < 0 for t in self.t_values):
            raise ConfigurationError("t_values must be nonnegative")

    @property
    def params(self) -> LqgParams:
        return LqgParams(self.gamma, self.d_gamma)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.grid_n, self.spacing)

    @property
    def holder(self) -> HolderConfig:
        return HolderConfig(self.chi, self.chi_prime, self.frak_d, self.params)

    def seed(self, index: int) -> int:
        return replicate_seed(self.base_seed, index)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    default = _FIELDS[name].default
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {name}: {raw!r}") from exc


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
