"""Lattice first-passage metrics built from a field.

Vertex factors are ``exp(xi * h)`` and the edge ``(u, v)`` costs
``spacing/2 * (exp(xi h(u)) + exp(xi h(v)))``.  Adding a constant ``c`` to the
field multiplies every edge by exactly ``exp(xi c)``, so geodesics are
unchanged under constant shifts.

Sites are ``(row, col)`` tuples; "lexicographically smallest" refers to this
ordering, equivalently to row-major flat indices.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import _kernels
from .errors import ConfigurationError, DomainError, NoPathError, NumericalError
from .field import GridSpec, LatticeField

EXP_GUARD = 700.0


@dataclass(frozen=True)
class LqgParams:
    gamma: float = math.sqrt(8.0 / 3.0)
    d_gamma: float = 4.0

    def __post_init__(self):
        if not 0 < self.gamma < 2:
            raise ConfigurationError(f"gamma must lie in (0, 2), got {self.gamma}")
        if not self.d_gamma > 2:
            raise ConfigurationError(f"d_gamma must exceed 2, got {self.d_gamma}")

    @property
    def xi(self) -> float:
        return self.gamma / self.d_gamma

    @property
    def q(self) -> float:
        return self.gamma / 2.0 + 2.0 / self.gamma

    @property
    def xi_q(self) -> float:
        return self.xi * self.q


# the sqrt(8/3), d=4 preset is external knowledge, not derived here
DEFAULT_PARAMS = LqgParams()


@dataclass(frozen=True, eq=False)
class LatticePath:
    sites: np.ndarray  # (k, 2) int rows/cols
    cumulative: np.ndarray  # (k,) chemical length from the first site

    @property
    def total(self) -> float:
        return float(self.cumulative[-1])

    def __len__(self) -> int:
        return len(self.sites)

    def site_list(self) -> list[tuple[int, int]]:
        return [tuple(map(int, s)) for s in self.sites]

    def index_of(self, site) -> int:
        hit = np.nonzero((self.sites[:, 0] == site[0]) & (self.sites[:, 1] == site[1]))[0]
        if hit.size == 0:
            raise DomainError(f"site {tuple(site)} is not on the path")
        return int(hit[0])

    def nearest_index(self, length: float) -> int:
        """Vertex whose cumulative length is closest to ``length`` (first on ties)."""
        cum = self.cumulative
        j = int(np.searchsorted(cum, length))
        if j <= 0:
            return 0
        if j >= len(cum):
            return len(cum) - 1
        return j - 1 if length - cum[j - 1] <= cum[j] - length else j


@dataclass(frozen=True, eq=False)
class MetricField:
    """Edge weights of the lattice first-passage metric."""

    factors: np.ndarray
    wh: np.ndarray
    wv: np.ndarray
    spacing: float
    params: LqgParams | None = None
    field: LatticeField | None = None

    @classmethod
    def from_factors(cls, factors, spacing: float = 1.0, params=None, field=None) -> "MetricField":
        f = np.asarray(factors, dtype=np.float64)
        if f.ndim != 2 or f.size == 0:
            raise ConfigurationError("vertex factors must be a non-empty 2-d array")
        if not np.all(np.isfinite(f)) or np.any(f <= 0):
            raise NumericalError("vertex factors must be positive and finite")
        half = 0.5 * spacing
        wh = half * (f[:, :-1] + f[:, 1:])
        wv = half * (f[:-1, :] + f[1:, :])
        for a in (f, wh, wv):
            a.setflags(write=False)
        return cls(f, wh, wv, float(spacing), params, field)

    @property
    def shape(self) -> tuple[int, int]:
        return self.factors.shape

    @property
    def grid(self) -> GridSpec:
        if self.field is None:
            raise DomainError("metric was built from raw factors and has no grid")
        return self.field.grid

    def flat(self, site) -> int:
        return int(site[0]) * self.shape[1] + int(site[1])

    def unflat(self, idx) -> tuple[int, int]:
        return divmod(int(idx), self.shape[1])

    def in_bounds(self, site) -> bool:
        return 0 <= site[0] < self.shape[0] and 0 <= site[1] < self.shape[1]

    def region_mask(self, region) -> np.ndarray:
        return as_mask(region, self.shape)

    def path_weight(self, sites) -> float:
        sites = np.asarray(sites)
        total = 0.0
        for a, b in zip(sites[:-1], sites[1:]):
            total += self.edge(a, b)
        return total

    def edge(self, a, b) -> float:
        (r0, c0), (r1, c1) = a, b
        if r0 == r1 and abs(c0 - c1) == 1:
            return float(self.wh[r0, min(c0, c1)])
        if c0 == c1 and abs(r0 - r1) == 1:
            return float(self.wv[min(r0, r1), c0])
        raise DomainError(f"sites {tuple(a)} and {tuple(b)} are not lattice neighbours")


def as_mask(region, shape) -> np.ndarray:
    """Boolean mask from ``None`` (everything), a mask, or an iterable of sites."""
    if region is None:
        return np.ones(shape, dtype=bool)
    if isinstance(region, np.ndarray) and region.dtype == bool:
        if region.shape != tuple(shape):
            raise DomainError("region mask shape does not match the metric")
        return region
    mask = np.zeros(shape, dtype=bool)
    for r, c in region:
        mask[r, c] = True
    return mask


def disk_mask(grid: GridSpec, center, radius: float, strict: bool = True) -> np.ndarray:
    rad = grid.radius(center)
    return rad < radius if strict else rad <= radius


def annulus_mask(grid: GridSpec, inner: float, outer: float, center=(0.0, 0.0)) -> np.ndarray:
    rad = grid.radius(center)
    return (rad > inner) & (rad < outer)


def build_metric(field: LatticeField, params: LqgParams = DEFAULT_PARAMS) -> MetricField:
    expo = params.xi * field.values
    bad = np.abs(expo) > EXP_GUARD
    if np.any(bad):
        site = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NumericalError(f"exp(xi*h) overflows at site {site}")
    return MetricField.from_factors(np.exp(expo), field.grid.spacing, params, field)


# ------------------------------------------------------------ shortest paths
def _check_site(m: MetricField, site, mask) -> tuple[int, int]:
    site = (int(site[0]), int(site[1]))
    if not m.in_bounds(site):
        raise DomainError(f"site {site} lies outside the grid")
    if not mask[site]:
        raise DomainError(f"site {site} lies outside the region")
    return site


def distance_field(m: MetricField, sources, region=None) -> np.ndarray:
    """Distance from the nearest of ``sources`` to every site (``inf`` if unreachable)."""
    mask = m.region_mask(region)
    srcs = [sources] if np.ndim(sources) == 1 and len(sources) == 2 and np.isscalar(sources[0]) else sources
    flat = [m.flat(_check_site(m, s, mask)) for s in srcs]
    dist = _kernels.grid_dijkstra(m.wh, m.wv, mask, flat)
    return dist.reshape(m.shape)


def shortest_path(m: MetricField, u, v, region=None) -> tuple[float, LatticePath]:
    """Exact distance and the lexicographically smallest geodesic ``u -> v``."""
    mask = m.region_mask(region)
    u = _check_site(m, u, mask)
    v = _check_site(m, v, mask)
    fu, fv = m.flat(u), m.flat(v)
    dist = _kernels.grid_dijkstra(m.wh, m.wv, mask, [fv], target=fu)
    return _extract(m, dist, mask, fu, fv)


def _extract(m: MetricField, dist: np.ndarray, mask: np.ndarray, fu: int, fv: int) -> tuple[float, LatticePath]:
    d = float(dist[fu])
    if not np.isfinite(d):
        raise NoPathError(f"{m.unflat(fu)} and {m.unflat(fv)} are disconnected in the region")
    flat = _kernels.walk_path(dist, m.wh, m.wv, mask, fu, fv)
    return d, path_from_flat(m, flat)


def path_from_flat(m: MetricField, flat: np.ndarray) -> LatticePath:
    rows, cols = np.divmod(np.asarray(flat, dtype=np.int64), m.shape[1])
    steps = np.empty(rows.size - 1)
    horiz = rows[:-1] == rows[1:]
    steps[horiz] = m.wh[rows[:-1][horiz], np.minimum(cols[:-1], cols[1:])[horiz]]
    steps[~horiz] = m.wv[np.minimum(rows[:-1], rows[1:])[~horiz], cols[:-1][~horiz]]
    cum = np.concatenate([[0.0], np.cumsum(steps)])
    return LatticePath(np.stack([rows, cols], axis=1), cum)


def paths_to(m: MetricField, target, starts, region=None) -> list[tuple[float, LatticePath]]:
    """Geodesics from each of ``starts`` to one ``target`` with a single search."""
    mask = m.region_mask(region)
    target = _check_site(m, target, mask)
    fv = m.flat(target)
    dist = _kernels.grid_dijkstra(m.wh, m.wv, mask, [fv])
    out = []
    for s in starts:
        fu = m.flat(_check_site(m, s, mask))
        out.append(_extract(m, dist, mask, fu, fv))
    return out


def induced_vs_free(m: MetricField, u, v, region) -> tuple[float, float]:
    """``(distance inside region, distance in the whole grid)``."""
    induced, _ = shortest_path(m, u, v, region)
    free, _ = shortest_path(m, u, v, None)
    return induced, free


def pairwise_distances(m: MetricField, sites, region=None) -> np.ndarray:
    """Distance matrix by repeated single-source search; row ``i`` is searched from ``sites[i]``."""
    mask = m.region_mask(region)
    sites = [_check_site(m, s, mask) for s in sites]
    flat = np.array([m.flat(s) for s in sites], dtype=np.int64)
    out = np.empty((len(sites), len(sites)))
    cache: dict[int, np.ndarray] = {}
    for i, f in enumerate(flat):
        if f not in cache:
            cache[f] = _kernels.grid_dijkstra(m.wh, m.wv, mask, [f])
        out[i] = cache[f][flat]
    return out


def lqg_measure(m: MetricField, region=None) -> float:
    """``sum spacing^2 * spacing^(gamma^2/2) * exp(gamma h)`` over the region."""
    if m.field is None or m.params is None:
        raise DomainError("LQG measure needs the underlying field and parameters")
    mask = m.region_mask(region)
    gamma = m.params.gamma
    expo = gamma * m.field.values[mask]
    if np.any(np.abs(expo) > EXP_GUARD):
        raise NumericalError("exp(gamma*h) overflows in the region")
    eps = m.spacing
    return float(eps**2 * eps ** (gamma**2 / 2.0) * np.exp(expo).sum())


def lqg_diameter(m: MetricField, region=None) -> float:
    """Largest induced distance between two sites of the region."""
    mask = m.region_mask(region)
    flat = np.flatnonzero(mask)
    if flat.size == 0:
        raise DomainError("empty region")
    best = 0.0
    for f in flat:
        dist = _kernels.grid_dijkstra(m.wh, m.wv, mask, [f])[flat]
        if not np.all(np.isfinite(dist)):
            raise NoPathError("region is disconnected")
        best = max(best, float(dist.max()))
    return best


# ------------------------------------------------------------------ export
def _xy(m: MetricField, site) -> tuple[int, int]:
    r0, c0 = m.shape[0] // 2, m.shape[1] // 2
    return int(site[1]) - c0, int(site[0]) - r0


def write_distance_table(path, m: MetricField, sites: Iterable, distances: np.ndarray) -> None:
    """CSV ``u_x,u_y,v_x,v_y,distance``; coordinates are lattice offsets from the centre."""
    sites = list(sites)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u_x", "u_y", "v_x", "v_y", "distance"])
        for i, a in enumerate(sites):
            for j, b in enumerate(sites):
                w.writerow([*_xy(m, a), *_xy(m, b), repr(float(distances[i, j]))])


def read_distance_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (float(v) if k == "distance" else int(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def write_paths_jsonl(path, m: MetricField, paths: Iterable[LatticePath]) -> None:
    with open(path, "w") as fh:
        for p in paths:
            fh.write(json.dumps([list(_xy(m, s)) for s in p.sites]) + "\n")


def read_paths_jsonl(path) -> list[list[list[int]]]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
