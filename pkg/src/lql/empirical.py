"""Rooted environments along the geodesic and the size-biased sampler.

A root ``x`` is viewed through the disk of radius ``delta*|x|`` about it,
dilated to the unit disk.  The field is recentred by its circle average on
the boundary of that disk; the metric is rescaled by
``(delta|x|)^{-xi Q} * exp(-xi * c_x)``.  Adding a constant to the field
changes ``c_x`` by the same constant, so both outputs are exactly invariant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DomainError, EmptyRenewalError, ResolutionError, SupportError
from .field import LatticeField, bilinear, circle_average
from .metric import LatticePath, MetricField
from .renewal import SegmentDecomposition


@dataclass(frozen=True, eq=False)
class ProbeDisk:
    """Regular ``resolution x resolution`` mesh on ``[-1,1]^2`` clipped to the open unit disk."""

    resolution: int = 17
    delta: float = 0.5

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise DomainError(f"delta must lie in (0, 1), got {self.delta}")
        if self.resolution < 3:
            raise DomainError("probe resolution must be at least 3")
        h = 2.0 / (self.resolution - 1)
        ax = -1.0 + h * np.arange(self.resolution)
        xx, yy = np.meshgrid(ax, ax)
        inside = xx**2 + yy**2 < 1.0 - 1e-12
        pts = np.stack([xx[inside], yy[inside]], axis=1)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "cell", h * h)

    def __len__(self) -> int:
        return len(self.points)

    def same_mesh(self, other: "ProbeDisk") -> bool:
        return self.resolution == other.resolution and self.delta == other.delta


@dataclass(frozen=True, eq=False)
class RootedField:
    values: np.ndarray
    root: tuple[float, float]
    t: float
    disk: ProbeDisk
    center_value: float  # c_x


@dataclass(frozen=True, eq=False)
class RootedMetric:
    distances: np.ndarray
    root: tuple[float, float]
    t: float
    disk: ProbeDisk
    sites: np.ndarray  # snapped probe sites


@dataclass(frozen=True, eq=False)
class TestFunctional:
    values: np.ndarray
    weights: np.ndarray
    label: str
    disk: ProbeDisk

    __test__ = False  # keep pytest from collecting this class

    @classmethod
    def bump(cls, disk: ProbeDisk, center=(0.0, 0.0), radius: float = 0.5, label: str | None = None):
        """Smooth ``exp(1 - 1/(1 - |z-c|^2/r^2))`` bump; support must sit inside the disk."""
        c = np.asarray(center, dtype=float)
        if np.hypot(*c) + radius >= 1.0:
            raise SupportError("bump support reaches the unit circle")
        q = np.sum((disk.points - c) ** 2, axis=1) / radius**2
        vals = np.zeros(len(disk))
        inside = q < 1.0
        vals[inside] = np.exp(1.0 - 1.0 / (1.0 - q[inside]))
        return cls(vals, np.full(len(disk), disk.cell), label or f"bump(c={tuple(c)}, r={radius})", disk)

    @classmethod
    def truncated_constant(cls, disk: ProbeDisk, margin: float = 0.2, label: str | None = None):
        """Indicator of ``|z| <= 1 - margin``: constant one away from the boundary."""
        r = np.hypot(disk.points[:, 0], disk.points[:, 1])
        vals = (r <= 1.0 - margin).astype(float)
        return cls(vals, np.full(len(disk), disk.cell), label or f"const(margin={margin})", disk)

    @classmethod
    def annulus_bump(cls, disk: ProbeDisk, inner: float, outer: float = 1.0, label: str | None = None):
        """Smooth radial bump supported in ``inner < |z| < outer``."""
        if not 0 <= inner < outer <= 1:
            raise SupportError("annulus bounds must satisfy 0 <= inner < outer <= 1")
        r = np.hypot(disk.points[:, 0], disk.points[:, 1])
        mid, half = 0.5 * (inner + outer), 0.5 * (outer - inner)
        q = ((r - mid) / half) ** 2
        vals = np.zeros(len(disk))
        inside = q < 1.0
        vals[inside] = np.exp(1.0 - 1.0 / (1.0 - q[inside]))
        return cls(vals, np.full(len(disk), disk.cell), label or f"annulus({inner},{outer})", disk)

    def support_radii(self) -> tuple[float, float]:
        r = np.hypot(self.disk.points[:, 0], self.disk.points[:, 1])[self.values != 0]
        if r.size == 0:
            return (math.nan, math.nan)
        return float(r.min()), float(r.max())


@dataclass(frozen=True, eq=False)
class EmpiricalSample:
    field: RootedField
    metric: RootedMetric | None
    t: float
    frak_t: float
    seed: int
    snap_error: float = 0.0
    member: int = -1


# ----------------------------------------------------------------- rooting
def _disk_radius(x) -> float:
    r = math.hypot(float(x[0]), float(x[1]))
    if r == 0:
        raise DomainError("root must differ from the origin")
    return r


def rooted_field(field: LatticeField, x, disk: ProbeDisk, t: float = math.nan) -> RootedField:
    """Probe values ``h(x + delta|x| z) - c_x`` with ``c_x`` the circle average on ``T_{delta|x|}(x)``."""
    x = (float(x[0]), float(x[1]))
    r = disk.delta * _disk_radius(x)
    cx = circle_average(field, x, r)
    pts = np.asarray(x) + r * disk.points
    vals = bilinear(field.values, field.grid, pts) - cx
    return RootedField(vals, x, t, disk, cx)


def _disk_sites(m: MetricField, x, r: float):
    """Window bounds and mask of sites strictly inside the disk of radius ``r`` about ``x``."""
    grid = m.grid
    sp = grid.spacing
    hw = grid.half_width
    if abs(x[0]) + r > hw + 1e-12 or abs(x[1]) + r > hw + 1e-12:
        raise DomainError(f"disk of radius {r:g} about {x} exits the grid")
    c = grid.origin
    c0 = max(int(math.floor((x[0] - r) / sp)) + c, 0)
    c1 = min(int(math.ceil((x[0] + r) / sp)) + c, grid.n_sites - 1)
    r0 = max(int(math.floor((x[1] - r) / sp)) + c, 0)
    r1 = min(int(math.ceil((x[1] + r) / sp)) + c, grid.n_sites - 1)
    xs = (np.arange(c0, c1 + 1) - c) * sp
    ys = (np.arange(r0, r1 + 1) - c) * sp
    mask = np.hypot(xs[None, :] - x[0], ys[:, None] - x[1]) < r
    return r0, c0, mask


def rooted_metric(m: MetricField, x, disk: ProbeDisk, t: float = math.nan) -> RootedMetric:
    """Rescaled distances between probes, induced in the disk ``D_{delta|x|}(x)``."""
    if m.field is None or m.params is None:
        raise DomainError("rooted metric needs the field and LQG parameters")
    x = (float(x[0]), float(x[1]))
    r = disk.delta * _disk_radius(x)
    cx = circle_average(m.field, x, r)
    r0, c0, mask = _disk_sites(m, x, r)
    h, w = mask.shape
    wh = m.wh[r0 : r0 + h, c0 : c0 + w - 1]
    wv = m.wv[r0 : r0 + h - 1, c0 : c0 + w]
    grid = m.grid
    sites = np.array([grid.site(p) for p in np.asarray(x) + r * disk.points], dtype=np.int64)
    local = (sites[:, 0] - r0) * w + (sites[:, 1] - c0)
    lr, lc = sites[:, 0] - r0, sites[:, 1] - c0
    if np.any(lr < 0) or np.any(lr >= h) or np.any(lc < 0) or np.any(lc >= w) or not np.all(mask[lr, lc]):
        raise ResolutionError(f"probes snap outside the disk of radius {r:g}; refine the lattice")
    xi, xi_q = m.params.xi, m.params.xi_q
    pref = r ** (-xi_q) * math.exp(-xi * cx)
    n = len(local)
    out = np.zeros((n, n))
    cache: dict[int, np.ndarray] = {}
    for a in range(n):
        src = int(local[a])
        if src not in cache:
            cache[src] = _kernels.grid_dijkstra(wh, wv, mask, [src], target=local)
        out[a] = cache[src][local]
    if not np.all(np.isfinite(out)):
        raise ResolutionError("probe sites are disconnected inside the disk")
    # symmetrise against last-bit differences between the two search directions
    out = pref * 0.5 * (out + out.T)
    return RootedMetric(out, x, t, disk, sites)


# ---------------------------------------------------------------- sampling
def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)


def root_at_length(m: MetricField, path: LatticePath, length: float) -> tuple[tuple[float, float], float]:
    """Plane point of the path vertex nearest in chemical length, with the snapping error."""
    j = path.nearest_index(length)
    site = tuple(int(v) for v in path.sites[j])
    return m.grid.point(site), abs(float(path.cumulative[j]) - length)


def empirical_at(
    m: MetricField,
    path: LatticePath,
    frak_t: float,
    disk: ProbeDisk,
    t: float = math.nan,
    seed: int = 0,
    with_metric: bool = False,
    member: int = -1,
) -> EmpiricalSample:
    x, err = root_at_length(m, path, math.exp(frak_t))
    rf = rooted_field(m.field, x, disk, t)
    rm = rooted_metric(m, x, disk, t) if with_metric else None
    return EmpiricalSample(rf, rm, t, frak_t, int(seed), err, member)


def sample_empirical(
    m: MetricField,
    path: LatticePath,
    t: float,
    seed: int,
    disk: ProbeDisk | None = None,
    with_metric: bool = False,
    frak_t: float | None = None,
) -> EmpiricalSample:
    """Root at chemical length ``exp(frak_t)`` with ``frak_t ~ Unif(0, t)``."""
    disk = disk or ProbeDisk()
    t_max = math.log(path.total) if path.total > 0 else -math.inf
    if not t <= t_max + 1e-12:
        raise DomainError(f"t={t:g} exceeds the largest admissible t={t_max:g}")
    if t < 0:
        raise DomainError("t must be nonnegative")
    if frak_t is None:
        frak_t = float(_rng(seed).uniform(0.0, t))
    return empirical_at(m, path, frak_t, disk, t, seed, with_metric)


def size_biased_sample(ensemble, seed: int, disk: ProbeDisk | None = None, with_metric: bool = False) -> EmpiricalSample:
    """Pick a member with probability proportional to ``G_0``, then root inside its scale-0 segment.

    ``ensemble`` holds ``(decomposition, metric)`` pairs (a third element, if
    present, is ignored).
    """
    disk = disk or ProbeDisk()
    members = list(ensemble)
    weights = np.array([g0(item[0]) for item in members])
    total = weights.sum()
    if not total > 0:
        raise EmptyRenewalError("every ensemble member has G_0 = 0")
    rng = _rng(seed)
    k = int(rng.choice(len(members), p=weights / total))
    d, m = members[k][0], members[k][-1]
    j = d.eta(0)
    lo, hi = math.log(d.L[j]), math.log(d.L[j + 1])
    frak_t = float(rng.uniform(lo, hi))
    return empirical_at(m, d.trace.path, frak_t, disk, math.nan, seed, with_metric, member=k)


def g0(d: SegmentDecomposition) -> float:
    """``G`` at the first scale outside the unit disk, 0 where undefined."""
    if not d.i_min <= 0 <= d.i_last:
        return 0.0
    g = d.g(0)
    return g if math.isfinite(g) else 0.0


def selection_weights(ensemble) -> np.ndarray:
    w = np.array([g0(item[0]) for item in ensemble])
    return w / w.sum()


# ---------------------------------------------------------------- pairings
def pair_functional(rf: RootedField, phi: TestFunctional) -> float:
    if not rf.disk.same_mesh(phi.disk) or len(rf.values) != len(phi.values):
        raise DomainError("rooted field and test function live on different meshes")
    return float(np.sum(rf.values * phi.values * phi.weights))


def _root_pieces(path: LatticePath, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    """Path vertices serving as root over log-lengths ``[a, b]`` and their log-length shares."""
    cum = path.cumulative
    k0 = path.nearest_index(math.exp(a))
    k1 = path.nearest_index(math.exp(b))
    ks = np.arange(k0, k1 + 1)
    mids = 0.5 * (cum[:-1] + cum[1:])
    lo = np.log(np.maximum(math.exp(a), np.where(ks > 0, mids[np.maximum(ks - 1, 0)], 0.0)))
    hi = np.log(np.minimum(math.exp(b), np.where(ks < len(cum) - 1, mids[np.minimum(ks, len(mids) - 1)], np.inf)))
    lo[0], hi[-1] = a, b
    return ks, np.maximum(hi - lo, 0.0)


def z_statistic(
    d: SegmentDecomposition,
    m: MetricField,
    lambdas,
    phis,
    disk: ProbeDisk | None = None,
    n_q: int | None = None,
) -> np.ndarray:
    """Per-scale ``Z_i`` over the complete range.

    The root snaps to path vertices, so the integrand is piecewise constant
    in log-length.  By default (``n_q=None``) it is integrated exactly, one
    term per vertex; an integer ``n_q`` uses the midpoint rule instead.
    """
    disk = disk or ProbeDisk()
    lambdas = np.atleast_1d(np.asarray(lambdas, dtype=float))
    phis = list(phis)
    if len(phis) != len(lambdas):
        raise DomainError("need one test function per lambda")
    if n_q is not None and n_q < 1:
        raise DomainError("empty quadrature")
    path = d.trace.path
    grid = m.grid
    cache: dict[int, complex] = {}

    def integrand(k: int) -> complex:
        if k not in cache:
            rf = rooted_field(m.field, grid.point(tuple(int(v) for v in path.sites[k])), disk)
            phase = sum(lam * pair_functional(rf, phi) for lam, phi in zip(lambdas, phis))
            cache[k] = complex(math.cos(phase), math.sin(phase))
        return cache[k]

    out = np.zeros(len(d.complete_scales), dtype=complex)
    for q, i in enumerate(d.complete_scales):
        if d.P[q] == 0:
            continue
        j = d.eta(int(i))
        a, b = math.log(d.L[j]), math.log(d.L[j + 1])
        if n_q is None:
            ks, w = _root_pieces(path, a, b)
        else:
            nodes = a + (np.arange(n_q) + 0.5) * (b - a) / n_q
            ks = np.array([path.nearest_index(math.exp(s)) for s in nodes])
            w = np.full(n_q, (b - a) / n_q)
        if np.all(lambdas == 0):
            out[q] = w.sum()
            continue
        out[q] = sum(wk * integrand(int(k)) for k, wk in zip(ks, w) if wk > 0)
    return out


# ------------------------------------------------------------------ export
def sample_to_json(s: EmpiricalSample) -> dict:
    metric = None
    if s.metric is not None:
        iu = np.triu_indices(len(s.metric.distances), k=1)
        metric = [float(v) for v in s.metric.distances[iu]]
    return {
        "t": None if not math.isfinite(s.t) else float(s.t),
        "frak_t": float(s.frak_t),
        "root": [float(s.field.root[0]), float(s.field.root[1])],
        "field": [float(v) for v in s.field.values],
        "metric": metric,
        "seed": int(s.seed),
    }


def write_samples_jsonl(path, samples) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_json(s)) + "\n")


def read_samples_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
