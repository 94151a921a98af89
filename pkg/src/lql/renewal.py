"""Coalescence detection and the renewal decomposition of the origin geodesic.

Scales are ``s_i = k**i`` in plane units (the unit circle has radius 1).
At scale ``i`` the detector works in the open annulus ``(k^{1/8} s, k s)``
with probe rings at ``k^{1/4} s`` and ``k^{1/2} s``.  A coalescence point at
scale ``i`` starts the segment that ends at the next detected point, so the
last detected scale opens no segment.

The past before the innermost scale ``i_min`` is summarised by one virtual
term of weight ``V = L_0 * s_{i_min}^{-xi Q} * exp(-xi B(log s_{i_min}))``
indexed ``i_min - 1``; with it the truncated sums reproduce ``log L``
differences exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import _kernels
from .errors import DomainError, EmptyRenewalError, ResolutionError, UndefinedStatisticError
from .field import GridSpec, circle_average
from .metric import LatticePath, MetricField, path_from_flat, shortest_path

REL_TOL = 1e-9


@dataclass(frozen=True)
class AnnulusSchedule:
    k: float
    i_min: int
    i_max: int

    def __post_init__(self):
        if not self.k > 1:
            raise DomainError(f"k must exceed 1, got {self.k}")
        if self.i_max < self.i_min:
            raise DomainError("i_max < i_min")

    @property
    def scales(self) -> np.ndarray:
        return np.arange(self.i_min, self.i_max + 1)

    def radius(self, i: int) -> float:
        return float(self.k) ** int(i)

    def radii(self) -> np.ndarray:
        return np.array([self.radius(i) for i in self.scales])

    def check_grid(self, grid: GridSpec) -> None:
        if self.radius(self.i_max) * self.k + 0.5 * grid.spacing > grid.half_width + 1e-12:
            raise DomainError(
                f"outer radius k*s_imax={self.radius(self.i_max) * self.k:g} exceeds grid half-width {grid.half_width:g}"
            )

    @classmethod
    def fit(cls, grid: GridSpec, k: float, min_inner_sites: float = 6.0) -> "AnnulusSchedule":
        """Widest schedule whose annuli fit the grid and resolve the inner radius."""
        i_max = math.floor(math.log((grid.half_width - 0.5 * grid.spacing) / k) / math.log(k) + 1e-9)
        i_min = math.ceil(math.log(min_inner_sites * grid.spacing / k**0.125) / math.log(k) - 1e-9)
        if i_min > i_max:
            raise DomainError(f"grid too small for any k={k} annulus")
        return cls(float(k), int(i_min), int(i_max))


@dataclass(frozen=True)
class CoalescenceRecord:
    scale: int
    occurred: bool
    point: tuple[int, int] | None
    rho: float
    normalized_clearance: float | None = None
    n_common: int = 0
    contained: bool = False
    note: str = ""


@dataclass(frozen=True)
class AnnulusGeometry:
    """Annulus radii plus masks cropped to its bounding window."""

    inner: float
    probe_in: float
    probe_out: float
    outer: float
    row0: int
    col0: int
    mask: np.ndarray
    boundary_layer: np.ndarray
    radius: np.ndarray

    def local(self, site) -> tuple[int, int]:
        return (site[0] - self.row0, site[1] - self.col0)

    def global_site(self, local) -> tuple[int, int]:
        return (int(local[0]) + self.row0, int(local[1]) + self.col0)


def annulus_geometry(grid: GridSpec, schedule: AnnulusSchedule, i: int) -> AnnulusGeometry:
    s = schedule.radius(i)
    k = schedule.k
    outer = k * s
    if outer > grid.half_width + 1e-12:
        raise DomainError(f"annulus of scale {i} (outer radius {outer:g}) exits the grid")
    reach = min(int(math.ceil(outer / grid.spacing)) + 1, grid.origin)
    lo, hi = grid.origin - reach, grid.origin + reach + 1
    ax = (np.arange(lo, hi) - grid.origin) * grid.spacing
    rad = np.hypot(ax[None, :], ax[:, None])
    inner = k**0.125 * s
    mask = (rad > inner) & (rad < outer)
    # sites of the annulus with a lattice neighbour outside it
    pad = np.pad(mask, 1, constant_values=False)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    layer = mask & ~interior
    return AnnulusGeometry(inner, k**0.25 * s, k**0.5 * s, outer, lo, lo, mask, layer, rad)


def crop_weights(m: MetricField, geo: AnnulusGeometry) -> tuple[np.ndarray, np.ndarray]:
    h, w = geo.mask.shape
    r0, c0 = geo.row0, geo.col0
    return m.wh[r0 : r0 + h, c0 : c0 + w - 1], m.wv[r0 : r0 + h - 1, c0 : c0 + w]


def probe_sites(grid: GridSpec, radius: float, n_probe: int) -> list[tuple[int, int]]:
    """``n_probe`` equispaced sites on the circle of ``radius`` (angle 0 first)."""
    out = []
    for j in range(n_probe):
        a = 2.0 * math.pi * j / n_probe
        out.append(grid.site((radius * math.cos(a), radius * math.sin(a))))
    if len(set(out)) < n_probe:
        raise ResolutionError(f"{n_probe} probes on radius {radius:g} collide at spacing {grid.spacing:g}")
    return out


def _xi_q(m: MetricField) -> tuple[float, float]:
    if m.params is None:
        raise DomainError("metric carries no LQG parameters")
    return m.params.xi, m.params.xi_q


def geodesic_cut(du, dv, total, wh, wv, mask, rtol=1e-10):
    """Flat masks of sites on some geodesic and on every geodesic between two sites.

    ``du`` and ``dv`` are distances from the two ends.  A site of the geodesic
    DAG is on every geodesic iff it is alone at its distance level and no DAG
    edge jumps across that level.
    """
    tol = rtol * total
    dag = mask.ravel() & (np.abs(du + dv - total) <= tol)
    dg, d2 = dag.reshape(mask.shape), du.reshape(mask.shape)
    lo, hi = [], []
    for a, b, ga, gb, w in (
        (d2[:, :-1], d2[:, 1:], dg[:, :-1], dg[:, 1:], wh),
        (d2[:-1, :], d2[1:, :], dg[:-1, :], dg[1:, :], wv),
    ):
        on = ga & gb
        a, b, w = a[on], b[on], w[on]
        e = np.abs(np.abs(b - a) - w) <= tol
        lo.append(np.minimum(a, b)[e])
        hi.append(np.maximum(a, b)[e])
    lo, hi = np.concatenate(lo), np.concatenate(hi)
    sites = np.flatnonzero(dag)
    t = du[sites]
    order = np.argsort(t, kind="stable")
    ts = t[order]
    gap = np.diff(ts) > tol
    alone = np.ones(ts.size, dtype=bool)
    alone[1:] &= gap
    alone[:-1] &= gap
    eo = np.argsort(lo, kind="stable")
    reach = np.maximum.accumulate(hi[eo]) if eo.size else np.empty(0)
    k = np.searchsorted(lo[eo], ts - tol, side="left")
    spanned = np.zeros(ts.size, dtype=bool)
    has = k > 0
    spanned[has] = reach[k[has] - 1] > ts[has] + tol
    every = np.zeros(mask.size, dtype=bool)
    every[sites[order[alone & ~spanned]]] = True
    return dag, every


def detect_coalescence(
    m: MetricField,
    schedule: AnnulusSchedule,
    i: int,
    n_probe: int = 8,
    rho: float = 0.01,
) -> CoalescenceRecord:
    """Decide the lattice coalescence event at scale ``i``.

    Geodesics between all inner/outer probe pairs are computed inside the
    annulus, ties included.  The event needs (a) no geodesic touches the
    annulus boundary layer, (b) a site common to all geodesics strictly
    between the probe rings, (c) normalised clearance from that site to the outer probe ring at
    least ``rho``.
    """
    if n_probe < 1:
        raise DomainError("n_probe must be positive")
    grid = m.grid
    geo = annulus_geometry(grid, schedule, i)
    mask = geo.mask
    ncols = mask.shape[1]
    wh, wv = crop_weights(m, geo)

    def lflat(site):
        r, c = geo.local(site)
        return r * ncols + c

    inner_p = probe_sites(grid, geo.probe_in, n_probe)
    outer_p = probe_sites(grid, geo.probe_out, n_probe)
    for p in inner_p + outer_p:
        if not mask[geo.local(p)]:
            raise ResolutionError(f"probe {p} falls outside the annulus at scale {i}")

    half = 0.5 * grid.spacing
    between = ((geo.radius > geo.probe_in + half) & (geo.radius < geo.probe_out - half)).ravel()
    layer = geo.boundary_layer.ravel()
    inner_flat = [lflat(u) for u in inner_p]
    outer_flat = [lflat(v) for v in outer_p]
    from_in = [_kernels.grid_dijkstra(wh, wv, mask, [fu], target=outer_flat) for fu in inner_flat]
    common = np.ones(mask.size, dtype=bool)
    contained = True
    single = None
    for fv in outer_flat:
        dist = _kernels.grid_dijkstra(wh, wv, mask, [fv], target=inner_flat)
        for fu, du in zip(inner_flat, from_in):
            if not np.isfinite(dist[fu]):
                return CoalescenceRecord(i, False, None, rho, note="probes disconnected in annulus")
            # ties make geodesics non-unique: test every one of them, not just the canonical
            dag, every = geodesic_cut(du, dist, float(dist[fu]), wh, wv, mask)
            contained &= not (layer & dag).any()
            common &= every
            if n_probe == 1:
                single = _kernels.walk_path(dist, wh, wv, mask, fu, fv)

    if n_probe == 1:
        sites = [m.flat(geo.global_site(divmod(int(f), ncols))) for f in single]
        path = path_from_flat(m, np.array(sites))
        j = path.nearest_index(0.5 * path.total)
        cands = [lflat(path.sites[j])]
    else:
        # local row-major order agrees with global lexicographic order
        cands = [int(c) for c in np.flatnonzero(common & between)]
    if not cands:
        return CoalescenceRecord(i, False, None, rho, contained=contained, note="no common site")
    point = geo.global_site(divmod(cands[0], ncols))

    s = schedule.radius(i)
    xi, xi_q = _xi_q(m)
    b = circle_average(m.field, (0.0, 0.0), s)
    ring = (np.abs(geo.radius - geo.probe_out) <= half) & mask
    dring = _kernels.grid_dijkstra(wh, wv, mask, np.flatnonzero(ring), target=cands[0])
    clearance = s ** (-xi_q) * math.exp(-xi * b) * float(dring[cands[0]])
    ok = contained and clearance >= rho
    note = "" if ok else ("geodesic touches annulus boundary" if not contained else "clearance below rho")
    return CoalescenceRecord(i, bool(ok), point, rho, clearance, len(cands), contained, note)


def detect_all(m: MetricField, schedule: AnnulusSchedule, n_probe: int = 8, rho: float = 0.01) -> list[CoalescenceRecord]:
    return [detect_coalescence(m, schedule, int(i), n_probe, rho) for i in schedule.scales]


# ------------------------------------------------------------------ tracing
@dataclass(frozen=True, eq=False)
class GeodesicTrace:
    path: LatticePath
    records: tuple[CoalescenceRecord, ...]
    point_index: np.ndarray  # vertex index of each kept point on ``path``

    @property
    def points(self) -> list[tuple[int, int]]:
        return [r.point for r in self.records if r.occurred]


def trace_geodesic(m: MetricField, records) -> GeodesicTrace:
    """Geodesic from the origin through the detected coalescence points.

    Points are kept from the outermost inward while ``d(0,p) + d(p,next)``
    equals ``d(0,next)`` to ``1e-9`` relative; a point failing the check is
    demoted (its record flips to ``occurred=False``).  The kept chain is then
    globally geodesic and the concatenated per-segment paths form one
    geodesic from the origin.
    """
    records = sorted(records, key=lambda r: r.scale)
    hits = [r for r in records if r.occurred]
    if not hits:
        raise EmptyRenewalError("no coalescence point detected")
    grid = m.grid
    origin = (grid.origin, grid.origin)
    full = np.ones(m.shape, dtype=bool)
    d0 = _kernels.grid_dijkstra(m.wh, m.wv, full, [m.flat(origin)])

    kept = [hits[-1]]
    demoted = set()
    for r in reversed(hits[:-1]):
        nxt = kept[-1].point
        if r.point == nxt:
            demoted.add(r.scale)
            continue
        dseg, _ = shortest_path(m, r.point, nxt)
        lhs = d0[m.flat(r.point)] + dseg
        rhs = d0[m.flat(nxt)]
        if abs(lhs - rhs) <= REL_TOL * rhs:
            kept.append(r)
        else:
            demoted.add(r.scale)
    kept.reverse()

    chain = [origin] + [r.point for r in kept]
    sites, cum = [np.array([origin])], [np.array([0.0])]
    offset = 0.0
    idx = []
    for a, b in zip(chain[:-1], chain[1:]):
        _, p = shortest_path(m, a, b)
        sites.append(p.sites[1:])
        cum.append(p.cumulative[1:] + offset)
        offset += p.total
        idx.append(sum(len(s) for s in sites) - 1)
    path = LatticePath(np.concatenate(sites), np.concatenate(cum))
    total = float(d0[m.flat(chain[-1])])
    if abs(path.total - total) > REL_TOL * max(total, 1e-300):
        raise RuntimeError(f"traced chain length {path.total!r} differs from d(0, p_last) = {total!r}")
    if len({tuple(s) for s in path.sites}) != len(path):
        raise RuntimeError("traced geodesic revisits a site")

    new = tuple(
        replace(r, occurred=False, note="demoted: not on the origin geodesic") if r.scale in demoted else r
        for r in records
    )
    return GeodesicTrace(path, new, np.array(idx, dtype=np.int64))


# ------------------------------------------------------------ decomposition
@dataclass(frozen=True, eq=False)
class SegmentDecomposition:
    """Per-scale renewal statistics; arrays are indexed by ``i - i_min``."""

    schedule: AnnulusSchedule
    xi: float
    xi_q: float
    P: np.ndarray
    points: list  # j-indexed coalescence sites
    point_scales: np.ndarray  # iota: j -> scale
    L: np.ndarray  # L_j = D(0, p_j)
    Y: np.ndarray
    G: np.ndarray
    D: np.ndarray
    B: np.ndarray  # B(log s_i) for i_min..i_max+1
    virtual: float
    i_last: int  # last scale with defined Y/G
    trace: GeodesicTrace | None = dc_field(default=None)
    containment: tuple = ()

    @property
    def i_min(self) -> int:
        return self.schedule.i_min

    @property
    def complete_scales(self) -> np.ndarray:
        return np.arange(self.i_min, self.i_last + 1)

    def _k(self, i: int) -> int:
        if not self.i_min <= i <= self.schedule.i_max:
            raise DomainError(f"scale {i} outside [{self.i_min}, {self.schedule.i_max}]")
        return i - self.i_min

    def eta(self, i: int) -> int:
        return int(self.P[: self._k(i) + 1].sum()) - 1

    def iota(self, j: int) -> int:
        return int(self.point_scales[j])

    def y(self, i: int) -> float:
        return float(self.Y[self._k(i)])

    def g(self, i: int) -> float:
        return float(self.G[self._k(i)])

    def d(self, i: int) -> float:
        return float(self.D[self._k(i)])

    def weight(self, j: int, i: int) -> float:
        """``Y_j * exp(sum_{k=j}^{i-1} D_k)``; ``j = i_min - 1`` is the virtual term."""
        lo = max(j, self.i_min)
        expo = float(np.sum(self.D[lo - self.i_min : i - self.i_min]))
        y = self.virtual if j == self.i_min - 1 else self.y(j)
        return y * math.exp(expo)

    def past_sum(self, i: int, lo: int, hi: int) -> float:
        return math.fsum(self.weight(j, i) for j in range(max(lo, self.i_min - 1), hi + 1))

    def g_identity(self, i: int) -> float:
        """``G_i`` recomputed from ``Y`` and ``D`` over the whole (truncated) past."""
        self._check_complete(i)
        den = self.past_sum(i, self.i_min - 1, i - 1)
        return math.log1p(self.y(i) / den)

    def _check_complete(self, i: int) -> None:
        if not self.i_min <= i <= self.i_last:
            raise DomainError(f"scale {i} outside the complete range [{self.i_min}, {self.i_last}]")


def decompose_segments(m: MetricField, trace: GeodesicTrace, schedule: AnnulusSchedule) -> SegmentDecomposition:
    xi, xi_q = _xi_q(m)
    scales = schedule.scales
    recs = {r.scale: r for r in trace.records}
    P = np.array([1 if recs.get(int(i)) is not None and recs[int(i)].occurred else 0 for i in scales], dtype=np.int64)
    kept = [recs[int(i)] for i in scales if recs.get(int(i)) is not None and recs[int(i)].occurred]
    if not kept:
        raise EmptyRenewalError("no coalescence point survives tracing")
    if len(kept) != len(trace.point_index):
        raise RuntimeError("trace and records disagree on the number of points")
    L = trace.path.cumulative[trace.point_index].copy()
    if np.any(np.diff(L) <= 0) or L[0] <= 0:
        raise RuntimeError("coalescence lengths are not strictly increasing")

    radii = [schedule.radius(int(i)) for i in range(schedule.i_min, schedule.i_max + 2)]
    B = np.array([circle_average(m.field, (0.0, 0.0), r) for r in radii])
    logk = math.log(schedule.k)
    D = xi * (B[:-1] - B[1:]) - xi_q * logk

    n = len(scales)
    Y = np.full(n, np.nan)
    G = np.full(n, np.nan)
    eta = np.cumsum(P) - 1
    last_scale = kept[-1].scale
    for k, i in enumerate(scales):
        if i >= last_scale:
            break
        if P[k] == 0:
            Y[k] = 0.0
            G[k] = 0.0
            continue
        j = eta[k]
        seg = L[j + 1] - L[j]
        Y[k] = radii[k] ** (-xi_q) * math.exp(-xi * B[k]) * seg
        G[k] = math.log(L[j + 1]) - math.log(L[j])
    virtual = L[0] * radii[0] ** (-xi_q) * math.exp(-xi * B[0])

    rad = m.grid.radius().ravel()
    containment = []
    bounds = [0.0] + [schedule.radius(r.scale) * schedule.k**0.125 for r in kept]
    tops = [schedule.radius(r.scale) * schedule.k for r in kept]
    idx = np.concatenate([[0], trace.point_index])
    for j in range(1, len(kept)):
        seg = trace.path.sites[idx[j] : idx[j + 1] + 1]
        rr = rad[seg[:, 0] * m.shape[1] + seg[:, 1]]
        containment.append(bool(rr.min() > bounds[j] and rr.max() < tops[j]))

    return SegmentDecomposition(
        schedule=schedule,
        xi=xi,
        xi_q=xi_q,
        P=P,
        points=[r.point for r in kept],
        point_scales=np.array([r.scale for r in kept], dtype=np.int64),
        L=L,
        Y=Y,
        G=G,
        D=D,
        B=B,
        virtual=float(virtual),
        i_last=int(last_scale - 1),
        trace=trace,
        containment=tuple(containment),
    )


def finitary_g(d: SegmentDecomposition, m: int, i: int) -> float:
    """Truncated ``G`` using only the past window ``[i-1-m, i-1]``."""
    if m < 0:
        raise DomainError("m must be nonnegative")
    d._check_complete(i)
    lo = i - 1 - m
    window = range(max(lo, d.i_min - 1), i)
    if not any((d.virtual if j == d.i_min - 1 else d.y(j)) > 0 for j in window):
        return 0.0
    den = d.past_sum(i, lo, i - 1)
    return math.log1p(d.y(i) / den)


def alpha_ratio(d: SegmentDecomposition, m: int, n: int) -> float:
    """Share of the weighted past sum carried by scales ``<= n-1-m``."""
    if m < 0:
        raise DomainError("m must be nonnegative")
    if not d.i_min <= n <= d.i_last + 1:
        raise DomainError(f"n={n} outside [{d.i_min}, {d.i_last + 1}]")
    den = d.past_sum(n, d.i_min - 1, n - 1)
    if not den > 0:
        raise UndefinedStatisticError("no positive past term")
    return d.past_sum(n, d.i_min - 1, n - 1 - m) / den


# ------------------------------------------------------------------ export
def write_decomposition(path, d: SegmentDecomposition, grid: GridSpec, sidecar: dict | None = None) -> None:
    """CSV ``i,P_i,p_x,p_y,Y_i,L_eta_i,G_i,D_i``; JSON sidecar next to it."""

    def cell(x):
        return "" if x is None or (isinstance(x, float) and not math.isfinite(x)) else repr(float(x))

    recs = {}
    if d.trace is not None:
        recs = {r.scale: r for r in d.trace.records}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "P_i", "p_x", "p_y", "Y_i", "L_eta_i", "G_i", "D_i"])
        for k, i in enumerate(d.schedule.scales):
            i = int(i)
            px = py = ""
            r = recs.get(i)
            if d.P[k] and r is not None:
                px, py = r.point[1] - grid.origin, r.point[0] - grid.origin
            e = d.eta(i)
            w.writerow([i, int(d.P[k]), px, py, cell(d.Y[k]), cell(d.L[e]) if e >= 0 else "", cell(d.G[k]), cell(d.D[k])])
    meta = {"k": d.schedule.k, "i_min": d.schedule.i_min, "i_max": d.schedule.i_max}
    meta.update(sidecar or {})
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def read_decomposition(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
