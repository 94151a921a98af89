"""One replicate end to end: field, metric, coalescence, decomposition, samples."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .empirical import (
    ProbeDisk,
    TestFunctional,
    empirical_at,
    g0,
    pair_functional,
    rooted_field,
    root_at_length,
    z_statistic,
)
from .errors import DomainError, EmptyRenewalError, LqlError
from .field import LatticeField, bottleneck_profile, sample_gff
from .metric import LatticePath, MetricField, build_metric
from .renewal import AnnulusSchedule, GeodesicTrace, SegmentDecomposition, decompose_segments, detect_all, trace_geodesic


def worker_count() -> int:
    cap = os.environ.get("LQL_WORKERS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(int(cap), 1))
        except ValueError:
            pass
    return n


def pmap(fn, items) -> list:
    """Ordered map over a process pool capped by ``LQL_WORKERS``; inline for one worker."""
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ------------------------------------------------------------------ build
def profile_angles(seed: int, lo: int, hi: int) -> dict:
    """Gate angle per scale: a random multiple of pi/2."""
    rng = np.random.default_rng([int(seed) & 0xFFFF_FFFF_FFFF_FFFF, 1])
    return {i: float(rng.integers(4)) * math.pi / 2 for i in range(lo, hi + 1)}


def build_field(cfg: ExperimentConfig, seed: int) -> LatticeField:
    grid = cfg.grid
    f = sample_gff(grid, seed, cfg.normalization)
    if cfg.profile_depth or cfg.profile_wall:
        hw = grid.half_width
        hi = int(math.ceil(math.log(hw * math.sqrt(2)) / math.log(cfg.K))) + 1
        lo = int(math.floor(math.log(grid.spacing / 2) / math.log(cfg.K))) - 1
        prof = bottleneck_profile(grid, cfg.K, cfg.profile_depth, cfg.profile_wall, profile_angles(seed, lo, hi), cfg.profile_width)
        f = f + prof
    return f


@dataclass(eq=False)
class Replicate:
    index: int
    seed: int
    field: LatticeField
    metric: MetricField
    schedule: AnnulusSchedule
    records: list
    trace: GeodesicTrace | None = None
    decomposition: SegmentDecomposition | None = None
    error: str = ""


def build_replicate(cfg: ExperimentConfig, index: int, decompose: bool = True) -> Replicate:
    seed = cfg.seed(index)
    f = build_field(cfg, seed)
    m = build_metric(f, cfg.params)
    sch = AnnulusSchedule.fit(cfg.grid, cfg.K, cfg.min_inner_sites)
    recs = detect_all(m, sch, cfg.n_probe, cfg.rho)
    rep = Replicate(index, seed, f, m, sch, recs)
    if decompose:
        try:
            rep.trace = trace_geodesic(m, recs)
            rep.records = list(rep.trace.records)
            rep.decomposition = decompose_segments(m, rep.trace, sch)
        except EmptyRenewalError as exc:
            rep.error = f"empty renewal: {exc}"
    return rep


# ------------------------------------------------------------ admissibility
def admissible_length(m: MetricField, path: LatticePath, delta: float) -> float:
    """Chemical length up to which every root disk ``D_{delta|x|}(x)`` (with its ring band) fits the grid."""
    grid = m.grid
    pts = (path.sites[:, ::-1] - grid.origin) * grid.spacing
    r = np.hypot(pts[:, 0], pts[:, 1])
    reach = np.maximum(np.abs(pts[:, 0]), np.abs(pts[:, 1])) + delta * r + grid.spacing
    bad = np.flatnonzero(reach > grid.half_width)
    last = (bad[0] - 1) if bad.size else len(path) - 1
    return float(path.cumulative[max(last, 0)])


# ----------------------------------------------------------------- summary
def default_functionals(disk: ProbeDisk) -> list[TestFunctional]:
    return [
        TestFunctional.bump(disk, (0.0, 0.0), 0.5, label="bump0"),
        TestFunctional.bump(disk, (0.3, 0.0), 0.4, label="bump1"),
    ]


@dataclass
class ReplicateSummary:
    """Small, picklable per-replicate output used by the ensemble diagnostics."""

    index: int
    seed: int
    scales: np.ndarray
    flags: np.ndarray  # coalescence after tracing
    P: np.ndarray | None = None
    Y: np.ndarray | None = None
    G: np.ndarray | None = None
    Z: np.ndarray | None = None
    g0: float = 0.0
    sb_pairs: np.ndarray | None = None  # (n_candidates, n_phi) pairings rooted in the scale-0 segment
    lh_pairs: np.ndarray | None = None  # (n_empirical, n_phi) pairings at the largest admissible t
    t_max: float = math.nan
    error: str = ""


def _pairs_at(m, path, frak_ts, disk, phis) -> np.ndarray:
    out = np.full((len(frak_ts), len(phis)), np.nan)
    for a, s in enumerate(frak_ts):
        x, _ = root_at_length(m, path, math.exp(s))
        try:
            rf = rooted_field(m.field, x, disk, s)
        except DomainError:
            continue
        out[a] = [pair_functional(rf, phi) for phi in phis]
    return out


def summarize(cfg: ExperimentConfig, index: int, with_samples: bool = True) -> ReplicateSummary:
    rep = build_replicate(cfg, index)
    scales = rep.schedule.scales
    flags = np.array([r.occurred for r in rep.records], dtype=bool)
    out = ReplicateSummary(index, rep.seed, scales, flags, error=rep.error)
    d = rep.decomposition
    if d is None:
        return out
    out.P, out.Y, out.G = d.P.copy(), d.Y.copy(), d.G.copy()
    out.g0 = g0(d)
    if not with_samples:
        return out
    disk = ProbeDisk(cfg.mesh_resolution, cfg.delta)
    phis = default_functionals(disk)
    m, path = rep.metric, rep.trace.path
    try:
        out.Z = z_statistic(d, m, [1.0], phis[:1], disk, cfg.n_q or None)
    except DomainError as exc:
        out.error = f"Z: {exc}"
    rng = np.random.default_rng([rep.seed & 0xFFFF_FFFF_FFFF_FFFF, 2])
    if out.g0 > 0:
        j = d.eta(0)
        lo, hi = math.log(d.L[j]), math.log(d.L[j + 1])
        out.sb_pairs = _pairs_at(m, path, rng.uniform(lo, hi, cfg.n_candidates), disk, phis)
    length = admissible_length(m, path, cfg.delta)
    if length > 1.0:
        out.t_max = math.log(length)
        out.lh_pairs = _pairs_at(m, path, rng.uniform(0.0, out.t_max, cfg.n_empirical), disk, phis)
    return out


class _Summarize:
    def __init__(self, cfg, with_samples):
        self.cfg, self.with_samples = cfg, with_samples

    def __call__(self, index):
        try:
            return summarize(self.cfg, index, self.with_samples)
        except LqlError as exc:
            return ReplicateSummary(index, self.cfg.seed(index), np.array([]), np.array([], dtype=bool), error=repr(exc))


def ensemble(cfg: ExperimentConfig, n: int | None = None, with_samples: bool = True, start: int = 0) -> list[ReplicateSummary]:
    n = cfg.n_replicates if n is None else n
    return pmap(_Summarize(cfg, with_samples), range(start, start + n))


def size_biased_pairings(summaries, n: int, seed: int) -> np.ndarray:
    """``n`` size-biased pairings: members drawn with probability proportional to ``G_0``.

    Each member carries a pool of pre-drawn roots uniform on its scale-0
    segment; the k-th selection of a member uses its k-th root.  Running a
    pool dry raises rather than silently reusing roots.
    """
    members = [s for s in summaries if s.g0 > 0 and s.sb_pairs is not None]
    if not members:
        raise EmptyRenewalError("every ensemble member has G_0 = 0")
    w = np.array([s.g0 for s in members])
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(members), size=n, p=w / w.sum())
    used = np.zeros(len(members), dtype=np.int64)
    rows = []
    for k in picks:
        pool = members[k].sb_pairs
        if used[k] >= len(pool):
            raise DomainError(f"candidate pool of member {members[k].index} exhausted; raise n_candidates")
        rows.append(pool[used[k]])
        used[k] += 1
    return np.array(rows)
