"""The acceptance experiments, each returning diagnostic entries.

Every function takes its sample sizes as arguments so the CLI can run
scaled-down versions; the defaults are the full-size settings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse.linalg as spla

from .config import ExperimentConfig, replicate_seed
from .empirical import ProbeDisk, rooted_metric
from .errors import EmptyRenewalError, LqlError
from .field import (
    DirichletVector,
    GridSpec,
    cameron_martin_rn,
    dirichlet_inner,
    dirichlet_laplacian,
    sample_gff,
)
from .metric import MetricField, build_metric, shortest_path
from .pipeline import ReplicateSummary, build_replicate, pmap, size_biased_pairings
from .renewal import AnnulusSchedule, detect_coalescence
from .stats import (
    DiagnosticEntry,
    event_fraction_ci,
    pooled_autocorrelation,
    shortcut_lengths,
    stationarity_ks,
    tail_exponent,
)

PURE = dict(profile_depth=0.0, profile_wall=0.0)


def _seeds(base: int, n: int) -> list[int]:
    return [replicate_seed(base, r) for r in range(n)]


# ------------------------------------------------------ 1. oracle paths
def _enumerate_min(wh, wv, src) -> np.ndarray:
    """Minimum weight over all simple paths from ``src`` to every site (DFS)."""
    h, w = wv.shape[0] + 1, wh.shape[1] + 1
    best = np.full(h * w, np.inf)
    seen = np.zeros(h * w, dtype=bool)

    def nbrs(v):
        r, c = divmod(v, w)
        if r > 0:
            yield v - w, wv[r - 1, c]
        if c > 0:
            yield v - 1, wh[r, c - 1]
        if c < w - 1:
            yield v + 1, wh[r, c]
        if r < h - 1:
            yield v + w, wv[r, c]

    def dfs(v, acc):
        if acc < best[v]:
            best[v] = acc
        seen[v] = True
        for u, wt in nbrs(v):
            if not seen[u]:
                dfs(u, acc + wt)
        seen[v] = False

    dfs(src, 0.0)
    return best


def criterion_oracle(n_draws: int = 20, seed: int = 1, size: int = 4) -> list[DiagnosticEntry]:
    worst = 0.0
    for s in _seeds(seed, n_draws):
        rng = np.random.default_rng(s)
        factors = np.exp(rng.normal(0.0, 1.0, (size, size)))
        m = MetricField.from_factors(factors)
        # oracle edge weights straight from the factors
        wh = 0.5 * (factors[:, :-1] + factors[:, 1:])
        wv = 0.5 * (factors[:-1, :] + factors[1:, :])
        for a in range(size * size):
            ref = _enumerate_min(wh, wv, a)
            for b in range(size * size):
                d, path = shortest_path(m, divmod(a, size), divmod(b, size))
                worst = max(worst, abs(d - ref[b]), abs(m.path_weight(path.sites) - ref[b]))
    return [DiagnosticEntry("c01_oracle_max_abs_err", worst, 1e-12, "le", n=n_draws, seeds=[seed])]


# ------------------------------------------------------- 2. Weyl invariance
def criterion_weyl(n: int = 100, seed: int = 2, grid_n: int = 129, spacing: float = 1 / 16, resolution: int = 9) -> list[DiagnosticEntry]:
    grid = GridSpec(grid_n, spacing)
    disk = ProbeDisk(resolution, 0.5)
    worst = 0.0
    same_paths = 0
    for s in _seeds(seed, n):
        rng = np.random.default_rng([s, 7])
        f = sample_gff(grid, s)
        c = float(rng.uniform(-5, 5))
        rad = rng.uniform(1.0, 0.6 * grid.half_width)
        ang = rng.uniform(0, 2 * math.pi)
        x = grid.point(grid.site((rad * math.cos(ang), rad * math.sin(ang))))
        m0, m1 = build_metric(f), build_metric(f + c)
        a = rooted_metric(m0, x, disk).distances
        b = rooted_metric(m1, x, disk).distances
        worst = max(worst, float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(a)))))
        u = tuple(int(v) for v in rng.integers(0, grid_n, 2))
        v = tuple(int(v) for v in rng.integers(0, grid_n, 2))
        d0, p0 = shortest_path(m0, u, v)
        d1, p1 = shortest_path(m1, u, v)
        if np.array_equal(p0.sites, p1.sites) and abs(d1 - d0 * math.exp(m0.params.xi * c)) <= 1e-12 * d1:
            same_paths += 1
    return [
        DiagnosticEntry("c02_weyl_rooted_metric_max_rel_err", worst, 1e-12, "le", n=n, seeds=[seed]),
        DiagnosticEntry("c02_weyl_paths_unchanged", float(same_paths), float(n), "ge", n=n, seeds=[seed]),
    ]


# ------------------------------------------------------ 3. renewal identities
class _RenewalCheck:
    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, r):
        rep = build_replicate(self.cfg, r)
        d = rep.decomposition
        if d is None:
            return None
        ident = 0.0
        for i in d.complete_scales:
            i = int(i)
            if d.P[i - d.i_min]:
                ident = max(ident, abs(d.g_identity(i) - d.g(i)))
        g = d.G[: d.i_last - d.i_min + 1]
        tele = abs(math.fsum(g) - (math.log(d.L[-1]) - math.log(d.L[0])))
        return ident, tele


def renewal_config(seed: int = 3) -> ExperimentConfig:
    return ExperimentConfig(grid_n=513, spacing=1 / 32, min_inner_sites=8, base_seed=seed)


def criterion_renewal(n: int = 50, seed: int = 3) -> list[DiagnosticEntry]:
    cfg = renewal_config(seed)
    res = [x for x in pmap(_RenewalCheck(cfg), range(n)) if x is not None]
    ident = max((x[0] for x in res), default=math.nan)
    tele = max((x[1] for x in res), default=math.nan)
    note = f"{len(res)} of {n} replicates had a nonempty renewal"
    return [
        DiagnosticEntry("c03_g_identity_max_abs_err", ident, 1e-9, "le", n=len(res), seeds=[seed], note=note),
        DiagnosticEntry("c03_telescoping_max_abs_err", tele, 1e-9, "le", n=len(res), seeds=[seed], note=note),
    ]


# ------------------------------------------------------ 4. Cameron–Martin
def bump_shift(grid: GridSpec, energy: float) -> DirichletVector:
    """Radial bump ``(1 - |z|^2)_+^2`` scaled to the given Dirichlet energy."""
    x, y = grid.coords()
    base = np.clip(1.0 - (x**2 + y**2), 0.0, None) ** 2
    base[0, :] = base[-1, :] = base[:, 0] = base[:, -1] = 0.0
    e0 = dirichlet_inner(DirichletVector(grid, base), DirichletVector(grid, base))
    return DirichletVector(grid, base * math.sqrt(energy / e0))


def criterion_cameron_martin(n: int = 100_000, seed: int = 4, energy: float = 0.5) -> list[DiagnosticEntry]:
    grid = GridSpec(65, 1 / 16)
    f = bump_shift(grid, energy)
    e = dirichlet_inner(f, f)
    rn = np.array([cameron_martin_rn(sample_gff(grid, s), f) for s in _seeds(seed, n)])
    mean, se = rn.mean(), rn.std(ddof=1) / math.sqrt(n)
    m2 = float(np.mean(rn**2))
    return [
        DiagnosticEntry("c04_rn_mean_in_se", abs(mean - 1.0) / se, 3.0, "le", n=n, seeds=[seed], note=f"mean={mean:.5f}"),
        DiagnosticEntry("c04_rn_second_moment_rel_err", abs(m2 / math.exp(e) - 1.0), 0.05, "le", n=n, seeds=[seed], note=f"energy={e:.4f}"),
    ]


# --------------------------------------------------- 5. Brownian structure
def ring_weights(grid: GridSpec, radius: float) -> np.ndarray:
    ring = grid.ring_mask((0.0, 0.0), radius)
    return ring / ring.sum()


def criterion_brownian(n: int = 2000, seed: int = 5, t: float = 0.0) -> list[DiagnosticEntry]:
    grid = GridSpec(257, 1 / 16)
    a = ring_weights(grid, math.exp(t + 1)) - ring_weights(grid, math.exp(t))
    inner = a[1:-1, 1:-1].ravel()
    oracle = 2 * math.pi * float(inner @ spla.spsolve(dirichlet_laplacian(grid).tocsc(), inner))
    inc = np.array([float(np.sum(sample_gff(grid, s).values * a)) for s in _seeds(seed, n)])
    var = float(inc.var(ddof=1))
    return [DiagnosticEntry("c05_increment_var_rel_err", abs(var / oracle - 1.0), 0.2, "le", n=n, seeds=[seed], note=f"var={var:.4f} oracle={oracle:.4f}")]


# ------------------------------------------------ 6. coalescence positivity
class _Coalescence:
    def __init__(self, ks, rho, n_probe):
        self.ks, self.rho, self.n_probe = ks, rho, n_probe

    def __call__(self, s):
        grid = GridSpec(521, 1 / 16)
        m = build_metric(sample_gff(grid, s, "zero-unit-circle"))
        return [detect_coalescence(m, AnnulusSchedule(k, 0, 0), 0, self.n_probe, self.rho).occurred for k in self.ks]


def criterion_coalescence(n: int = 200, seed: int = 6, rho: float = 1e-4, n_probe: int = 4) -> list[DiagnosticEntry]:
    flags = np.array(pmap(_Coalescence((16.0, 4.0), rho, n_probe), _seeds(seed, n)))
    p16, lo16, hi16 = event_fraction_ci(flags[:, 0])
    p4, _, _ = event_fraction_ci(flags[:, 1])
    return [
        DiagnosticEntry("c06_p_coalescence_K16", p16, 0.0, "ci_above", lo16, hi16, n=n, seeds=[seed]),
        DiagnosticEntry("c06_p_K16_minus_p_K4", p16 - p4, 0.0, "gt", n=n, seeds=[seed], note=f"p4={p4:.3f}"),
    ]


# ---------------------------------------------------- 9/10. shortcut events
def criterion_geodesic_shortcut(n_fields: int = 10, roots_per_field: int = 10, seed: int = 9, epsilons=(0.2, 0.04)) -> list[DiagnosticEntry]:
    grid = GridSpec(513, 1 / 32)
    events = 0
    tested = 0
    margin = 0.0
    for s in _seeds(seed, n_fields):
        rng = np.random.default_rng([s, 9])
        m = build_metric(sample_gff(grid, s, "zero-unit-circle"))
        ang = rng.uniform(0, 2 * math.pi)
        q = grid.site((7.5 * math.cos(ang), 7.5 * math.sin(ang)))
        _, path = shortest_path(m, (grid.origin, grid.origin), q)
        pts = (path.sites[:, ::-1] - grid.origin) * grid.spacing
        r = np.hypot(pts[:, 0], pts[:, 1])
        idx = np.flatnonzero((r >= 3.2) & (r <= 4.6))
        if idx.size == 0:
            continue
        for j in idx[np.linspace(0, idx.size - 1, roots_per_field).astype(int)]:
            x = tuple(pts[j])
            for eps in epsilons:
                res = shortcut_lengths(m, eps, x, 0.5 * r[j])
                tested += 1
                events += res.occurred
                margin = max(margin, res.crossing / res.loop)
    return [
        DiagnosticEntry(
            "c09_geodesic_root_shortcuts",
            float(events),
            0.0,
            "le",
            n=tested,
            seeds=[seed],
            note=f"max crossing/loop ratio {margin:.4f}",
        )
    ]


class _TypicalShortcut:
    def __init__(self, epsilons):
        self.epsilons = epsilons

    def __call__(self, s):
        grid = GridSpec(257, 1 / 64)
        m = build_metric(sample_gff(grid, s, "zero-unit-circle"))
        return [shortcut_lengths(m, e, (0.0, 0.0), 1.0) for e in self.epsilons]


def criterion_typical_shortcut(n: int = 200, seed: int = 10, epsilons=(0.2, 0.04)) -> list[DiagnosticEntry]:
    res = pmap(_TypicalShortcut(tuple(epsilons)), _seeds(seed, n))
    events = sum(r.occurred for row in res for r in row)
    ratio = max(r.crossing / r.loop for row in res for r in row)
    return [
        DiagnosticEntry(
            "c10_typical_root_shortcuts",
            float(events),
            1.0,
            "ge",
            n=n,
            seeds=[seed],
            note=f"max crossing/loop ratio {ratio:.4f}",
        )
    ]


# ------------------------------------------------- ensemble criteria 7-13
@dataclass
class EnsembleView:
    """Arrays pulled out of replicate summaries, aligned on the schedule scales."""

    summaries: list

    @property
    def decomposed(self) -> list:
        return [s for s in self.summaries if s.Y is not None]

    def stack(self, attr: str) -> np.ndarray:
        return np.array([getattr(s, attr) for s in self.decomposed])

    @property
    def scales(self) -> np.ndarray:
        return self.decomposed[0].scales


def _windows(scales: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Low and high halves of the scales where ``Y`` is ever defined."""
    defined = np.flatnonzero(np.any(np.isfinite(y), axis=0))
    half = defined.size // 2
    return defined[:half], defined[half:]


def criterion_stationarity(view: EnsembleView, cfg: ExperimentConfig) -> list[DiagnosticEntry]:
    y = view.stack("Y")
    lo, hi = _windows(view.scales, y)
    parts = np.array_split(np.arange(len(y)), cfg.ks_repetitions)
    passes, ps = 0, []
    for part in parts:
        a = y[np.ix_(part, lo)].ravel()
        b = y[np.ix_(part, hi)].ravel()
        a, b = a[a > 0], b[b > 0]
        try:
            _, p = stationarity_ks(a, b)
        except LqlError:
            p = math.nan
        ps.append(p)
        passes += bool(p > cfg.ks_p_min)
    note = f"low scales {view.scales[lo].tolist()}, high {view.scales[hi].tolist()}, p={np.round(ps, 3).tolist()}"
    return [DiagnosticEntry("c07_ks_windows_passing", float(passes), float(cfg.ks_reps_required), "ge", n=len(y), seeds=[cfg.base_seed], note=note)]


def criterion_decay(view: EnsembleView, cfg: ExperimentConfig) -> list[DiagnosticEntry]:
    g = view.stack("G")
    seqs = [row[np.isfinite(row)] for row in g]
    max_lag = max(len(s) for s in seqs) - 1
    if max_lag < 3:
        return [DiagnosticEntry("c08_g_autocorr_lag3plus_in_se", math.nan, cfg.ac_se_mult, "lt", n=len(g), note="fewer than 4 complete scales")]
    ac = pooled_autocorrelation(seqs, max_lag)
    z = np.abs(ac.rho[3:]) / ac.se[3:]
    note = "rho=" + ",".join(f"{v:.3f}" for v in ac.rho) + " pairs=" + ",".join(str(int(v)) for v in ac.n_pairs)
    return [DiagnosticEntry("c08_g_autocorr_lag3plus_in_se", float(np.nanmax(z)), cfg.ac_se_mult, "lt", n=int(ac.n_pairs[3]), seeds=[cfg.base_seed], note=note)]


def criterion_size_bias(view: EnsembleView, cfg: ExperimentConfig, n: int = 500) -> list[DiagnosticEntry]:
    lh = [s.lh_pairs for s in view.decomposed if s.lh_pairs is not None]
    lh = np.concatenate(lh) if lh else np.empty((0, 2))
    lh = lh[np.all(np.isfinite(lh), axis=1)][:n]
    sb = size_biased_pairings(view.decomposed, n, cfg.base_seed)
    sb = sb[np.all(np.isfinite(sb), axis=1)]
    out = []
    for j in range(lh.shape[1]):
        stat, p = stationarity_ks(lh[:, j], sb[:, j])
        out.append(
            DiagnosticEntry(f"c11_ks_distance_phi{j}", stat, cfg.ks_distance_max, "lt", n=min(len(lh), len(sb)), seeds=[cfg.base_seed], note=f"p={p:.3f} n_lh={len(lh)} n_sb={len(sb)}")
        )
    return out


def criterion_tail(view: EnsembleView, cfg: ExperimentConfig) -> list[DiagnosticEntry]:
    y = view.stack("Y").ravel()
    y = y[np.isfinite(y) & (y > 0)]
    est = tail_exponent(y, n_boot=cfg.hill_boot, seed=cfg.base_seed)
    return [DiagnosticEntry("c12_hill_theta", est.theta, 0.0, "ci_above", est.ci_lo, est.ci_hi, n=est.n, seeds=[est.seed], note=f"k={est.k}")]


Z_MIN_REPLICATES = 100


def running_ratio(z_sums: np.ndarray, g_sums: np.ndarray) -> np.ndarray:
    return np.cumsum(z_sums) / np.cumsum(g_sums)


def criterion_z(view: EnsembleView, cfg: ExperimentConfig) -> list[DiagnosticEntry]:
    """Z bound per scale, and drift of the running ratio of summed Z to summed G.

    Replicates without segments enter both running sums as zero, so the ratio
    estimates E[sum Z] / E[sum G] over the whole ensemble.
    """
    members = [s for s in view.decomposed if s.Z is not None]
    excess = -math.inf
    zs, gs = [], []
    for s in view.summaries:
        if s.Z is None or s.G is None:
            zs.append(0j)
            gs.append(0.0)
            continue
        g = s.G[: len(s.Z)]
        excess = max(excess, float(np.max(np.abs(s.Z) - g)))
        zs.append(complex(np.sum(s.Z)))
        gs.append(float(np.sum(g)))
    n_all = len(view.summaries)
    bound = DiagnosticEntry("c13_z_bound_excess", excess, 1e-6, "le", n=len(members), seeds=[cfg.base_seed])
    if n_all < Z_MIN_REPLICATES or not members:
        note = f"needs >= {Z_MIN_REPLICATES} replicates with segments present, got {n_all} ({len(members)} with segments)"
        return [bound, DiagnosticEntry("c13_ratio_drift", math.nan, cfg.ratio_drift_max, "lt", n=n_all, seeds=[cfg.base_seed], note=note)]
    ratio = running_ratio(np.array(zs), np.array(gs))
    tail = ratio[n_all // 2 :]
    drift = float(np.max(np.abs(tail - ratio[-1])) / abs(ratio[-1]))
    note = f"final ratio {ratio[-1]:.4f}; {len(members)} of {n_all} replicates carry segments"
    return [bound, DiagnosticEntry("c13_ratio_drift", drift, cfg.ratio_drift_max, "lt", n=n_all, seeds=[cfg.base_seed], note=note)]


def coalescence_fraction(view: EnsembleView, cfg: ExperimentConfig) -> list[DiagnosticEntry]:
    flags = np.concatenate([s.flags for s in view.summaries if s.flags.size])
    p, lo, hi = event_fraction_ci(flags)
    return [DiagnosticEntry("coalescence_fraction_pooled", p, 0.0, "ci_above", lo, hi, n=int(flags.size), seeds=[cfg.base_seed])]


ENSEMBLE_CRITERIA = {
    7: criterion_stationarity,
    8: criterion_decay,
    11: criterion_size_bias,
    12: criterion_tail,
    13: criterion_z,
}
