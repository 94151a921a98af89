"""Diagnostics: KS stationarity, autocorrelation decay, Hill tails, Hölder
events, shortcut (singularity) events, event counting and decorrelation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
from scipy import stats as sps

from . import _kernels
from .errors import (
    ConfigurationError,
    DomainError,
    InsufficientDataError,
    ResolutionError,
    SupportError,
    UndefinedStatisticError,
)
from .metric import DEFAULT_PARAMS, LqgParams, MetricField

# Named thresholds.  These are conventions of this package, not derived values.
KS_P_MIN = 0.01
KS_REPS_REQUIRED = 8
AC_SE_MULT = 2.0
KS_DISTANCE_MAX = 0.15


# ------------------------------------------------------------------ report
_RULES = ("le", "lt", "ge", "gt", "ci_above", "report")


@dataclass
class DiagnosticEntry:
    """One statistic.  ``rule`` says how ``pass`` follows from value and tolerance:

    ``le``/``lt``: value <= / < tolerance; ``ge``/``gt``: value >= / > tolerance;
    ``ci_above``: ci_lo > tolerance; ``report``: no pass/fail (always true).
    """

    name: str
    value: float
    tolerance: float
    rule: str
    ci_lo: float | None = None
    ci_hi: float | None = None
    n: int = 0
    seeds: list = dc_field(default_factory=list)
    note: str = ""

    def __post_init__(self):
        if self.rule not in _RULES:
            raise ConfigurationError(f"unknown rule {self.rule!r}")

    @property
    def passed(self) -> bool:
        v, t = self.value, self.tolerance
        if self.rule == "report":
            return True
        if self.rule == "ci_above":
            return self.ci_lo is not None and self.ci_lo > t
        if v is None or not math.isfinite(v):
            return False
        return {"le": v <= t, "lt": v < t, "ge": v >= t, "gt": v > t}[self.rule]

    def to_json(self) -> dict:
        d = asdict(self)
        d["pass"] = bool(self.passed)
        d["n"] = int(d["n"])
        d["seeds"] = [int(x) for x in d["seeds"]]
        for k in ("value", "tolerance", "ci_lo", "ci_hi"):
            if d[k] is not None:
                d[k] = float(d[k]) if math.isfinite(d[k]) else None
        return d


@dataclass
class DiagnosticReport:
    entries: list = dc_field(default_factory=list)

    def add(self, entry: DiagnosticEntry) -> DiagnosticEntry:
        self.entries.append(entry)
        return entry

    @property
    def all_pass(self) -> bool:
        return all(e.passed for e in self.entries)

    def to_json(self) -> list:
        return [e.to_json() for e in self.entries]

    def dump(self, path) -> None:
        text = json.dumps(self.to_json(), indent=2)
        with open(path, "w") as fh:
            fh.write(text + "\n")

    @classmethod
    def load(cls, path) -> "DiagnosticReport":
        with open(path) as fh:
            raw = json.load(fh)
        out = cls()
        for d in raw:
            d = dict(d)
            d.pop("pass", None)
            for k in ("value", "tolerance"):
                if d.get(k) is None:
                    d[k] = math.nan
            out.add(DiagnosticEntry(**d))
        return out


# ------------------------------------------------------------ stationarity
def stationarity_ks(a, b) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise InsufficientDataError("KS needs two nonempty samples")
    with np.errstate(divide="ignore", invalid="ignore"):
        res = sps.ks_2samp(a, b, method="asymp")
    stat, p = float(res.statistic), float(res.pvalue)
    if not math.isfinite(p):
        # effective size rounds to zero (one point each): fall back to the limiting law
        en = a.size * b.size / (a.size + b.size)
        p = 1.0 if stat == 0 else float(sps.kstwobign.sf(stat * math.sqrt(en)))
    return stat, min(max(p, 0.0), 1.0)


# ---------------------------------------------------------- autocorrelation
@dataclass(frozen=True)
class AutocorrelationResult:
    lags: np.ndarray
    rho: np.ndarray
    n: int
    rate: float  # fitted exponential decay rate, nan when fewer than 2 usable lags

    @property
    def se(self) -> float:
        return 1.0 / math.sqrt(self.n)


def autocorrelation_decay(seq, max_lag: int) -> AutocorrelationResult:
    x = np.asarray(seq, dtype=float).ravel()
    n = x.size
    if max_lag < 1 or n <= 4 * max_lag:
        raise InsufficientDataError(f"need more than 4*max_lag={4 * max_lag} observations, got {n}")
    xc = x - x.mean()
    denom = float(np.dot(xc, xc))
    if denom == 0:
        raise UndefinedStatisticError("constant sequence has no autocorrelation")
    rho = np.empty(max_lag + 1)
    rho[0] = 1.0
    for lag in range(1, max_lag + 1):
        rho[lag] = float(np.dot(xc[:-lag], xc[lag:])) / denom
    return AutocorrelationResult(np.arange(max_lag + 1), rho, n, _fit_rate(rho, n))


def _fit_rate(rho: np.ndarray, n: int) -> float:
    lags = np.arange(1, rho.size)
    keep = np.abs(rho[1:]) > 2.0 / math.sqrt(n)
    if keep.sum() < 2:
        return math.nan
    slope = np.polyfit(lags[keep], np.log(np.abs(rho[1:][keep])), 1)[0]
    return float(-slope)


@dataclass(frozen=True)
class PooledAutocorrelation:
    lags: np.ndarray
    rho: np.ndarray
    n_pairs: np.ndarray

    @property
    def se(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 1.0 / np.sqrt(self.n_pairs)


def pooled_autocorrelation(sequences, max_lag: int) -> PooledAutocorrelation:
    """Autocorrelation of several short stationary sequences sharing one law.

    Mean and variance are pooled over all finite entries; lag-``l`` products
    are pooled over every within-sequence pair.  NaN entries are skipped.
    """
    seqs = [np.asarray(s, dtype=float).ravel() for s in sequences]
    allv = np.concatenate([s[np.isfinite(s)] for s in seqs]) if seqs else np.array([])
    if allv.size < 2:
        raise InsufficientDataError("pooled autocorrelation needs at least two values")
    mu = allv.mean()
    var = float(np.mean((allv - mu) ** 2))
    if var == 0:
        raise UndefinedStatisticError("constant values have no autocorrelation")
    rho = np.full(max_lag + 1, np.nan)
    counts = np.zeros(max_lag + 1, dtype=np.int64)
    rho[0] = 1.0
    counts[0] = allv.size
    for lag in range(1, max_lag + 1):
        prods = []
        for s in seqs:
            if s.size > lag:
                a, b = s[:-lag], s[lag:]
                ok = np.isfinite(a) & np.isfinite(b)
                prods.append((a[ok] - mu) * (b[ok] - mu))
        p = np.concatenate(prods) if prods else np.array([])
        counts[lag] = p.size
        if p.size:
            rho[lag] = float(p.mean() / var)
    return PooledAutocorrelation(np.arange(max_lag + 1), rho, counts)


# -------------------------------------------------------------------- tails
@dataclass(frozen=True)
class TailEstimate:
    theta: float
    ci_lo: float
    ci_hi: float
    k: int
    n: int
    seed: int


def hill(x: np.ndarray, k: int) -> float:
    xs = np.sort(x)
    top = xs[-k:]
    thresh = xs[-k - 1]
    mean_log = float(np.mean(np.log(top)) - math.log(thresh))
    if mean_log <= 0:
        raise UndefinedStatisticError("Hill estimator undefined: top order statistics are tied")
    return 1.0 / mean_log


def tail_exponent(samples, k: int | None = None, n_boot: int = 1000, seed: int = 0, level: float = 0.95) -> TailEstimate:
    """Hill estimate of the tail exponent from the top ``k`` order statistics, with a bootstrap CI."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 50:
        raise InsufficientDataError(f"tail estimation needs >= 50 samples, got {x.size}")
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise DomainError("tail samples must be positive and finite")
    n = x.size
    if k is None:
        k = max(n // 20, 2)
    if not 1 <= k < n / 2:
        raise DomainError(f"k={k} must satisfy 1 <= k < n/2")
    theta = hill(x, k)
    rng = np.random.default_rng(seed)
    boots = []
    for _ in range(n_boot):
        try:
            boots.append(hill(x[rng.integers(0, n, n)], k))
        except UndefinedStatisticError:
            boots.append(math.inf)
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(np.array(boots), [a, 1.0 - a])
    return TailEstimate(theta, float(lo), float(hi), int(k), int(n), int(seed))


# ------------------------------------------------------------------- Hölder
@dataclass(frozen=True)
class HolderConfig:
    chi: float
    chi_prime: float
    frak_d: float
    params: LqgParams = DEFAULT_PARAMS

    def __post_init__(self):
        crit = self.params.xi * (self.params.q - 2.0)
        if not 0 < self.chi < crit < self.chi_prime:
            raise ConfigurationError(f"need 0 < chi < xi(Q-2) = {crit:.6g} < chi_prime")
        if not 0 < self.frak_d < 1:
            raise ConfigurationError("frak_d must lie in (0, 1)")


def holder_check(rm, cfg: HolderConfig) -> bool:
    """``|u-v|^chi' <= d(u,v) <= |u-v|^chi`` for every probe pair within ``frak_d``."""
    pts = rm.disk.points
    diff = pts[:, None, :] - pts[None, :, :]
    eu = np.hypot(diff[..., 0], diff[..., 1])
    iu = np.triu_indices(len(pts), k=1)
    e = eu[iu]
    d = np.asarray(rm.distances)[iu]
    sel = e <= cfg.frak_d
    if not sel.any():
        return True
    e, d = e[sel], d[sel]
    return bool(np.all(e**cfg.chi_prime <= d) and np.all(d <= e**cfg.chi))


# ---------------------------------------------------------------- shortcuts
@dataclass(frozen=True)
class ShortcutResult:
    occurred: bool
    loop: float
    crossing: float
    epsilon: float


def _disk_window(m: MetricField, center, radius: float):
    grid = m.grid
    sp_ = grid.spacing
    if abs(center[0]) + radius > grid.half_width + 1e-12 or abs(center[1]) + radius > grid.half_width + 1e-12:
        raise DomainError("disk exits the grid")
    c = grid.origin
    c0 = int(math.floor((center[0] - radius) / sp_)) + c
    c1 = int(math.ceil((center[0] + radius) / sp_)) + c
    r0 = int(math.floor((center[1] - radius) / sp_)) + c
    r1 = int(math.ceil((center[1] + radius) / sp_)) + c
    c0, r0 = max(c0, 0), max(r0, 0)
    c1, r1 = min(c1, grid.n_sites - 1), min(r1, grid.n_sites - 1)
    xs = (np.arange(c0, c1 + 1) - c) * sp_
    ys = (np.arange(r0, r1 + 1) - c) * sp_
    rad = np.hypot(xs[None, :] - center[0], ys[:, None] - center[1])
    h, w = rad.shape
    return r0, c0, rad, m.wh[r0 : r0 + h, c0 : c0 + w - 1], m.wv[r0 : r0 + h - 1, c0 : c0 + w]


def minimal_winding_loop(wh, wv, annulus: np.ndarray, center_rc) -> float:
    """Shortest closed lattice loop inside ``annulus`` winding once around ``center_rc``.

    The annulus is cut along the ray ``row == center row, col > center col``:
    each ray site is split into a lower copy (keeping its edge to row-1)
    and an upper copy (keeping its edge to row+1); edges along the ray are
    duplicated between copies.  A winding loop crosses the ray, so its
    length is the shortest path from some upper copy to the matching lower copy.
    """
    h, w = annulus.shape
    cr, cc = center_rc
    idx = np.arange(h * w).reshape(h, w)
    ray = np.zeros_like(annulus)
    if 0 <= cr < h:
        ray[cr, max(cc + 1, 0) :] = annulus[cr, max(cc + 1, 0) :]
    ray_cols = np.flatnonzero(ray[cr]) if 0 <= cr < h else np.array([], dtype=int)
    if ray_cols.size < 2:
        raise ResolutionError("annulus is less than 2 sites across; refine the mesh")
    upper = {int(c): h * w + k for k, c in enumerate(ray_cols)}

    rows, cols, data = [], [], []

    def edge(a, b, wgt):
        rows.extend((a, b))
        cols.extend((b, a))
        data.extend((wgt, wgt))

    hm = annulus[:, :-1] & annulus[:, 1:]
    for r, c in zip(*np.nonzero(hm)):
        a, b = idx[r, c], idx[r, c + 1]
        edge(a, b, wh[r, c])
        if ray[r, c] and ray[r, c + 1]:
            edge(upper[int(c)], upper[int(c + 1)], wh[r, c])
    vm = annulus[:-1, :] & annulus[1:, :]
    for r, c in zip(*np.nonzero(vm)):
        a, b = idx[r, c], idx[r + 1, c]
        if ray[r, c]:  # edge from a ray site to row+1 belongs to its upper copy
            a = upper[int(c)]
        edge(a, b, wv[r, c])
    n = h * w + len(upper)
    g = sp.csr_matrix((np.asarray(data, dtype=float), (np.asarray(rows), np.asarray(cols))), shape=(n, n))
    best = math.inf
    for c in ray_cols:
        dist = _kernels.csr_dijkstra(g, [upper[int(c)]])
        best = min(best, float(dist[idx[cr, c]]))
    return best


def shortcut_lengths(m: MetricField, epsilon: float, center=(0.0, 0.0), radius: float = 1.0) -> ShortcutResult:
    """Loop length in ``(3e, 4e)`` and crossing distance ``d(T_2e, T_3e)`` in the disk about ``center``.

    Radii are in units of ``radius`` (the rooted unit disk).  Both lengths
    use the metric induced in the open disk, so a common rescaling cancels.
    """
    if not 0 < epsilon <= 0.2:
        raise DomainError("epsilon must lie in (0, 1/5]")
    center = (float(center[0]), float(center[1]))
    r0, c0, rad, wh, wv = _disk_window(m, center, radius)
    rad = rad / radius
    half = 0.5 * m.grid.spacing / radius
    disk = rad < 1.0
    annulus = (rad > 3 * epsilon) & (rad < 4 * epsilon)
    grid = m.grid
    cs = grid.site(center)
    loop = minimal_winding_loop(wh, wv, annulus, (cs[0] - r0, cs[1] - c0))

    inner = disk & (np.abs(rad - 2 * epsilon) <= half)
    outer = disk & (np.abs(rad - 3 * epsilon) <= half)
    if not inner.any() or not outer.any():
        raise ResolutionError("ring bands hold no sites; refine the mesh")
    dist = _kernels.grid_dijkstra(wh, wv, disk, np.flatnonzero(inner), target=np.flatnonzero(outer))
    crossing = float(dist[outer.ravel()].min())
    return ShortcutResult(bool(loop < crossing), loop, crossing, float(epsilon))


def shortcut_event(m: MetricField, epsilon: float, center=(0.0, 0.0), radius: float = 1.0) -> bool:
    return shortcut_lengths(m, epsilon, center, radius).occurred


# ----------------------------------------------------------- event counting
def multiscale_event_count(flags) -> np.ndarray:
    """``N(I)`` for ``I = 1..len(flags)``."""
    f = np.asarray(flags, dtype=bool).ravel()
    return np.cumsum(f).astype(np.int64)


def event_fraction_ci(flags, level: float = 0.95) -> tuple[float, float, float]:
    """Pooled fraction with a Wilson interval."""
    f = np.asarray(flags, dtype=bool).ravel()
    n = f.size
    if n == 0:
        raise InsufficientDataError("no flags")
    p = f.mean()
    z = sps.norm.ppf(0.5 + level / 2)
    den = 1 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    lo = 0.0 if p == 0 else max(mid - half, 0.0)  # at p = 0 round-off could lift lo above 0
    hi = 1.0 if p == 1 else min(mid + half, 1.0)
    return float(p), float(lo), float(hi)


# ------------------------------------------------------- annulus AC probe
@dataclass(frozen=True)
class AcProbeResult:
    stat: float
    pvalue: float
    overlap: bool
    n_geodesic: int
    n_typical: int


def annulus_ac_probe(geodesic_fields, typical_fields, phi, delta_prime: float = 0.5) -> AcProbeResult:
    """KS comparison of pairings with ``phi`` supported in ``delta_prime < |z| < 1``."""
    from .empirical import pair_functional

    if not 0 < delta_prime < 1:
        raise DomainError("delta_prime must lie in (0, 1)")
    lo, _ = phi.support_radii()
    if not lo > delta_prime:
        raise SupportError(f"test function is nonzero at |z|={lo:.3g} <= delta_prime={delta_prime}")
    a = np.array([pair_functional(f, phi) for f in geodesic_fields])
    b = np.array([pair_functional(f, phi) for f in typical_fields])
    if a.size == 0 or b.size == 0:
        raise InsufficientDataError("both ensembles must be nonempty")
    stat, p = stationarity_ks(a, b)
    overlap = bool(b.min() <= a.min() <= b.max() and a.min() <= b.min() <= a.max())
    return AcProbeResult(stat, p, overlap, int(a.size), int(b.size))


# -------------------------------------------------------- decorrelation
@dataclass(frozen=True)
class DecorrelationCurve:
    gaps: np.ndarray
    corr: np.ndarray
    se: np.ndarray
    n: np.ndarray


def decorrelation_probe(values, max_gap: int | None = None, min_replicates: int = 30) -> DecorrelationCurve:
    """``|Corr(X_i, X_j)|`` against ``|i-j|`` from a replicates-by-scales array.

    Each scale column is standardised across replicates; for a gap ``g`` the
    products of standardised pairs ``(i, i+g)`` are pooled over ``i``.
    """
    x = np.asarray(values, dtype=float)
    if x.ndim != 2:
        raise DomainError("values must be replicates x scales")
    n_rep, n_sc = x.shape
    if n_rep < min_replicates:
        raise InsufficientDataError(f"need at least {min_replicates} replicates, got {n_rep}")
    sd = x.std(axis=0)
    if np.any(sd == 0):
        raise UndefinedStatisticError("functional is constant at some scale")
    z = (x - x.mean(axis=0)) / sd
    max_gap = n_sc - 1 if max_gap is None else min(max_gap, n_sc - 1)
    gaps = np.arange(max_gap + 1)
    corr = np.empty(gaps.size)
    n = np.empty(gaps.size, dtype=np.int64)
    for g in gaps:
        if g == 0:
            corr[g], n[g] = 1.0, z.size
            continue
        p = (z[:, :-g] * z[:, g:]).ravel()
        corr[g], n[g] = abs(float(p.mean())), p.size
    return DecorrelationCurve(gaps, corr, 1.0 / np.sqrt(n), n)


def clipped_increment(field, r: float, ratio: float = 2.0, clip: float = 3.0) -> float:
    """Bounded functional of the field seen from scale ``r``: clipped ``Av(T_{ratio r}) - Av(T_r)``."""
    from .field import circle_average

    v = circle_average(field, (0.0, 0.0), ratio * r) - circle_average(field, (0.0, 0.0), r)
    return float(np.clip(v, -clip, clip))
