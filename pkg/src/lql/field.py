"""Discrete Gaussian free fields on a centred square grid.

The grid has an odd number of sites per side so the origin is a lattice
site.  ``spacing`` is the Euclidean distance between neighbouring sites
measured in units of the complex plane, so the site ``(row, col)`` sits at
``x = (col - c) * spacing``, ``y = (row - c) * spacing`` with ``c`` the
centre index.

The zero-boundary field has covariance ``2*pi * L^{-1}`` where ``L`` is the
combinatorial Dirichlet Laplacian on the interior sites; this is the
normalisation under which the Dirichlet energy carries the factor
``1/(2*pi)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field
from enum import IntEnum
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, DomainError, NumericalError

TWO_PI = 2.0 * np.pi


class Normalization(IntEnum):
    RAW = 0
    ZERO_UNIT_CIRCLE = 1

    @classmethod
    def coerce(cls, value) -> "Normalization":
        if isinstance(value, Normalization):
            return value
        if isinstance(value, str):
            key = value.strip().lower().replace("_", "-")
            if key == "raw":
                return cls.RAW
            if key in ("zero-unit-circle", "unit-circle", "zero"):
                return cls.ZERO_UNIT_CIRCLE
            raise ConfigurationError(f"unknown normalization {value!r}")
        return cls(int(value))


@dataclass(frozen=True)
class GridSpec:
    """Centred ``n_sites x n_sites`` lattice with neighbour distance ``spacing``."""

    n_sites: int
    spacing: float = 1.0

    def __post_init__(self):
        if int(self.n_sites) != self.n_sites or self.n_sites < 1 or self.n_sites % 2 == 0:
            raise ConfigurationError(f"n_sites must be an odd positive integer, got {self.n_sites}")
        if not (self.spacing > 0 and np.isfinite(self.spacing)):
            raise ConfigurationError(f"spacing must be positive, got {self.spacing}")
        self.check_unit_circle()

    @property
    def origin(self) -> int:
        return self.n_sites // 2

    @property
    def half_width(self) -> float:
        """Distance from the origin to the grid edge along an axis."""
        return self.origin * self.spacing

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_sites, self.n_sites)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """``(x, y)`` coordinate arrays of every site."""
        ax = (np.arange(self.n_sites) - self.origin) * self.spacing
        return np.meshgrid(ax, ax)

    def radius(self, center=(0.0, 0.0)) -> np.ndarray:
        x, y = self.coords()
        return np.hypot(x - center[0], y - center[1])

    def point(self, site) -> tuple[float, float]:
        r, c = site
        return ((c - self.origin) * self.spacing, (r - self.origin) * self.spacing)

    def site(self, point) -> tuple[int, int]:
        """Nearest site to ``point`` (no bounds check)."""
        col = int(np.rint(point[0] / self.spacing)) + self.origin
        row = int(np.rint(point[1] / self.spacing)) + self.origin
        return (row, col)

    def contains_site(self, site) -> bool:
        return 0 <= site[0] < self.n_sites and 0 <= site[1] < self.n_sites

    def flat(self, site) -> int:
        return int(site[0]) * self.n_sites + int(site[1])

    def unflat(self, idx) -> tuple[int, int]:
        return divmod(int(idx), self.n_sites)

    def ring_mask(self, center, radius: float) -> np.ndarray:
        """Sites within ``spacing/2`` of the circle of ``radius`` about ``center``."""
        return np.abs(self.radius(center) - radius) <= 0.5 * self.spacing

    def check_unit_circle(self) -> None:
        if np.count_nonzero(self.ring_mask((0.0, 0.0), 1.0)) < 8:
            raise ConfigurationError(
                f"unit circle carries fewer than 8 sites for n_sites={self.n_sites}, spacing={self.spacing}"
            )


@dataclass(frozen=True, eq=False)
class LatticeField:
    grid: GridSpec
    values: np.ndarray
    normalization: Normalization = Normalization.RAW

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != self.grid.shape:
            raise ConfigurationError(f"values shape {vals.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise NumericalError("field contains non-finite values")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "normalization", Normalization.coerce(self.normalization))

    def __add__(self, other):
        """Add a constant or an array; the sum is no longer normalised."""
        if isinstance(other, LatticeField):
            other = other.values
        return LatticeField(self.grid, self.values + other, Normalization.RAW)

    __radd__ = __add__

    def normalized(self) -> "LatticeField":
        """Copy with the unit-circle average subtracted."""
        avg = circle_average(self, (0.0, 0.0), 1.0)
        return LatticeField(self.grid, self.values - avg, Normalization.ZERO_UNIT_CIRCLE)


@dataclass(frozen=True)
class CircleAverageTrace:
    radii: np.ndarray
    averages: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.radii, dtype=float)
        a = np.asarray(self.averages, dtype=float)
        if r.shape != a.shape:
            raise ConfigurationError("radii and averages differ in length")
        if r.size > 1 and np.any(np.diff(r) <= 0):
            raise ConfigurationError("radii must be strictly increasing")
        object.__setattr__(self, "radii", r)
        object.__setattr__(self, "averages", a)

    @property
    def times(self) -> np.ndarray:
        return np.log(self.radii)


@dataclass(frozen=True, eq=False)
class DirichletVector:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.shape != self.grid.shape:
            raise ConfigurationError("values shape does not match grid")
        if np.any(vals[0, :] != 0) or np.any(vals[-1, :] != 0) or np.any(vals[:, 0] != 0) or np.any(vals[:, -1] != 0):
            raise DomainError("Dirichlet vectors must vanish on the grid boundary")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True, eq=False)
class HarmonicProfile:
    """Discrete harmonic extension of unit-circle data into ``{|z| > 1}``."""

    grid: GridSpec
    ring_values: np.ndarray
    values: np.ndarray  # NaN inside the unit circle
    solved: np.ndarray  # mask of the sites that were unknowns of the solve
    epsilon: float
    residual: float = dc_field(default=0.0)

    def ring_sup(self, radius: float) -> float:
        ring = self.grid.ring_mask((0.0, 0.0), radius) & np.isfinite(self.values)
        if not ring.any():
            raise DomainError(f"no solved sites on the ring of radius {radius}")
        return float(np.max(np.abs(self.values[ring])))


# ---------------------------------------------------------------- sampling
def _dirichlet_eigenvalues(m: int) -> np.ndarray:
    k = np.arange(1, m + 1)
    lam = 2.0 - 2.0 * np.cos(np.pi * k / (m + 1))
    return lam[:, None] + lam[None, :]


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)


def sample_gff(grid: GridSpec, seed: int, normalization="raw") -> LatticeField:
    """Zero-boundary discrete GFF via the sine eigenbasis of the Dirichlet Laplacian."""
    if not isinstance(grid, GridSpec):
        raise ConfigurationError("grid must be a GridSpec")
    norm = Normalization.coerce(normalization)
    n = grid.n_sites
    values = np.zeros((n, n))
    m = n - 2
    if m > 0:
        z = _rng(seed).standard_normal((m, m))
        coeff = z * np.sqrt(TWO_PI / _dirichlet_eigenvalues(m))
        values[1:-1, 1:-1] = scipy.fft.idstn(coeff, type=1, norm="ortho")
    out = LatticeField(grid, values, Normalization.RAW)
    if norm is Normalization.ZERO_UNIT_CIRCLE:
        out = out.normalized()
    return out


def green_matrix(grid: GridSpec) -> np.ndarray:
    """Dense covariance ``2*pi * L^{-1}`` over interior sites (small grids only)."""
    lap = dirichlet_laplacian(grid)
    return TWO_PI * np.linalg.inv(lap.toarray())


def dirichlet_laplacian(grid: GridSpec) -> sp.csr_matrix:
    """Combinatorial Laplacian on the interior sites, zero boundary values."""
    m = grid.n_sites - 2
    if m < 1:
        raise ConfigurationError("grid has no interior sites")
    one = sp.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(m, m))
    eye = sp.identity(m)
    return (sp.kron(eye, one) + sp.kron(one, eye)).tocsr()


# ---------------------------------------------------------- circle average
def _ring_window(grid: GridSpec, center, radius: float):
    """Bounding slice and coordinates around a circle, or DomainError."""
    sp_ = grid.spacing
    reach = radius + 0.5 * sp_
    lo_x = center[0] - reach
    hi_x = center[0] + reach
    lo_y = center[1] - reach
    hi_y = center[1] + reach
    hw = grid.half_width + 1e-12 * sp_
    if lo_x < -hw or hi_x > hw or lo_y < -hw or hi_y > hw:
        raise DomainError(f"circle of radius {radius} about {tuple(center)} leaves the grid")
    c = grid.origin
    c0 = max(int(np.floor(lo_x / sp_)) + c, 0)
    c1 = min(int(np.ceil(hi_x / sp_)) + c, grid.n_sites - 1)
    r0 = max(int(np.floor(lo_y / sp_)) + c, 0)
    r1 = min(int(np.ceil(hi_y / sp_)) + c, grid.n_sites - 1)
    xs = (np.arange(c0, c1 + 1) - c) * sp_
    ys = (np.arange(r0, r1 + 1) - c) * sp_
    return (slice(r0, r1 + 1), slice(c0, c1 + 1)), xs, ys


def ring_sites(grid: GridSpec, center, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Row and column indices, row-major, of sites within ``spacing/2`` of the circle.

    Per row only a padded analytic column range is tested, so the cost grows
    with the radius rather than its square.
    """
    (rs, cs), xs, ys = _ring_window(grid, center, radius)
    sp_ = grid.spacing
    dy = ys - center[1]
    # |dx| range of the band, widened by a site so the exact test below decides
    outer = np.sqrt(np.maximum((radius + 0.5 * sp_) ** 2 - dy * dy, 0.0)) + sp_
    inner2 = (radius - 0.5 * sp_) ** 2 - dy * dy
    inner = np.where(inner2 > 0, np.sqrt(np.maximum(inner2, 0.0)) - sp_, -np.inf)
    u = (center[0] - xs[0]) / sp_  # centre in window column units
    nx = xs.size
    lo_out = np.clip(np.floor(u - outer / sp_), 0, nx).astype(np.int64)
    hi_out = np.clip(np.ceil(u + outer / sp_), -1, nx - 1).astype(np.int64)
    split = inner > 0
    lo_in = np.where(split, np.clip(np.ceil(u - inner / sp_), 0, nx), nx).astype(np.int64)
    hi_in = np.where(split, np.clip(np.floor(u + inner / sp_), -1, nx - 1), -1).astype(np.int64)
    # left piece [lo_out, min(hi_out, lo_in - 1)], right piece [max(lo_out, hi_in + 1), hi_out]
    spans = []
    for a, b in ((lo_out, np.where(split, np.minimum(hi_out, lo_in - 1), hi_out)),
                 (np.where(split, np.maximum(lo_out, hi_in + 1), nx), np.where(split, hi_out, -1))):
        spans.append((a, np.maximum(b - a + 1, 0)))
    rows, cols = [], []
    for a, n in spans:
        r = np.repeat(np.arange(dy.size), n)
        start = np.repeat(a - np.concatenate(([0], np.cumsum(n)[:-1])), n)
        rows.append(r)
        cols.append(start + np.arange(r.size))
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    dist = np.hypot(xs[cols] - center[0], ys[rows] - center[1])
    keep = np.abs(dist - radius) <= 0.5 * sp_
    return rows[keep] + rs.start, cols[keep] + cs.start


def circle_average(field: LatticeField, center, radius: float) -> float:
    """Equal-weight mean over sites within ``spacing/2`` of the circle."""
    if not radius > 0:
        raise DomainError("radius must be positive")
    rows, cols = ring_sites(field.grid, center, radius)
    if rows.size < 4:
        raise DomainError(f"ring of radius {radius} holds {rows.size} < 4 sites")
    return float(field.values[rows, cols].sum() / rows.size)


def circle_average_trace(field: LatticeField, radii, center=(0.0, 0.0)) -> CircleAverageTrace:
    radii = np.asarray(radii, dtype=float)
    return CircleAverageTrace(radii, np.array([circle_average(field, center, r) for r in radii]))


# ------------------------------------------------------------ interpolation
def bilinear(values: np.ndarray, grid: GridSpec, points: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of site values at ``points`` (shape ``(..., 2)``)."""
    pts = np.asarray(points, dtype=float)
    u = pts[..., 0] / grid.spacing + grid.origin
    v = pts[..., 1] / grid.spacing + grid.origin
    n = grid.n_sites
    tol = 1e-9
    if np.any(u < -tol) or np.any(u > n - 1 + tol) or np.any(v < -tol) or np.any(v > n - 1 + tol):
        raise DomainError("interpolation point outside the grid")
    u = np.clip(u, 0.0, n - 1.0)
    v = np.clip(v, 0.0, n - 1.0)
    # snap coordinates that are integral up to rounding so lattice-aligned
    # lookups return stored values exactly
    ur = np.rint(u)
    vr = np.rint(v)
    u = np.where(np.abs(u - ur) < 1e-9, ur, u)
    v = np.where(np.abs(v - vr) < 1e-9, vr, v)
    c0 = np.minimum(np.floor(u).astype(np.int64), n - 2) if n > 1 else np.zeros_like(u, dtype=np.int64)
    r0 = np.minimum(np.floor(v).astype(np.int64), n - 2) if n > 1 else np.zeros_like(v, dtype=np.int64)
    fu = u - c0
    fv = v - r0
    if n == 1:
        return np.full(u.shape, values[0, 0])
    f00 = values[r0, c0]
    f01 = values[r0, c0 + 1]
    f10 = values[r0 + 1, c0]
    f11 = values[r0 + 1, c0 + 1]
    out = (1 - fv) * ((1 - fu) * f00 + fu * f01) + fv * ((1 - fu) * f10 + fu * f11)
    # exact lookup on lattice points (avoids 0*x + 1*y rounding)
    exact = (fu == 0) & (fv == 0)
    if np.any(exact):
        out = np.where(exact, f00, out)
    return out


# ------------------------------------------------------- rescale/recentre
def rescale_recenter(field: LatticeField, r: float, n_out: int | None = None) -> LatticeField:
    """Field seen from scale ``r``: ``z -> h(r z)`` minus its unit-circle average.

    The output lives on a grid with the input spacing.  The subtracted
    constant is the mean of the rescaled field over the output unit ring,
    i.e. the circle average at radius ``r`` evaluated at the pulled-back ring
    points; at ``r = 1`` this is exactly ``circle_average(field, 0, 1)``.
    Values inside the unit disk are returned too; the rescaled field proper
    is the restriction to :func:`exterior_mask`.
    """
    if not r >= 1:
        raise DomainError("rescale radius must be >= 1")
    grid = field.grid
    max_half = int(np.floor(grid.origin / r + 1e-9))
    if n_out is None:
        n_out = 2 * max_half + 1
    if n_out % 2 == 0 or (n_out - 1) // 2 > max_half:
        raise DomainError(f"rescaling by r={r} does not fit an output of {n_out} sites")
    try:
        out_grid = GridSpec(n_out, grid.spacing)
    except ConfigurationError as exc:
        raise DomainError(f"r={r} too large for the grid: {exc}") from None
    x, y = out_grid.coords()
    pts = np.stack([x * r, y * r], axis=-1)
    vals = bilinear(field.values, grid, pts)
    ring = out_grid.ring_mask((0.0, 0.0), 1.0)
    vals = vals - vals[ring].mean()
    return LatticeField(out_grid, vals, Normalization.ZERO_UNIT_CIRCLE)


def exterior_mask(grid: GridSpec, radius: float = 1.0) -> np.ndarray:
    return grid.radius() > radius


# --------------------------------------------------- Dirichlet / Cameron–Martin
def dirichlet_inner(f: DirichletVector, g: DirichletVector) -> float:
    """``(1/2pi) * sum over edges of df * dg``."""
    if f.grid != g.grid:
        raise DomainError("Dirichlet vectors live on different grids")
    a, b = f.values, g.values
    s = np.sum(np.diff(a, axis=0) * np.diff(b, axis=0)) + np.sum(np.diff(a, axis=1) * np.diff(b, axis=1))
    return float(s / TWO_PI)


def _edge_pairing(values: np.ndarray, f: np.ndarray) -> float:
    s = np.sum(np.diff(values, axis=0) * np.diff(f, axis=0)) + np.sum(np.diff(values, axis=1) * np.diff(f, axis=1))
    return float(s / TWO_PI)


def cameron_martin_rn(sample: LatticeField, f: DirichletVector) -> float:
    """Density of the law of ``GFF + f`` against the GFF, evaluated at ``sample``."""
    if sample.normalization is not Normalization.RAW:
        raise DomainError("Cameron-Martin density needs a raw zero-boundary sample")
    if sample.grid != f.grid:
        raise DomainError("sample and shift live on different grids")
    energy = dirichlet_inner(f, f)
    return float(np.exp(_edge_pairing(sample.values, f.values) - 0.5 * energy))


# ------------------------------------------------------------ harmonic ext
def harmonic_roughness(field: LatticeField, epsilon: float) -> tuple[HarmonicProfile, float]:
    """Harmonic extension of the unit-ring values outward, zero on the grid edge.

    Returns the profile and the sup of ``|extension|`` on the ring of radius
    ``1 + epsilon``.
    """
    if field.normalization is not Normalization.ZERO_UNIT_CIRCLE:
        raise DomainError("harmonic roughness expects a unit-circle-normalised field")
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    grid = field.grid
    if 1.0 + 4.0 * epsilon + grid.spacing > grid.half_width:
        raise DomainError("grid does not cover the radius 1 + 4*epsilon")
    n = grid.n_sites
    rad = grid.radius()
    ring = np.abs(rad - 1.0) <= 0.5 * grid.spacing
    outer = rad > 1.0 + 0.5 * grid.spacing
    boundary = np.zeros((n, n), dtype=bool)
    boundary[0, :] = boundary[-1, :] = boundary[:, 0] = boundary[:, -1] = True
    unknown = outer & ~boundary
    idx = -np.ones((n, n), dtype=np.int64)
    idx[unknown] = np.arange(np.count_nonzero(unknown))
    known = np.zeros((n, n))
    known[ring] = field.values[ring]

    rows, cols, data = [], [], []
    rhs = np.zeros(np.count_nonzero(unknown))
    ur, uc = np.nonzero(unknown)
    me = idx[ur, uc]
    rows.append(me)
    cols.append(me)
    data.append(np.full(me.size, 4.0))
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nr, nc = ur + dr, uc + dc
        nb = idx[nr, nc]
        is_unknown = nb >= 0
        rows.append(me[is_unknown])
        cols.append(nb[is_unknown])
        data.append(np.full(np.count_nonzero(is_unknown), -1.0))
        np.add.at(rhs, me[~is_unknown], known[nr[~is_unknown], nc[~is_unknown]])
    size = me.size
    mat = sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size))
    sol = spla.spsolve(mat.tocsc(), rhs)
    residual = float(np.max(np.abs(mat @ sol - rhs))) if size else 0.0
    if not np.all(np.isfinite(sol)) or residual >= 1e-9:
        raise NumericalError(f"harmonic solve residual {residual:.3e} exceeds 1e-9")

    values = np.full((n, n), np.nan)
    values[ring] = field.values[ring]
    values[outer & boundary] = 0.0
    values[unknown] = sol
    profile = HarmonicProfile(grid, field.values[ring].copy(), values, unknown, float(epsilon), residual)
    return profile, profile.ring_sup(1.0 + epsilon)


def mean_value_residual(profile: HarmonicProfile) -> float:
    """Largest deviation from the four-neighbour mean over solved sites."""
    v = profile.values
    ur, uc = np.nonzero(profile.solved)
    if ur.size == 0:
        return 0.0
    nb = (v[ur - 1, uc] + v[ur + 1, uc] + v[ur, uc - 1] + v[ur, uc + 1]) / 4.0
    return float(np.max(np.abs(v[ur, uc] - nb)))


# ------------------------------------------------ log-periodic bottleneck
def bottleneck_profile(
    grid: GridSpec,
    k: float,
    depth: float,
    wall: float,
    angles=None,
    width: float = 0.05,
) -> np.ndarray:
    """Continuous function that plants a bottleneck at every scale ``s = k**i``.

    Cheap circular channels (value ``-depth``, relative width ``width``) sit
    at radii ``k**0.25 * s`` and ``k**0.5 * s``.  Between them, on the circle
    of radius ``k**0.375 * s``, runs a wall of height ``wall`` with a single
    opening on the ray at angle ``angles[i]``.  The opening is one lattice
    line wide (lateral scale ``0.3 * spacing``), so with an axis-aligned
    angle every path from one channel to the other crosses the same sites.
    ``angles`` is a mapping or callable ``i -> angle`` (default 0).  Adding
    the profile to a GFF sample keeps the field in the
    GFF-plus-continuous-function class.
    """
    if not k > 1:
        raise ConfigurationError("k must exceed 1")
    x, y = grid.coords()
    r = np.hypot(x, y)
    r = np.where(r > 0, r, 0.5 * grid.spacing)
    scale = np.floor(np.log(r) / np.log(k) - 0.125)
    s = k**scale
    channel = np.zeros_like(r)
    for c in (0.25, 0.5):
        for shift in (-1.0, 0.0, 1.0):
            rc = k ** (c + shift) * s
            channel = np.maximum(channel, np.exp(-(((r - rc) / (width * rc)) ** 2)))
    lo = int(scale.min())
    levels = np.arange(lo, int(scale.max()) + 1)
    if angles is None:
        table = np.zeros(levels.size)
    elif callable(angles):
        table = np.array([float(angles(int(i))) for i in levels])
    else:
        table = np.array([float(angles.get(int(i), 0.0)) for i in levels])
    ang = table[scale.astype(np.int64) - lo]
    ca, sa = np.cos(ang), np.sin(ang)
    lateral = np.abs(y * ca - x * sa) / (0.3 * grid.spacing)
    gap = np.where(x * ca + y * sa > 0, np.exp(-(lateral**2)), 0.0)
    rw = k**0.375 * s
    barrier = np.exp(-(((r - rw) / (width * rw)) ** 2)) * (1.0 - gap)
    return wall * barrier - depth * channel


# --------------------------------------------------------------- persistence
_MAGIC = b"LQGF"
_HEADER = struct.Struct("<4sIIdB")


def save_field(field: LatticeField, path) -> None:
    """Little-endian binary: magic, u32 version, u32 n, f64 spacing, u8 norm, values."""
    g = field.grid
    with open(Path(path), "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, g.n_sites, g.spacing, int(field.normalization)))
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def load_field(path) -> LatticeField:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ConfigurationError("truncated field file")
    magic, version, n, spacing, norm = _HEADER.unpack_from(data)
    if magic != _MAGIC or version != 1:
        raise ConfigurationError(f"not an LQGF v1 file: {path}")
    values = np.frombuffer(data, dtype="<f8", count=n * n, offset=_HEADER.size).reshape(n, n)
    return LatticeField(GridSpec(n, spacing), values.astype(np.float64), Normalization(norm))
