import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from lql import empirical
from lql.empirical import (
    ProbeDisk,
    RootedField,
    TestFunctional,
    g0,
    pair_functional,
    read_samples_jsonl,
    rooted_field,
    rooted_metric,
    sample_empirical,
    selection_weights,
    size_biased_sample,
    write_samples_jsonl,
    z_statistic,
)
from lql.errors import DomainError, EmptyRenewalError, SupportError
from lql.experiments import renewal_config
from lql.field import GridSpec, LatticeField, sample_gff
from lql.metric import DEFAULT_PARAMS, build_metric
from lql.pipeline import build_replicate

GRID = GridSpec(129, 1 / 16)


@pytest.fixture(scope="module")
def metric():
    return build_metric(sample_gff(GRID, 12))


@pytest.fixture(scope="module")
def replicate():
    return build_replicate(renewal_config(), 1)


def test_probe_disk_mesh():
    d = ProbeDisk(17, 0.5)
    r = np.hypot(d.points[:, 0], d.points[:, 1])
    assert np.all(r < 1)
    assert d.cell == pytest.approx((2 / 16) ** 2)
    # area of the unit disk from the mesh
    assert len(d) * d.cell == pytest.approx(math.pi, rel=0.05)
    for bad in (0.0, 1.0):
        with pytest.raises(DomainError):
            ProbeDisk(17, bad)


def test_functional_supports():
    d = ProbeDisk(17, 0.5)
    b = TestFunctional.bump(d, (0.3, 0.0), 0.4)
    lo, hi = b.support_radii()
    assert hi < 0.7 + 1e-12
    with pytest.raises(SupportError):
        TestFunctional.bump(d, (0.5, 0.0), 0.5)
    with pytest.raises(SupportError):
        TestFunctional.annulus_bump(d, 0.8, 0.5)
    a = TestFunctional.annulus_bump(d, 0.5)
    assert a.support_radii()[0] > 0.5


def test_root_at_origin_rejected(metric):
    with pytest.raises(DomainError):
        rooted_field(metric.field, (0.0, 0.0), ProbeDisk())


def test_rooted_field_of_constant_is_zero(metric):
    f = LatticeField(GRID, np.full(GRID.shape, 3.0))
    rf = rooted_field(f, (1.0, 0.5), ProbeDisk())
    assert np.max(np.abs(rf.values)) < 1e-12
    phi = TestFunctional.bump(rf.disk)
    assert pair_functional(rf, phi) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DomainError):
        pair_functional(rf, TestFunctional.bump(ProbeDisk(9, 0.5)))


@settings(max_examples=25, deadline=None)
@given(c=st.floats(-4, 4), x=st.floats(0.9, 1.5), y=st.floats(-0.8, 0.8))
def test_rooted_outputs_invariant_under_constants(metric, c, x, y):
    disk = ProbeDisk(9, 0.5)
    shifted = build_metric(metric.field + c)
    a, b = rooted_field(metric.field, (x, y), disk), rooted_field(shifted.field, (x, y), disk)
    assert np.max(np.abs(a.values - b.values)) < 1e-10
    ma, mb = rooted_metric(metric, (x, y), disk), rooted_metric(shifted, (x, y), disk)
    assert np.max(np.abs(ma.distances - mb.distances)) <= 1e-10 * ma.distances.max()


def test_rooted_field_lattice_aligned_lookup(metric):
    # root (2, 0), delta 1/2: radius 1, probe pitch 1/4 = 4 sites, so every probe is a site
    disk = ProbeDisk(9, 0.5)
    rf = rooted_field(metric.field, (2.0, 0.0), disk)
    g = metric.grid
    sites = [g.site(tuple(p)) for p in np.array([2.0, 0.0]) + disk.points]
    direct = np.array([metric.field.values[s] for s in sites]) - rf.center_value
    assert np.max(np.abs(rf.values - direct)) <= 1e-12


def test_pairing_is_linear():
    disk = ProbeDisk(9, 0.5)
    rng = np.random.default_rng(3)
    v1, v2 = rng.normal(size=len(disk)), rng.normal(size=len(disk))
    rf = lambda v: RootedField(v, (1.0, 0.0), 0.0, disk, 0.0)
    phi = TestFunctional.bump(disk, (0.2, 0.1), 0.5)
    lhs = pair_functional(rf(2.5 * v1 - 0.7 * v2), phi)
    rhs = 2.5 * pair_functional(rf(v1), phi) - 0.7 * pair_functional(rf(v2), phi)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)
    ones = RootedField(np.full(len(disk), 3.0), (1.0, 0.0), 0.0, disk, 0.0)
    assert pair_functional(ones, phi) == pytest.approx(3.0 * np.sum(phi.values * phi.weights), rel=1e-12)


def test_rooted_metric_axioms(metric):
    rm = rooted_metric(metric, (1.1, 0.6), ProbeDisk(7, 0.5))
    d = rm.distances
    assert np.all(np.diag(d) == 0) and np.array_equal(d, d.T)
    off = ~np.eye(len(d), dtype=bool)
    assert np.all(d[off] > 0)
    # triangle inequality through every intermediate probe
    assert np.all(d[:, None, :] <= d[:, :, None] + d[None, :, :] + 1e-9 * d.max())


def test_rooted_metric_reflection_symmetric():
    # point reflection through the root maps the lattice and a symmetric field onto themselves
    g = GridSpec(129, 1 / 16)
    vals = sample_gff(g, 21).values
    x = (1.0, 0.5)
    r, c = g.site(x)
    sym = vals.copy()
    win = np.s_[r - 40 : r + 41, c - 40 : c + 41]
    sym[win] = 0.5 * (vals[win] + vals[win][::-1, ::-1])
    m = build_metric(LatticeField(g, sym))
    disk = ProbeDisk(9, 0.5)
    rm = rooted_metric(m, x, disk)
    # the mesh is symmetric about 0: probe k maps to the probe at -point
    flip = [int(np.argmin(np.hypot(*(disk.points + p).T))) for p in disk.points]
    assert np.allclose(rm.distances, rm.distances[np.ix_(flip, flip)], rtol=1e-12, atol=0)


def test_rooted_metric_zero_field(metric):
    flat = build_metric(LatticeField(GRID, np.zeros(GRID.shape)))
    disk = ProbeDisk(9, 0.5)
    x = (1.2, -0.4)
    rm = rooted_metric(flat, x, disk)
    r = 0.5 * math.hypot(*x)
    taxi = np.abs(rm.sites[:, None, :] - rm.sites[None, :, :]).sum(axis=2) * GRID.spacing
    lower = r ** (-DEFAULT_PARAMS.xi_q) * taxi
    assert np.all(np.diag(rm.distances) == 0)
    assert np.allclose(rm.distances, rm.distances.T, rtol=0, atol=0)
    assert np.all(rm.distances >= lower - 1e-12)
    # most pairs realise the taxicab distance inside a disk this fine
    assert np.mean(np.isclose(rm.distances, lower, rtol=1e-12)) > 0.9


def test_sample_empirical_bounds_and_determinism(metric):
    _, path = build_path(metric)
    t_max = math.log(path.total)
    with pytest.raises(DomainError):
        sample_empirical(metric, path, t_max + 0.1, 0)
    with pytest.raises(DomainError):
        sample_empirical(metric, path, -0.1, 0)
    a = sample_empirical(metric, path, 0.5 * t_max, 7, ProbeDisk(9, 0.2))
    b = sample_empirical(metric, path, 0.5 * t_max, 7, ProbeDisk(9, 0.2))
    assert a.frak_t == b.frak_t and np.array_equal(a.field.values, b.field.values)
    assert 0 <= a.frak_t <= 0.5 * t_max
    assert a.snap_error <= 0.5 * (metric.wh.max() + metric.wv.max())


def build_path(metric):
    from lql.metric import shortest_path

    g = metric.grid
    return shortest_path(metric, (g.origin, g.origin), (g.origin + 20, g.origin + 25))


def test_size_biased_selection_frequencies(monkeypatch):
    # G_0 = log(L1/L0) per fake member; draw only the member index
    def fake(g):
        d = SimpleNamespace(i_min=0, i_last=0, g=lambda i: g, eta=lambda i: 0, L=np.array([1.0, math.exp(g)]))
        d.trace = SimpleNamespace(path=None)
        return (d, None)

    gs = [0.0, 0.5, 1.0, 2.5]
    ens = [fake(g) for g in gs]
    assert np.allclose(selection_weights(ens), np.array(gs) / sum(gs))
    monkeypatch.setattr(empirical, "empirical_at", lambda *a, member=-1, **k: member)
    counts = np.bincount([size_biased_sample(ens, s) for s in range(4000)], minlength=4)
    assert counts[0] == 0
    p = stats.chisquare(counts[1:], 4000 * np.array(gs[1:]) / sum(gs)).pvalue
    assert p > 1e-3
    with pytest.raises(EmptyRenewalError):
        size_biased_sample([fake(0.0)], 0)


def test_size_biased_time_is_uniform_on_segment(monkeypatch, replicate):
    d, m = replicate.decomposition, replicate.metric
    monkeypatch.setattr(empirical, "empirical_at", lambda m, path, frak_t, *a, **k: frak_t)
    j = d.eta(0)
    lo, hi = math.log(d.L[j]), math.log(d.L[j + 1])
    draws = np.array([size_biased_sample([(d, m)], s) for s in range(10_000)])
    assert stats.kstest(draws, stats.uniform(lo, hi - lo).cdf).pvalue > 1e-3


def test_size_biased_two_to_one(monkeypatch):
    monkeypatch.setattr(empirical, "g0", lambda d: d.g)
    monkeypatch.setattr(empirical, "empirical_at", lambda *a, member=-1, **k: member)
    ens = [(SimpleNamespace(g=g, eta=lambda i: 0, L=[1.0, math.exp(g)], trace=SimpleNamespace(path=None)), None) for g in (2.0, 1.0)]
    n = 10_000
    share = np.mean([size_biased_sample(ens, s) == 0 for s in range(n)])
    assert abs(share - 2 / 3) <= 3 * math.sqrt(2 / 9 / n)


def test_size_biased_sample_lands_in_scale0_segment(replicate):
    d, m = replicate.decomposition, replicate.metric
    assert g0(d) > 0
    s = size_biased_sample([(d, m)], 3, ProbeDisk(9, 0.5))
    j = d.eta(0)
    assert math.log(d.L[j]) <= s.frak_t <= math.log(d.L[j + 1])


def test_z_statistic(replicate):
    d, m = replicate.decomposition, replicate.metric
    disk = ProbeDisk(9, 0.5)
    phi = TestFunctional.bump(disk)
    g = np.array([d.g(int(i)) for i in d.complete_scales])
    for n_q in (None, 8):
        z0 = z_statistic(d, m, [0.0], [phi], disk, n_q)
        assert np.allclose(z0.real, g, rtol=0, atol=1e-9) and np.all(z0.imag == 0)
    z = z_statistic(d, m, [1.0], [phi], disk)
    assert np.all(np.abs(z) <= g + 1e-12)
    assert np.all(z[np.asarray(d.P[: len(z)]) == 0] == 0)
    with pytest.raises(DomainError):
        z_statistic(d, m, [1.0, 2.0], [phi], disk)
    with pytest.raises(DomainError):
        z_statistic(d, m, [1.0], [phi], disk, 0)


def test_z_midpoint_converges_to_exact(replicate):
    # the integrand is constant between vertex midpoints, so the exact sum is the quadrature limit
    d, m = replicate.decomposition, replicate.metric
    disk = ProbeDisk(9, 0.5)
    phi = TestFunctional.bump(disk)
    exact = z_statistic(d, m, [1.0], [phi], disk)
    live = np.abs(exact) > 0
    errs = [np.max(np.abs(z_statistic(d, m, [1.0], [phi], disk, n)[live] - exact[live]) / np.abs(exact[live])) for n in (64, 512, 4096)]
    assert errs[2] < errs[0] and errs[2] < 0.01
    a, b = (z_statistic(d, m, [1.0], [phi], disk, n)[live] for n in (2048, 4096))
    assert np.max(np.abs(a - b) / np.abs(b)) < 0.01


def test_samples_jsonl_roundtrip(tmp_path, metric):
    _, path = build_path(metric)
    t = math.log(path.total)
    s = sample_empirical(metric, path, t, 5, ProbeDisk(9, 0.5), with_metric=True, frak_t=0.95 * t)
    write_samples_jsonl(tmp_path / "s.jsonl", [s, s])
    rows = read_samples_jsonl(tmp_path / "s.jsonl")
    assert len(rows) == 2
    assert rows[0]["field"] == [float(v) for v in s.field.values]
    n = len(s.field.values)
    assert len(rows[0]["metric"]) == n * (n - 1) // 2
    assert rows[0]["seed"] == 5 and rows[0]["t"] == t
