"""Full-size acceptance run, one test per criterion.

Each test asserts every diagnostic entry of its criterion and, where a time
budget is stated, the wall time.  A PASS/FAIL line per criterion is printed
in the terminal summary (see ``conftest.py``).  The ensemble criteria share
one 100-replicate run of the default configuration, about 25 minutes on one
core.
"""

import time

import pytest

from lql import experiments as ex
from lql.config import ExperimentConfig
from lql.pipeline import ensemble

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

ENSEMBLE_CFG = ExperimentConfig(n_empirical=6)
N_ENSEMBLE = 100

RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def view():
    return ex.EnsembleView(ensemble(ENSEMBLE_CFG, N_ENSEMBLE))


def _check(num: int, entries, elapsed: float, budget: float | None = None):
    parts = [f"{e.name}={e.value:.4g} ({'ok' if e.passed else 'FAIL'})" for e in entries]
    timed = budget is None or elapsed < budget
    ok = bool(entries) and all(e.passed for e in entries) and timed
    clock = f"{elapsed:.1f}s" + ("" if budget is None else f" of {budget:.0f}s")
    RESULTS[num] = (ok, f"{'; '.join(parts)} [{clock}]")
    notes = [f"{e.name}: {e.note}" for e in entries if e.note]
    assert ok, "\n".join([RESULTS[num][1], *notes])


def _run(num, fn, budget=None, *args):
    t = time.perf_counter()
    entries = fn(*args)
    _check(num, entries, time.perf_counter() - t, budget)


def test_c01_oracle_equivalence():
    _run(1, ex.criterion_oracle, 10)


def test_c02_weyl_invariance():
    _run(2, ex.criterion_weyl, 30)


def test_c03_renewal_identities():
    _run(3, ex.criterion_renewal, 300)


def test_c04_cameron_martin():
    _run(4, ex.criterion_cameron_martin, 120)


def test_c05_circle_average_brownian():
    _run(5, ex.criterion_brownian, 300)


def test_c06_coalescence_positivity():
    _run(6, ex.criterion_coalescence, 1800)


def test_c09_no_shortcut_at_geodesic_roots():
    _run(9, ex.criterion_geodesic_shortcut)


def test_c10_typical_root_shortcut():
    _run(10, ex.criterion_typical_shortcut)


@pytest.mark.parametrize("num", [7, 8, 11, 12, 13])
def test_ensemble_criterion(view, num):
    _run(num, ex.ENSEMBLE_CRITERIA[num], None, view, ENSEMBLE_CFG)
