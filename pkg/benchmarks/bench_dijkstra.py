"""Time the grid Dijkstra kernel under both backends.

    python3 benchmarks/bench_dijkstra.py [--sizes 257 513 1025] [--repeat 3]

Each run builds an LQG metric from one GFF sample and times a single-source
search from the centre, with and without a target (early stop), plus the
path walk back.  The scipy backend is selected with ``LQL_NUMBA=0``.
"""

import argparse
import os
import time

import numpy as np

from lql import _kernels
from lql.field import GridSpec, sample_gff
from lql.metric import build_metric


def _time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench(n: int, repeat: int) -> dict:
    m = build_metric(sample_gff(GridSpec(n, 8.0 / (n - 1)), 0))
    mask = np.ones(m.shape, dtype=bool)
    src = m.flat((n // 2, n // 2))
    tgt = m.flat((n // 2 + n // 4, n // 2 + n // 8))
    row = {"n": n}
    for backend, flag in (("numba", "1"), ("scipy", "0")):
        os.environ["LQL_NUMBA"] = flag
        # warm-up compiles the numba kernels outside the timing
        dist = _kernels.grid_dijkstra(m.wh, m.wv, mask, [src])
        _kernels.walk_path(dist, m.wh, m.wv, mask, tgt, src)
        row[f"{backend}_full"] = _time(lambda: _kernels.grid_dijkstra(m.wh, m.wv, mask, [src]), repeat)
        row[f"{backend}_target"] = _time(lambda: _kernels.grid_dijkstra(m.wh, m.wv, mask, [src], target=tgt), repeat)
        row[f"{backend}_walk"] = _time(lambda: _kernels.walk_path(dist, m.wh, m.wv, mask, tgt, src), repeat)
    os.environ.pop("LQL_NUMBA", None)
    return row


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[257, 513, 1025])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not _kernels._HAVE_NUMBA:
        raise SystemExit("numba is not installed; install the 'fast' extra to compare backends")
    cols = ["full", "target", "walk"]
    print(f"{'n':>6} " + " ".join(f"{b + '_' + c:>14}" for b in ("numba", "scipy") for c in cols) + f" {'speedup':>8}")
    for n in args.sizes:
        r = bench(n, args.repeat)
        cells = " ".join(f"{r[f'{b}_{c}']:>14.4f}" for b in ("numba", "scipy") for c in cols)
        print(f"{n:>6} {cells} {r['scipy_full'] / r['numba_full']:>8.2f}")


if __name__ == "__main__":
    main()
