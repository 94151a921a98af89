"""Shortest-path kernels on the square lattice.

Two interchangeable backends compute the same distances bit for bit:

* ``numba``: a binary-heap Dijkstra compiled with ``@njit``;
* ``scipy``: the same graph handed to :func:`scipy.sparse.csgraph.dijkstra`.

Set ``LQL_NUMBA=0`` to force the scipy path (also used when numba is not
importable).  Both backends produce ``dist[v] = min_w dist[w] + c(w, v)`` in
IEEE arithmetic, which is why a path can be recovered later by testing exact
equality of these sums.

Grid edges are stored in two arrays: ``wh[r, c]`` joins ``(r, c)`` to
``(r, c+1)`` and ``wv[r, c]`` joins ``(r, c)`` to ``(r+1, c)``.  Sites are
addressed by row-major flat index ``r * ncols + c``.
"""

from __future__ import annotations

import os

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra as _sp_dijkstra

try:  # pragma: no cover - exercised implicitly
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


def numba_enabled() -> bool:
    return _HAVE_NUMBA and os.environ.get("LQL_NUMBA", "1") != "0"


def _jit(fn):
    if _HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


# --------------------------------------------------------------------- heap
@_jit
def _heap_push(keys, vals, size, key, val):
    i = size
    keys[i] = key
    vals[i] = val
    while i > 0:
        parent = (i - 1) >> 1
        if keys[parent] <= keys[i]:
            break
        keys[parent], keys[i] = keys[i], keys[parent]
        vals[parent], vals[i] = vals[i], vals[parent]
        i = parent
    return size + 1


@_jit
def _heap_pop(keys, vals, size):
    key = keys[0]
    val = vals[0]
    size -= 1
    keys[0] = keys[size]
    vals[0] = vals[size]
    i = 0
    while True:
        left = 2 * i + 1
        if left >= size:
            break
        child = left
        right = left + 1
        if right < size and keys[right] < keys[left]:
            child = right
        if keys[i] <= keys[child]:
            break
        keys[child], keys[i] = keys[i], keys[child]
        vals[child], vals[i] = vals[i], vals[child]
        i = child
    return key, val, size


# ------------------------------------------------------------ grid dijkstra
@_jit
def _grid_dijkstra_nb(wh, wv, mask, sources, targets):
    nrows, ncols = mask.shape
    n = nrows * ncols
    dist = np.full(n, np.inf)
    done = np.zeros(n, dtype=np.bool_)
    wanted = np.zeros(n, dtype=np.bool_)
    remaining = 0
    for t in targets:
        if not wanted[t]:
            wanted[t] = True
            remaining += 1
    cap = 4 * n + sources.size + 1
    keys = np.empty(cap)
    vals = np.empty(cap, dtype=np.int64)
    size = 0
    for s in sources:
        if dist[s] > 0.0:
            dist[s] = 0.0
            size = _heap_push(keys, vals, size, 0.0, s)
    while size > 0:
        d, u, size = _heap_pop(keys, vals, size)
        if done[u]:
            continue
        done[u] = True
        if wanted[u]:
            remaining -= 1
            if remaining == 0:
                break
        r = u // ncols
        c = u - r * ncols
        if r > 0:
            v = u - ncols
            if mask[r - 1, c] and not done[v]:
                nd = d + wv[r - 1, c]
                if nd < dist[v]:
                    dist[v] = nd
                    size = _heap_push(keys, vals, size, nd, v)
        if c > 0:
            v = u - 1
            if mask[r, c - 1] and not done[v]:
                nd = d + wh[r, c - 1]
                if nd < dist[v]:
                    dist[v] = nd
                    size = _heap_push(keys, vals, size, nd, v)
        if c < ncols - 1:
            v = u + 1
            if mask[r, c + 1] and not done[v]:
                nd = d + wh[r, c]
                if nd < dist[v]:
                    dist[v] = nd
                    size = _heap_push(keys, vals, size, nd, v)
        if r < nrows - 1:
            v = u + ncols
            if mask[r + 1, c] and not done[v]:
                nd = d + wv[r, c]
                if nd < dist[v]:
                    dist[v] = nd
                    size = _heap_push(keys, vals, size, nd, v)
    return dist


def grid_csr(wh: np.ndarray, wv: np.ndarray, mask: np.ndarray) -> sp.csr_matrix:
    """Symmetric CSR adjacency of the masked lattice."""
    nrows, ncols = mask.shape
    idx = np.arange(nrows * ncols).reshape(nrows, ncols)
    hm = mask[:, :-1] & mask[:, 1:]
    vm = mask[:-1, :] & mask[1:, :]
    rows = np.concatenate([idx[:, :-1][hm], idx[:-1, :][vm]])
    cols = np.concatenate([idx[:, 1:][hm], idx[1:, :][vm]])
    data = np.concatenate([wh[hm], wv[vm]])
    n = nrows * ncols
    g = sp.coo_matrix(
        (np.concatenate([data, data]), (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
        shape=(n, n),
    )
    return g.tocsr()


def grid_dijkstra(
    wh: np.ndarray,
    wv: np.ndarray,
    mask: np.ndarray,
    sources,
    target=-1,
) -> np.ndarray:
    """Distances (flat array, ``inf`` when unreached) from the nearest source.

    ``target`` is a flat index or an array of them.  The numba backend stops
    once every target is settled; entries farther than the last target are
    then upper bounds only, while every site on a shortest path to a target
    carries its exact distance.
    """
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    targets = np.atleast_1d(np.asarray(target, dtype=np.int64))
    targets = targets[targets >= 0]
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if numba_enabled():
        return _grid_dijkstra_nb(
            np.ascontiguousarray(wh, dtype=np.float64),
            np.ascontiguousarray(wv, dtype=np.float64),
            mask,
            sources,
            targets,
        )
    graph = grid_csr(wh, wv, mask)
    if sources.size == 1:
        return _sp_dijkstra(graph, directed=True, indices=int(sources[0]))
    return _sp_dijkstra(graph, directed=True, indices=sources, min_only=True)


# ------------------------------------------------------------- csr dijkstra
@_jit
def _csr_dijkstra_nb(indptr, indices, data, sources):
    n = indptr.size - 1
    dist = np.full(n, np.inf)
    done = np.zeros(n, dtype=np.bool_)
    cap = indices.size + sources.size + 1
    keys = np.empty(cap)
    vals = np.empty(cap, dtype=np.int64)
    size = 0
    for s in sources:
        if dist[s] > 0.0:
            dist[s] = 0.0
            size = _heap_push(keys, vals, size, 0.0, s)
    while size > 0:
        d, u, size = _heap_pop(keys, vals, size)
        if done[u]:
            continue
        done[u] = True
        for k in range(indptr[u], indptr[u + 1]):
            v = indices[k]
            if done[v]:
                continue
            nd = d + data[k]
            if nd < dist[v]:
                dist[v] = nd
                size = _heap_push(keys, vals, size, nd, v)
    return dist


def csr_dijkstra(graph: sp.csr_matrix, sources) -> np.ndarray:
    """Distances from the nearest source on a general nonnegative CSR graph."""
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    if numba_enabled():
        return _csr_dijkstra_nb(
            graph.indptr.astype(np.int64),
            graph.indices.astype(np.int64),
            graph.data.astype(np.float64),
            sources,
        )
    if sources.size == 1:
        return _sp_dijkstra(graph, directed=True, indices=int(sources[0]))
    return _sp_dijkstra(graph, directed=True, indices=sources, min_only=True)


# -------------------------------------------------------------- path walk
def _walk_py(dist, wh, wv, mask, start, goal):
    nrows, ncols = mask.shape
    out = np.empty(nrows * ncols, dtype=np.int64)
    k = 0
    cur = start
    out[k] = cur
    k += 1
    while cur != goal:
        r = cur // ncols
        c = cur - r * ncols
        here = dist[cur]
        nxt = -1
        # neighbours in increasing flat index: up, left, right, down
        if r > 0 and mask[r - 1, c] and dist[cur - ncols] + wv[r - 1, c] == here:
            nxt = cur - ncols
        elif c > 0 and mask[r, c - 1] and dist[cur - 1] + wh[r, c - 1] == here:
            nxt = cur - 1
        elif c < ncols - 1 and mask[r, c + 1] and dist[cur + 1] + wh[r, c] == here:
            nxt = cur + 1
        elif r < nrows - 1 and mask[r + 1, c] and dist[cur + ncols] + wv[r, c] == here:
            nxt = cur + ncols
        if nxt < 0:
            return out[:0]
        cur = nxt
        out[k] = cur
        k += 1
    return out[:k].copy()


_walk_nb = _jit(_walk_py)


def walk_path(dist, wh, wv, mask, start: int, goal: int) -> np.ndarray:
    """Lexicographically smallest shortest path ``start -> goal``.

    ``dist`` must hold exact distances to ``goal``.  At every step the
    smallest-index neighbour that lies on a shortest path is taken, which
    yields the lexicographically smallest site sequence.
    """
    fn = _walk_nb if numba_enabled() else _walk_py
    path = fn(
        np.asarray(dist, dtype=np.float64),
        np.ascontiguousarray(wh, dtype=np.float64),
        np.ascontiguousarray(wv, dtype=np.float64),
        np.ascontiguousarray(mask, dtype=np.bool_),
        int(start),
        int(goal),
    )
    if path.size == 0:
        raise RuntimeError("walk failed: distance field inconsistent with weights")
    return path
