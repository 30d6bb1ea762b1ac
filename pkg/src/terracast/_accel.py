"""Raster window kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``TERRACAST_NO_NUMBA`` is unset
(or ``0``). Both paths accumulate neighbor contributions in the same offset
order, so they agree bit for bit.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional speedup
    numba = None

HAVE_NUMBA = numba is not None
_BACKEND = "numba" if HAVE_NUMBA and os.environ.get("TERRACAST_NO_NUMBA", "0") in ("", "0") else "numpy"


def backend() -> str:
    return _BACKEND


def set_backend(name: str) -> None:
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _BACKEND = name


def window_offsets(size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Offsets of the square ring 1..size (center excluded) and their e^-d weights.

    Order is row-major over ``di, dj in -size..size``.
    """
    if size < 1:
        raise ValueError("neighborhood size must be >= 1")
    r = np.arange(-size, size + 1)
    di, dj = np.meshgrid(r, r, indexing="ij")
    keep = (di != 0) | (dj != 0)
    di, dj = di[keep].astype(np.int64), dj[keep].astype(np.int64)
    w = np.exp(-np.sqrt((di * di + dj * dj).astype(np.float64)))
    return di, dj, w


# ---------------------------------------------------------------------------
# numpy fallback
# ---------------------------------------------------------------------------

def _shift_slices(d: int, n: int) -> tuple[slice, slice]:
    """(destination, source) slices so that dst[x] reads src[x + d]."""
    if d >= 0:
        return slice(0, n - d), slice(d, n)
    return slice(-d, n), slice(0, n + d)


def _class_sums_np(cells, k, di, dj, w):
    rows, cols = cells.shape
    out = np.zeros((rows, cols, k))
    for o in range(di.size):
        if abs(di[o]) >= rows or abs(dj[o]) >= cols:
            continue
        ri, rs = _shift_slices(int(di[o]), rows)
        ci, cs = _shift_slices(int(dj[o]), cols)
        src = cells[rs, cs]
        dst = out[ri, ci]
        for c in range(k):
            dst[..., c] += np.where(src == c + 1, w[o], 0.0)
    out[cells == 0] = 0.0
    return out


def _frontier_np(cells, di, dj):
    rows, cols = cells.shape
    mask = np.zeros((rows, cols), dtype=bool)
    for o in range(di.size):
        if abs(di[o]) >= rows or abs(dj[o]) >= cols:
            continue
        ri, rs = _shift_slices(int(di[o]), rows)
        ci, cs = _shift_slices(int(dj[o]), cols)
        src = cells[rs, cs]
        mask[ri, ci] |= (src != 0) & (src != cells[ri, ci])
    mask &= cells != 0
    return mask


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

def _class_sums_py(cells, k, di, dj, w):
    rows, cols = cells.shape
    out = np.zeros((rows, cols, k))
    for i in range(rows):
        for j in range(cols):
            if cells[i, j] == 0:
                continue
            for o in range(di.size):
                ii = i + di[o]
                jj = j + dj[o]
                if ii < 0 or ii >= rows or jj < 0 or jj >= cols:
                    continue
                c = cells[ii, jj]
                if c > 0:
                    out[i, j, c - 1] += w[o]
    return out


def _frontier_py(cells, di, dj):
    rows, cols = cells.shape
    mask = np.zeros((rows, cols), dtype=np.bool_)
    for i in range(rows):
        for j in range(cols):
            here = cells[i, j]
            if here == 0:
                continue
            for o in range(di.size):
                ii = i + di[o]
                jj = j + dj[o]
                if ii < 0 or ii >= rows or jj < 0 or jj >= cols:
                    continue
                c = cells[ii, jj]
                if c != 0 and c != here:
                    mask[i, j] = True
                    break
    return mask


if HAVE_NUMBA:
    _class_sums_nb = numba.njit(cache=True)(_class_sums_py)
    _frontier_nb = numba.njit(cache=True)(_frontier_py)
else:  # pragma: no cover
    _class_sums_nb = _class_sums_py
    _frontier_nb = _frontier_py


def class_sums(cells: np.ndarray, k: int, size: int, weighted: bool) -> np.ndarray:
    """Per-pixel sums over the size-``size`` square ring, one column per class.

    With ``weighted`` each neighbor contributes e^-d (Euclidean distance in
    pixels), otherwise 1. Missing cells contribute nothing and get all zeros.
    """
    cells = np.ascontiguousarray(cells, dtype=np.int64)
    di, dj, w = window_offsets(size)
    if not weighted:
        w = np.ones_like(w)
    if _BACKEND == "numba":
        return _class_sums_nb(cells, int(k), di, dj, w)
    return _class_sums_np(cells, int(k), di, dj, w)


def frontier(cells: np.ndarray, order: int) -> np.ndarray:
    cells = np.ascontiguousarray(cells, dtype=np.int64)
    di, dj, _ = window_offsets(order)
    if _BACKEND == "numba":
        return _frontier_nb(cells, di, dj)
    return _frontier_np(cells, di, dj)
