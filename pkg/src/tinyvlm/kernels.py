"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The two loops that dominate wall time outside BLAS are bilinear image
resampling (preprocessing at 1820-pixel resolutions) and the Levenshtein
dynamic program (ANLS scoring). Both ship in two versions; set
``TINYVLM_NO_NUMBA=1`` to force the numpy path. ``benchmarks/bench_kernels.py``
compares the two.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_FLAG = "TINYVLM_NO_NUMBA"


def _numba_requested() -> bool:
    return os.environ.get(_ENV_FLAG, "").strip().lower() not in ("1", "true", "yes")


def _bilinear_resize_numpy(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Vectorized bilinear resample with half-pixel centers, edge clamped."""
    in_h, in_w = src.shape[0], src.shape[1]
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, in_h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, in_w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = src[y0[:, None], x0[None, :]] * (1 - wx) + src[y0[:, None], x1[None, :]] * wx
    bot = src[y1[:, None], x0[None, :]] * (1 - wx) + src[y1[:, None], x1[None, :]] * wx
    return top * (1 - wy) + bot * wy


def _levenshtein_py(a: np.ndarray, b: np.ndarray) -> int:
    """Row-rolling edit-distance DP; a and b are integer code arrays."""
    n, m = len(a), len(b)
    if n == 0:
        return m
    if m == 0:
        return n
    prev = np.arange(m + 1, dtype=np.int64)
    cur = np.empty(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev, cur = cur, prev
    return int(prev[m])


_BACKEND = "numpy"

if _numba_requested():
    try:
        from numba import njit

        @njit(cache=True)
        def _bilinear_resize_numba(src, out_h, out_w):  # pragma: no cover - jit
            in_h, in_w, ch = src.shape
            out = np.empty((out_h, out_w, ch), dtype=np.float64)
            sy = in_h / out_h
            sx = in_w / out_w
            for i in range(out_h):
                y = (i + 0.5) * sy - 0.5
                y0 = int(np.floor(y))
                if y0 < 0:
                    y0 = 0
                if y0 > in_h - 1:
                    y0 = in_h - 1
                y1 = min(y0 + 1, in_h - 1)
                wy = y - y0
                if wy < 0.0:
                    wy = 0.0
                if wy > 1.0:
                    wy = 1.0
                for j in range(out_w):
                    x = (j + 0.5) * sx - 0.5
                    x0 = int(np.floor(x))
                    if x0 < 0:
                        x0 = 0
                    if x0 > in_w - 1:
                        x0 = in_w - 1
                    x1 = min(x0 + 1, in_w - 1)
                    wx = x - x0
                    if wx < 0.0:
                        wx = 0.0
                    if wx > 1.0:
                        wx = 1.0
                    for c in range(ch):
                        top = src[y0, x0, c] * (1 - wx) + src[y0, x1, c] * wx
                        bot = src[y1, x0, c] * (1 - wx) + src[y1, x1, c] * wx
                        out[i, j, c] = top * (1 - wy) + bot * wy
            return out

        @njit(cache=True)
        def _levenshtein_numba(a, b):  # pragma: no cover - jit
            n, m = len(a), len(b)
            if n == 0:
                return m
            if m == 0:
                return n
            prev = np.arange(m + 1)
            cur = np.empty(m + 1, dtype=np.int64)
            for i in range(1, n + 1):
                cur[0] = i
                for j in range(1, m + 1):
                    cost = 0 if a[i - 1] == b[j - 1] else 1
                    best = prev[j] + 1
                    if cur[j - 1] + 1 < best:
                        best = cur[j - 1] + 1
                    if prev[j - 1] + cost < best:
                        best = prev[j - 1] + cost
                    cur[j] = best
                for j in range(m + 1):
                    prev[j] = cur[j]
            return prev[m]

        _BACKEND = "numba"
    except ImportError:
        _BACKEND = "numpy"


def active_backend() -> str:
    """Which kernel implementation is live: "numba" or "numpy"."""
    return _BACKEND


def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample an (h, w, c) float64 image to (out_h, out_w, c).

    Half-pixel sample centers, no antialias filter; deterministic across
    backends up to float rounding.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    src = np.ascontiguousarray(src, dtype=np.float64)
    if src.ndim != 3:
        raise ValueError(f"expected (h, w, c) array, got shape {src.shape}")
    if src.shape[0] == out_h and src.shape[1] == out_w:
        return src.copy()
    if _BACKEND == "numba":
        return _bilinear_resize_numba(src, out_h, out_w)
    return _bilinear_resize_numpy(src, out_h, out_w)


def levenshtein(a: str, b: str) -> int:
    """Edit distance between two strings (unit costs)."""
    ca = np.frombuffer(a.encode("utf-32-le"), dtype=np.uint32)
    cb = np.frombuffer(b.encode("utf-32-le"), dtype=np.uint32)
    if _BACKEND == "numba":
        return int(_levenshtein_numba(ca, cb))
    return _levenshtein_py(ca, cb)
