"""Numeric kernels with a numba fast path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``VITAL_NUMBA`` is not set to ``0``.  Both paths return identical
results; ``tests/test_kernels.py`` checks that.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False


def numba_enabled() -> bool:
    return HAS_NUMBA and os.environ.get("VITAL_NUMBA", "1") != "0"


def _njit(func):
    if not HAS_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)


# ---------------------------------------------------------------------------
# area-average downsampling


@_njit
def _area_downsample_nb(img, factor):
    h, w, ch = img.shape
    oh = h // factor
    ow = w // factor
    out = np.zeros((oh, ow, ch), dtype=np.float64)
    inv = 1.0 / (factor * factor)
    for i in range(oh):
        for j in range(ow):
            for c in range(ch):
                acc = 0.0
                for di in range(factor):
                    for dj in range(factor):
                        acc += img[i * factor + di, j * factor + dj, c]
                out[i, j, c] = acc * inv
    return out


def _area_downsample_np(img, factor):
    h, w, ch = img.shape
    blocks = img.reshape(h // factor, factor, w // factor, factor, ch)
    return blocks.mean(axis=(1, 3))


def area_downsample(img: np.ndarray, factor: int, use_numba: bool | None = None) -> np.ndarray:
    """Average non-overlapping ``factor x factor`` blocks of an HxWxC image."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    if img.shape[0] % factor or img.shape[1] % factor:
        raise ValueError(f"image size {img.shape[:2]} not divisible by {factor}")
    if factor == 1:
        return img.copy()
    if use_numba is None:
        use_numba = numba_enabled()
    if use_numba:
        return _area_downsample_nb(img, factor)
    return _area_downsample_np(img, factor)


# ---------------------------------------------------------------------------
# Jaccard similarity between rows of two boolean incidence matrices


@_njit
def _jaccard_matrix_nb(a, b):
    na, nt = a.shape
    nb = b.shape[0]
    out = np.empty((na, nb), dtype=np.float64)
    for i in range(na):
        for j in range(nb):
            inter = 0
            union = 0
            for t in range(nt):
                x = a[i, t]
                y = b[j, t]
                if x and y:
                    inter += 1
                if x or y:
                    union += 1
            out[i, j] = 1.0 if union == 0 else inter / union
    return out


def _jaccard_matrix_np(a, b):
    ai = a.astype(np.int64)
    bi = b.astype(np.int64)
    inter = ai @ bi.T
    union = ai.sum(1)[:, None] + bi.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return out.astype(np.float64)


def jaccard_matrix(a: np.ndarray, b: np.ndarray, use_numba: bool | None = None) -> np.ndarray:
    """Pairwise Jaccard similarity between rows of boolean matrices ``a`` and ``b``.

    Two empty rows compare as 1.0.
    """
    a = np.ascontiguousarray(a, dtype=np.bool_)
    b = np.ascontiguousarray(b, dtype=np.bool_)
    if a.shape[1] != b.shape[1]:
        raise ValueError("incidence matrices disagree on vocabulary size")
    if use_numba is None:
        use_numba = numba_enabled()
    if use_numba:
        return _jaccard_matrix_nb(a, b)
    return _jaccard_matrix_np(a, b)


# ---------------------------------------------------------------------------
# Hamming fraction between binarized feature rows


@_njit
def _hamming_rows_nb(x, y, thresholds):
    n, d = x.shape
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        diff = 0
        for j in range(d):
            if (x[i, j] > thresholds[j]) != (y[i, j] > thresholds[j]):
                diff += 1
        out[i] = diff / d
    return out


def _hamming_rows_np(x, y, thresholds):
    return ((x > thresholds) != (y > thresholds)).mean(axis=1)


def hamming_rows(x: np.ndarray, y: np.ndarray, thresholds: np.ndarray,
                 use_numba: bool | None = None) -> np.ndarray:
    """Row-wise fraction of disagreeing bits after thresholding each dimension."""
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    y = np.ascontiguousarray(np.atleast_2d(y), dtype=np.float64)
    thresholds = np.ascontiguousarray(thresholds, dtype=np.float64)
    if x.shape != y.shape or x.shape[1] != thresholds.shape[0]:
        raise ValueError(f"shape mismatch: {x.shape}, {y.shape}, {thresholds.shape}")
    if use_numba is None:
        use_numba = numba_enabled()
    if use_numba:
        return _hamming_rows_nb(x, y, thresholds)
    return _hamming_rows_np(x, y, thresholds)


# ---------------------------------------------------------------------------
# mean pairwise Euclidean distance


@_njit
def _mean_pairwise_l2_nb(x):
    n, d = x.shape
    total = 0.0
    pairs = 0
    for i in range(n):
        for j in range(i + 1, n):
            acc = 0.0
            for t in range(d):
                diff = x[i, t] - x[j, t]
                acc += diff * diff
            total += np.sqrt(acc)
            pairs += 1
    return total / pairs


def _mean_pairwise_l2_np(x):
    iu = np.triu_indices(x.shape[0], k=1)
    diffs = x[:, None, :] - x[None, :, :]
    return float(np.sqrt((diffs ** 2).sum(-1))[iu].mean())


def mean_pairwise_l2(x: np.ndarray, use_numba: bool | None = None) -> float:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two rows")
    if use_numba is None:
        use_numba = numba_enabled()
    if use_numba:
        return float(_mean_pairwise_l2_nb(x))
    return _mean_pairwise_l2_np(x)
