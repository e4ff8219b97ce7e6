"""Vector kernels shared across the package.

An embedding is a 1-D float64 array of unit Euclidean norm; a list of
embeddings is a 2-D array with one embedding per row.
"""

from __future__ import annotations

import numpy as np

from oodcl.autodiff import ZERO_NORM_THRESHOLD, logsumexp
from oodcl.errors import DimensionMismatch, EmptyInput, ZeroVector


def as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"expected a 1-D vector, got shape {arr.shape}")
    return arr


def as_matrix(rows) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        return arr.reshape(0, 0)
    if arr.ndim != 2:
        raise DimensionMismatch(f"expected a list of equal-length vectors, got shape {arr.shape}")
    return arr


def normalize(v) -> np.ndarray:
    """Return ``v / ||v||``. Raises :class:`ZeroVector` when the norm is below 1e-12."""
    v = as_vector(v)
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    # math.hypot-style scaling keeps tiny but representable vectors exact
    scale = np.max(np.abs(v)) if v.size else 0.0
    norm = scale * np.sqrt(np.sum((v / scale) ** 2)) if scale > 0 else 0.0
    if norm < ZERO_NORM_THRESHOLD:
        raise ZeroVector(f"vector norm {norm:g} is below {ZERO_NORM_THRESHOLD:g}")
    return v / norm


def dot(u, v) -> float:
    u, v = as_vector(u), as_vector(v)
    if u.shape != v.shape:
        raise DimensionMismatch(f"dot of dimensions {u.size} and {v.size}")
    return float(u @ v)


def log_sum_exp(xs) -> float:
    """Stable ``log(sum(exp(xs)))`` of a nonempty finite vector."""
    xs = np.asarray(xs, dtype=np.float64).ravel()
    if xs.size == 0:
        raise EmptyInput("log_sum_exp of an empty vector")
    return float(logsumexp(xs, axis=0))


def pairwise_similarity(a, b) -> np.ndarray:
    """Matrix of inner products, entry ``(i, j) = a[i] . b[j]``."""
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"embedding dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    return a @ b.T
