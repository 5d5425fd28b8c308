"""Numeric primitives: normalization, cosine similarity and the psi kernel.

Everything here works in float64 regardless of the input dtype.
"""
import numpy as np

from .errors import DimensionMismatch, ZeroVector

ZERO_NORM = 1e-12


def _as_vector(v):
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"expected a 1-D vector, got shape {arr.shape}")
    return arr


def l2_normalize(v):
    v = _as_vector(v)
    norm = np.linalg.norm(v)
    if norm < ZERO_NORM:
        raise ZeroVector(f"cannot normalize vector with norm {norm:.3g}")
    return v / norm


def l2_normalize_rows(x):
    """Row-wise :func:`l2_normalize` for an (N, D) batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatch(f"expected (N, D) batch, got shape {x.shape}")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms < ZERO_NORM):
        raise ZeroVector("batch contains a zero row")
    return x / norms


def cosine_sim(a, b):
    a = _as_vector(a)
    b = _as_vector(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < ZERO_NORM or nb < ZERO_NORM:
        raise ZeroVector("cosine similarity of a zero vector")
    # clip guards the rounding overshoot for (anti)parallel vectors
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def psi(a, b, tau):
    """exp(cos(a, b) / tau)."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return float(np.exp(cosine_sim(a, b) / tau))


def similarity_matrix(rows, cols):
    """Pairwise cosine similarities between two normalized batches."""
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    if rows.ndim != 2 or cols.ndim != 2:
        raise DimensionMismatch("similarity_matrix expects 2-D batches")
    if rows.shape[1] != cols.shape[1]:
        raise DimensionMismatch(f"dimension {rows.shape[1]} vs {cols.shape[1]}")
    return rows @ cols.T
