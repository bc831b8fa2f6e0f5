"""
Dense linear algebra helpers: normalization, cosine similarity, selections, softmax.

All arithmetic is carried out in float64. Every selection breaks ties towards the
lowest index.
"""
import logging

import numpy as np

from errors import DimensionMismatch, NearZeroNorm, NonPositiveTemperature, NonFiniteValue

DEFAULT_EPS = 1e-12

logger = logging.getLogger(__name__)


def as_matrix(m) -> np.ndarray:
    """Return `m` as a finite 2-D float64 array."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionMismatch(f"expected a matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue("matrix contains non-finite entries")
    return arr


def l2_normalize(v, eps: float = DEFAULT_EPS) -> np.ndarray:
    """
    Scale a vector to unit Euclidean norm.

    Args:
        v: Finite vector.
        eps (float): Smallest norm accepted.

    Returns:
        np.ndarray: Unit-norm float64 copy of `v`.

    Raises:
        NearZeroNorm: If ||v|| < eps.
    """
    vec = np.asarray(v, dtype=np.float64)
    assert vec.ndim == 1, "v must be a vector."
    if not np.all(np.isfinite(vec)):
        raise NonFiniteValue("vector contains non-finite entries")
    norm = np.linalg.norm(vec)
    if norm < eps:
        raise NearZeroNorm(f"vector norm {norm:.3e} below eps {eps:.1e}")
    return vec / norm


def normalize_rows(m, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Row-wise `l2_normalize`; raises NearZeroNorm naming the first bad row."""
    arr = as_matrix(m)
    norms = np.linalg.norm(arr, axis=1)
    bad = np.flatnonzero(norms < eps)
    if bad.size:
        raise NearZeroNorm(f"row {int(bad[0])} has norm {norms[bad[0]]:.3e} below eps {eps:.1e}")
    return arr / norms[:, None]


def cosine_sim_matrix(a_rows, b_rows) -> np.ndarray:
    """
    Pairwise dot products of two row-normalized matrices.

    Args:
        a_rows: (n, d) row-normalized matrix.
        b_rows: (m, d) row-normalized matrix.

    Returns:
        np.ndarray: (n, m) matrix with out[i, j] = a_i . b_j.

    Raises:
        DimensionMismatch: If the embedding dimensions differ.
    """
    a = as_matrix(a_rows)
    b = as_matrix(b_rows)
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"dimension {a.shape[1]} does not match {b.shape[1]}")
    return a @ b.T


def row_argmax(m) -> np.ndarray:
    """Index of the maximum of every row (first occurrence wins)."""
    arr = np.asarray(m, dtype=np.float64)
    assert arr.ndim == 2 and arr.shape[0] >= 1 and arr.shape[1] >= 1, "m must be a non-empty matrix."
    return np.argmax(arr, axis=1)


def row_topk(row, k: int) -> np.ndarray:
    """
    Indices of the `k` largest entries in descending value order.

    Returns min(k, len(row)) indices; equal values keep index order.
    """
    vec = np.asarray(row, dtype=np.float64)
    assert vec.ndim == 1, "row must be a vector."
    assert isinstance(k, (int, np.integer)) and k >= 1, "k must be a positive integer."
    order = np.argsort(-vec, kind="stable")
    return order[: min(int(k), vec.shape[0])]


def softmax(row, tau: float) -> np.ndarray:
    """
    Temperature softmax with max-subtraction.

    Raises:
        NonPositiveTemperature: If tau <= 0.
    """
    if not tau > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau}")
    z = np.asarray(row, dtype=np.float64) / tau
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def normalize_backward(unit: np.ndarray, norm: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """
    Backward pass of row normalization u = x / ||x||.

    Args:
        unit: (n, d) normalized rows.
        norm: (n,) pre-normalization norms.
        grad_unit: (n, d) gradient with respect to the normalized rows.

    Returns:
        np.ndarray: (n, d) gradient with respect to the raw rows.
    """
    radial = np.sum(unit * grad_unit, axis=1, keepdims=True)
    return (grad_unit - unit * radial) / norm[:, None]
