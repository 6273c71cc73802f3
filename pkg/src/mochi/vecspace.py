"""Vector primitives on the unit hypersphere.

All functions accept plain sequences or numpy arrays and compute in float64.
Functions that take a single vector also accept a 2-D array and then work
row-wise.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, EmptyInput, NonFinite, TooFewPoints, ZeroVectorError

EPS_NORM = 1e-12


def as_vectors(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim not in (1, 2):
        raise DimensionMismatch(f"expected a vector or a matrix of row vectors, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFinite("vector contains NaN or Inf")
    return arr


def row_norms(v: np.ndarray) -> np.ndarray:
    # explicit sum-of-squares so 1-D and row-wise results share one code path
    return np.sqrt(np.sum(v * v, axis=-1))


def l2_normalize(v, eps: float = EPS_NORM) -> np.ndarray:
    """Scale ``v`` (or every row of ``v``) to unit Euclidean norm.

    Raises ZeroVectorError when a norm is at or below ``eps``.
    """
    arr = as_vectors(v)
    norms = row_norms(arr)
    if np.any(norms <= eps):
        raise ZeroVectorError(f"cannot normalize a vector with norm <= {eps}")
    if arr.ndim == 1:
        return arr / norms
    return arr / norms[:, None]


def dot(u, v) -> float:
    a = np.asarray(u, dtype=np.float64)
    b = np.asarray(v, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatch(f"dot of shapes {a.shape} and {b.shape}")
    return float(a @ b)


def tempered_softmax(logits, tau: float = 1.0) -> np.ndarray:
    """Softmax of ``logits / tau`` with max subtraction.

    Entries equal to ``-inf`` are allowed and receive probability zero, which
    is how masked negatives are handled by the batched loss. At least one
    entry must be finite.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise EmptyInput("softmax of an empty sequence")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if np.any(np.isnan(z)) or np.any(z == np.inf):
        raise NonFinite("softmax logits must be finite")
    z = z / tau
    top = np.max(z, axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise NonFinite("softmax needs at least one finite logit per row")
    e = np.exp(z - top)
    return e / np.sum(e, axis=-1, keepdims=True)


def pca_project_2d(points) -> tuple[np.ndarray, float]:
    """Project points onto the top two principal axes of the centered cloud.

    Returns ``(coords, retained)`` where ``coords`` has shape (n, 2) and
    ``retained`` is the fraction of total variance carried by the two axes
    (1.0 for a cloud with zero variance).
    """
    x = as_vectors(points)
    if x.ndim != 2 or x.shape[0] < 3:
        raise TooFewPoints("PCA projection needs at least 3 points")
    centered = x - x.mean(axis=0)
    _, sing, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:2]
    if axes.shape[0] < 2:
        axes = np.vstack([axes, np.zeros((2 - axes.shape[0], x.shape[1]))])
    coords = centered @ axes.T
    var = sing**2
    total = float(var.sum())
    retained = 1.0 if total == 0.0 else float(var[:2].sum() / total)
    return coords, retained
