"""Dense linear-algebra kernels used throughout the toolkit.

All public functions operate on float64 numpy arrays. Weights may be stored
on disk in float32, but every computation here happens in 64-bit so that
accumulated statistics and solver residuals stay tight.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ArgumentError, ShapeError, SingularMatrixError

SYMMETRY_RTOL = 1e-9


def as_matrix(a, name: str = "array") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be rank-2, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit shape check.

    Summation is delegated to the platform BLAS; for fixed inputs the result
    is reproducible bit-for-bit across runs on the same machine.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def check_symmetric(a: np.ndarray, name: str = "matrix") -> None:
    scale = np.abs(a).max() if a.size else 0.0
    if np.abs(a - a.T).max() > SYMMETRY_RTOL * max(scale, 1e-300):
        raise ShapeError(f"{name} is not symmetric within tolerance")


def spd_solve(a, rhs, ridge: float = 0.0) -> np.ndarray:
    """Solve (a + ridge*I) X = rhs via Cholesky factorization.

    The factorization doubles as the positive-definiteness check: a failure
    means the ridge is too small for this system.
    """
    a = as_matrix(a, "a")
    rhs = as_matrix(rhs, "rhs")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeError(f"system matrix must be square, got {a.shape}")
    if rhs.shape[0] != n:
        raise ShapeError(f"rhs rows {rhs.shape[0]} != system size {n}")
    if ridge < 0:
        raise ArgumentError(f"ridge must be nonnegative, got {ridge}")
    check_symmetric(a, "system matrix")
    try:
        factor = cho_factor(a + ridge * np.eye(n), lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(
            f"matrix not positive definite at ridge={ridge!r}; "
            "increase the ridge coefficient"
        ) from exc
    return cho_solve(factor, rhs)


def kronecker(a, b) -> np.ndarray:
    """Kronecker product: block (i, j) of the result equals a[i, j] * b."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    return np.kron(a, b)


def kmeans(rows, k: int, seed: int, max_iter: int = 100) -> np.ndarray:
    """Lloyd's k-means with seeded k-means++ initialization.

    Returns the cluster label of every row. Empty clusters are re-seeded to
    the point farthest from its current centroid, so all k clusters are
    non-empty on return. Fully deterministic for fixed inputs.
    """
    x = as_matrix(rows, "rows")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ArgumentError(f"k={k} must be in [1, {n}]")
    if max_iter < 1:
        raise ArgumentError(f"max_iter must be positive, got {max_iter}")

    rng = np.random.default_rng(seed)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))

    labels = None
    for _ in range(max_iter):
        dists = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        for j in range(k):
            members = new_labels == j
            if not members.any():
                far = dists[np.arange(n), new_labels].argmax()
                centers[j] = x[far]
                new_labels[far] = j
                members = new_labels == j
            centers[j] = x[members].mean(axis=0)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels


def kmeans_objective(rows, labels, k: int) -> float:
    """Within-cluster sum of squared distances to the cluster means."""
    x = as_matrix(rows, "rows")
    total = 0.0
    for j in range(k):
        members = x[labels == j]
        if len(members):
            total += ((members - members.mean(axis=0)) ** 2).sum()
    return float(total)
