"""Small dense linear algebra, softplus derivatives and seeded random streams.

Matrices are plain float64 ``numpy`` arrays. Most routines accept a leading
batch axis so the ICNN code can factor a whole batch of Hessians at once.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import NotPositiveDefinite, NotSymmetric

SYM_TOL = 1e-10


def softplus_d(u, order: int = 0):
    """Softplus ``log(1 + e^u)`` or its derivative of the given order.

    Orders 0-3 are supported (order 3 is needed by the parameter gradient of
    the Hessian log-determinant). Works elementwise on arrays.
    """
    u = np.asarray(u, dtype=np.float64)
    if order == 0:
        return np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))
    s = expit(u)
    if order == 1:
        return s
    q = s * (1.0 - s)
    if order == 2:
        return q
    if order == 3:
        return q * (1.0 - 2.0 * s)
    raise ValueError(f"order must be 0, 1, 2 or 3, got {order}")


def sigmoid(u):
    return expit(np.asarray(u, dtype=np.float64))


def symmetrize(H):
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def chol_logdet(H):
    """Cholesky factor and log-determinant of SPD matrix (or batch of them).

    Returns ``(L, logdet)`` with ``L @ L.T == H``. Raises
    :class:`NotPositiveDefinite` when factorization hits a non-positive pivot.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.shape[-1] != H.shape[-2]:
        raise ValueError(f"expected square matrix, got shape {H.shape}")
    if not np.all(np.isfinite(H)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    if not np.all(diag > 0):
        raise NotPositiveDefinite("non-positive pivot")
    return L, 2.0 * np.sum(np.log(diag), axis=-1)


def chol_solve(L, B):
    """Solve ``(L L^T) X = B`` for (batched) lower-triangular ``L``."""
    Y = np.linalg.solve(L, B)
    return np.linalg.solve(np.swapaxes(L, -1, -2), Y)


def spd_inverse(H):
    L, logdet = chol_logdet(H)
    eye = np.broadcast_to(np.eye(H.shape[-1]), H.shape)
    return chol_solve(L, eye), logdet


def check_symmetric(A, tol: float = SYM_TOL):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise NotSymmetric(f"expected square matrix, got shape {A.shape}")
    asym = np.max(np.abs(A - A.T)) if A.size else 0.0
    if asym > tol * max(1.0, np.max(np.abs(A))):
        raise NotSymmetric(f"asymmetry {asym:.3e} exceeds {tol:g}")
    return symmetrize(A)


def sym_expm(A, t: float):
    """``exp(-A t)`` for symmetric ``A`` via eigendecomposition."""
    A = check_symmetric(A)
    w, V = np.linalg.eigh(A)
    return symmetrize((V * np.exp(-w * t)) @ V.T)


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent, reproducible stream ``(seed, stream)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


def random_spd(dim: int, rng: np.random.Generator):
    """Random SPD matrix with eigenvalues in [1, 2], mirroring ``sklearn.datasets.make_spd_matrix``."""
    X = rng.uniform(size=(dim, dim))
    U, _, Vt = np.linalg.svd(X.T @ X)
    return symmetrize(U @ np.diag(1.0 + rng.uniform(size=dim)) @ Vt)
