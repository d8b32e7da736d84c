"""Dense linear-algebra kernels used everywhere else in the package.

All routines operate on float64 ndarrays and are deterministic: given the
same inputs (and, where relevant, the same seed) they return bitwise
identical results on a fixed platform/numpy build.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import DefinitenessError, NumericError, ShapeError

__all__ = [
    "logdet_psd",
    "softmax_columns",
    "spectral_norm",
    "orthonormal_basis",
    "rng_for",
    "stable_seed",
]


def logdet_psd(mat: np.ndarray, sym_tol: float = 1e-10) -> float:
    """log det of a symmetric positive definite matrix via Cholesky.

    Uses ``2 * sum(log(diag(L)))`` with ``L`` the lower Cholesky factor,
    which is far better conditioned than forming the determinant.

    Raises ShapeError for non-square input, DefinitenessError when the
    matrix is asymmetric beyond ``sym_tol`` or the factorization fails.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {mat.shape}")
    if not np.isfinite(mat).all():
        raise NumericError("matrix contains non-finite entries")
    asym = np.abs(mat - mat.T).max() if mat.size else 0.0
    if asym > sym_tol:
        raise DefinitenessError(f"matrix is not symmetric (max|M - M^T| = {asym:.3e})")
    try:
        chol = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise DefinitenessError("matrix is not positive definite") from exc
    return float(2.0 * np.sum(np.log(np.diag(chol))))


def softmax_columns(scores: np.ndarray) -> np.ndarray:
    """Column-wise softmax (normalizes over axis -2).

    The column maximum is subtracted before exponentiation so large scores
    do not overflow.  Works on stacks of matrices: the last two axes are
    treated as the matrix.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim < 2:
        raise ShapeError("softmax_columns expects at least a 2-d array")
    if not np.isfinite(scores).all():
        raise NumericError("scores contain non-finite entries")
    shifted = scores - scores.max(axis=-2, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=-2, keepdims=True)


def spectral_norm(mat: np.ndarray, iters: int = 500, tol: float = 1e-12) -> float:
    """Largest singular value by power iteration on the smaller Gram matrix.

    The start vector is a fixed seeded Gaussian, so repeated calls on the
    same matrix give the same value.  A zero matrix returns 0.0.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim == 1:
        mat = mat.reshape(1, -1)
    if mat.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {mat.shape}")
    if not np.isfinite(mat).all():
        raise NumericError("matrix contains non-finite entries")
    if not mat.any():
        return 0.0
    # iterate on the smaller of M^T M / M M^T
    gram = mat.T @ mat if mat.shape[1] <= mat.shape[0] else mat @ mat.T
    n = gram.shape[0]
    vec = np.random.default_rng(0xC0FFEE).standard_normal(n)
    vec /= np.linalg.norm(vec)
    prev = 0.0
    for _ in range(iters):
        vec = gram @ vec
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            return 0.0
        vec /= norm
        if abs(norm - prev) <= tol * max(1.0, norm):
            break
        prev = norm
    return float(np.sqrt(float(vec @ (gram @ vec))))


def orthonormal_basis(d: int, seed: int, cols: int | None = None) -> np.ndarray:
    """Deterministic random orthonormal matrix of shape (d, cols).

    QR of a seeded Gaussian with the sign of each R diagonal entry folded
    into Q, which makes the factorization unique and hence reproducible.
    """
    if d <= 0:
        raise ShapeError("dimension must be positive")
    cols = d if cols is None else cols
    if cols > d:
        raise ShapeError("cannot request more orthonormal columns than rows")
    gauss = rng_for(seed).standard_normal((d, cols))
    q, r = np.linalg.qr(gauss)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def stable_seed(*parts) -> int:
    """Collapse a tuple of ints/strings into a stable 63-bit seed.

    Used to derive independent named streams (one per zoo cell, per layer,
    per epoch, ...) from a single global seed without collisions.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def rng_for(*parts) -> np.random.Generator:
    """A fresh Generator keyed by the given seed parts."""
    if len(parts) == 1 and isinstance(parts[0], (int, np.integer)):
        return np.random.default_rng(int(parts[0]))
    return np.random.default_rng(stable_seed(*parts))
