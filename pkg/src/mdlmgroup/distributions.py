"""Dense-matrix probability kernels.

Cholesky with a one-shot jitter policy, matrix-variate and multivariate
normal sampling, and inverse-Wishart sampling by the Bartlett construction.

Inverse-Wishart convention: ``sample_inverse_wishart(dof, scale)`` has mean
``scale * dof / (dof - q - 1)`` (for ``dof > q + 1``), i.e. ``scale`` is the
running estimate of the covariance itself and the conventional scale matrix
is ``dof * scale``.

All samplers take an explicit :class:`numpy.random.Generator` and are pure
functions of their arguments and the generator state.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, DofTooSmall, NotPositiveDefinite, ValidationError

JITTER_REL = 1e-10
# absolute floor so an all-zero covariance still factors (degenerate draws)
JITTER_FLOOR = 1e-300
SYMMETRY_RTOL = 1e-12


def symmetrize(a):
    a = np.asarray(a, dtype=float)
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _check_square(a):
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionMismatch(f"expected square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    scale = np.max(np.abs(a)) if a.size else 0.0
    asym = np.max(np.abs(a - np.swapaxes(a, -1, -2))) if a.size else 0.0
    if asym > SYMMETRY_RTOL * scale:
        raise ValidationError(f"matrix is not symmetric (max asymmetry {asym:.3g})")


def _cholesky_one(a):
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    dim = a.shape[-1]
    jitter = max(JITTER_REL * np.trace(a) / dim, JITTER_FLOOR)
    try:
        return np.linalg.cholesky(a + jitter * np.eye(dim))
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(
            f"matrix is not positive definite after jitter {jitter:.3g}"
        ) from None


def cholesky(a):
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Accepts a single matrix or a stack ``(..., d, d)``. If a factorization
    fails, ``1e-10 * trace / dim`` (never less than a tiny absolute floor) is
    added to the diagonal once and the factorization retried.

    Raises
    ------
    NotPositiveDefinite
        If the matrix is still not positive definite after jitter.
    """
    a = np.asarray(a, dtype=float)
    _check_square(a)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    if a.ndim == 2:
        return _cholesky_one(a)
    flat = a.reshape(-1, *a.shape[-2:])
    out = np.empty_like(flat)
    for i, m in enumerate(flat):
        out[i] = _cholesky_one(m)
    return out.reshape(a.shape)


@dataclass(frozen=True)
class MatrixNormalParams:
    """Parameters of a p x q matrix normal ``N_pq[mean, row_cov, col_cov]``.

    ``vec(X)`` (column stacking) has covariance ``kron(col_cov, row_cov)``.
    ``degraded`` is set when the parameters come from a normal approximation
    to a matrix-T with fewer than 30 degrees of freedom.
    """

    mean: np.ndarray
    row_cov: np.ndarray
    col_cov: np.ndarray
    degraded: bool = field(default=False, compare=False)

    def __post_init__(self):
        mean = np.atleast_2d(np.asarray(self.mean, dtype=float))
        row = np.atleast_2d(np.asarray(self.row_cov, dtype=float))
        col = np.atleast_2d(np.asarray(self.col_cov, dtype=float))
        p, q = mean.shape
        if row.shape != (p, p) or col.shape != (q, q):
            raise DimensionMismatch(
                f"mean {mean.shape} incompatible with row_cov {row.shape} / col_cov {col.shape}"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "row_cov", row)
        object.__setattr__(self, "col_cov", col)

    @property
    def shape(self):
        return self.mean.shape


def sample_matrix_normal(params, rng, size=None):
    """Draw ``X = M + A Z B^T`` with ``A``, ``B`` the Cholesky factors of the
    row and column covariances and ``Z`` iid standard normal.

    ``size`` adds leading sample dimensions.
    """
    a = cholesky(params.row_cov)
    b = cholesky(params.col_cov)
    shape = () if size is None else tuple(np.atleast_1d(size))
    z = rng.standard_normal(shape + params.shape)
    return params.mean + a @ z @ b.T


def sample_mvn(mean, cov, rng, size=None):
    """Draw from ``N_q(mean, cov)``; the p = 1 case of the matrix normal."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
        raise DimensionMismatch(f"mean {mean.shape} incompatible with cov {cov.shape}")
    params = MatrixNormalParams(mean[None, :], np.ones((1, 1)), cov)
    x = sample_matrix_normal(params, rng, size=size)
    return x[..., 0, :]


def inverse_wishart_factor(dof, scale, rng, size=None):
    """Square-root factors ``Y`` of inverse-Wishart draws, ``Sigma = Y Y^T``.

    Bartlett construction: with ``U = chol(dof * scale)`` and ``A`` the
    Bartlett lower-triangular factor of a standard Wishart (chi-square
    diagonal with ``dof - i`` degrees of freedom, standard normal below),
    ``Sigma = U A^{-T} A^{-1} U^T``, so ``Y = U A^{-T}``. ``Y`` is not
    triangular but serves as a column factor for matrix-normal draws.
    """
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    q = scale.shape[0]
    if not dof > q - 1:
        raise DofTooSmall(f"inverse-Wishart needs dof > q - 1 = {q - 1}, got {dof}")
    shape = () if size is None else tuple(np.atleast_1d(size))
    u = cholesky(dof * symmetrize(scale))
    bart = np.zeros(shape + (q, q))
    rows, cols = np.tril_indices(q, -1)
    bart[..., rows, cols] = rng.standard_normal(shape + (rows.size,))
    diag = np.arange(q)
    bart[..., diag, diag] = np.sqrt(rng.chisquare(dof - diag, size=shape + (q,)))
    return u @ np.swapaxes(np.linalg.inv(bart), -1, -2)


def sample_inverse_wishart(dof, scale, rng, size=None):
    """Draw ``Sigma ~ IW`` with mean ``scale * dof / (dof - q - 1)``.

    Raises
    ------
    DofTooSmall
        If ``dof <= q - 1``.
    """
    y = inverse_wishart_factor(dof, scale, rng, size=size)
    return symmetrize(y @ np.swapaxes(y, -1, -2))
