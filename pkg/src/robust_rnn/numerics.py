"""Dense symmetric linear algebra used by certificates and barriers.

Everything here operates on plain float64 ndarrays. Matrices handed to the
positive-definiteness routines are re-symmetrized as (M + M.T)/2 on entry,
because LMI assembly accumulates floating-point asymmetry and callers are
not trusted to clean it up.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la


class NotPositiveDefiniteError(ValueError):
    """Raised when a solve or factorization requires a PD matrix and gets none."""


@dataclass(frozen=True)
class PdReport:
    """Outcome of a Cholesky-based positive-definiteness probe.

    margin is the smallest squared Cholesky pivot (0.0 if factorization
    failed); logdet is NaN unless is_pd.
    """

    is_pd: bool
    margin: float
    logdet: float


def sym(M):
    """Return the symmetric part (M + M.T) / 2 as a float64 array."""
    M = np.asarray(M, dtype=float)
    return 0.5 * (M + M.T)


def _check_finite(M):
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has NaN/Inf entries")


def _first_bad_pivot(M):
    """Index of the first nonpositive pivot of a (failed) Cholesky factorization."""
    A = np.array(M, dtype=float)
    n = A.shape[0]
    for k in range(n):
        if A[k, k] <= 0.0:
            return k
        A[k, k] = np.sqrt(A[k, k])
        if k + 1 < n:
            A[k + 1:, k] /= A[k, k]
            A[k + 1:, k + 1:] -= np.outer(A[k + 1:, k], A[k + 1:, k])
    return n - 1  # unreachable unless the caller saw a failure we cannot reproduce


def cholesky_logdet(M):
    """Probe symmetric M for positive definiteness via Cholesky.

    Returns a PdReport with logdet = 2 * sum(log diag(L)) and
    margin = min(diag(L))**2 on success. A nonpositive pivot anywhere yields
    is_pd=False (margin 0, logdet NaN). NaN/Inf entries raise ValueError,
    which is a different failure than "not PD".
    """
    M = sym(M)
    _check_finite(M)
    try:
        L = la.cholesky(M, lower=True, check_finite=False)
    except la.LinAlgError:
        return PdReport(False, 0.0, float("nan"))
    d = np.diag(L)
    return PdReport(True, float(np.min(d) ** 2), float(2.0 * np.sum(np.log(d))))


def cho_factor_pd(M):
    """Lower Cholesky factor of symmetric PD M; NotPositiveDefiniteError otherwise."""
    M = sym(M)
    _check_finite(M)
    try:
        return la.cholesky(M, lower=True, check_finite=False)
    except la.LinAlgError:
        raise NotPositiveDefiniteError(
            "matrix is not positive definite (pivot %d failed)" % _first_bad_pivot(M)
        ) from None


def solve_pd(M, B):
    """Solve M X = B for symmetric positive definite M.

    Relative residual is <= 1e-10 for well-scaled inputs; non-PD M raises
    NotPositiveDefiniteError naming the failed pivot.
    """
    L = cho_factor_pd(M)
    B = np.asarray(B, dtype=float)
    Z = la.solve_triangular(L, B, lower=True, check_finite=False)
    return la.solve_triangular(L.T, Z, lower=False, check_finite=False)


def pd_inverse(M):
    """Inverse of a symmetric PD matrix via its Cholesky factorization."""
    return solve_pd(M, np.eye(np.asarray(M).shape[0]))


def pd_margin(M, eps):
    """True iff M - eps*I is positive definite (strict feasibility with margin eps)."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    M = sym(M)
    return cholesky_logdet(M - eps * np.eye(M.shape[0])).is_pd
