"""Multivariate normal moments, sampling, and linear conditioning.

Everything here is dense; problem sizes in scope stay below a few thousand
dimensions.  Factorizations go through a jitter ladder: a relative diagonal
boost from 1e-12 up to 1e-8 of the mean diagonal magnitude before giving up.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import InvalidConstraintError, InvalidParameterError, NumericalError

JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8)


def chol_with_jitter(cov: np.ndarray, what: str = "covariance") -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``cov``, boosting the diagonal if needed.

    Returns (L, jitter_used) where jitter is relative to the mean diagonal.
    Raises NumericalError when the full ladder fails.
    """
    cov = np.asarray(cov, dtype=float)
    scale = float(np.mean(np.diag(cov)))
    if scale <= 0:
        scale = 1.0
    eye = np.eye(cov.shape[0])
    for rel in JITTER_LADDER:
        try:
            return np.linalg.cholesky(cov + (rel * scale) * eye), rel
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(
        f"{what} ({cov.shape[0]}x{cov.shape[0]}) not factorizable after jitter "
        f"{JITTER_LADDER[-1]:g} * {scale:g}"
    )


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float | np.ndarray:
    """Normal log-density; ``x`` may carry a leading batch axis."""
    L, _ = chol_with_jitter(cov)
    d = mean.shape[0]
    dev = np.atleast_2d(x) - mean
    sol = linalg.solve_triangular(L, dev.T, lower=True)
    q = (sol**2).sum(axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    out = -0.5 * (d * np.log(2.0 * np.pi) + logdet + q)
    return out if np.ndim(x) > 1 else float(out[0])


@dataclass(frozen=True)
class GaussianMoments:
    """Mean vector and symmetric PSD covariance."""

    mean: np.ndarray = field(repr=False)
    cov: np.ndarray = field(repr=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        n = mean.shape[0]
        if mean.ndim != 1 or cov.shape != (n, n):
            raise InvalidParameterError(f"inconsistent moment shapes {mean.shape}, {cov.shape}")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise InvalidParameterError("non-finite moments")
        asym = np.max(np.abs(cov - cov.T)) if n else 0.0
        scale = max(np.max(np.abs(cov)), 1.0)
        if asym > 1e-10 * scale:
            raise InvalidParameterError(f"covariance asymmetric by {asym:g}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def sample_gaussian(moments: GaussianMoments, rng: np.random.Generator,
                    size: int | None = None) -> np.ndarray:
    """Draw from N(mean, cov); deterministic given the Generator state.

    A zero covariance returns the mean exactly.
    """
    if not np.any(moments.cov):
        base = np.tile(moments.mean, (size, 1)) if size is not None else moments.mean.copy()
        return base
    L, _ = chol_with_jitter(moments.cov)
    shape = (moments.dim,) if size is None else (size, moments.dim)
    eps = rng.standard_normal(shape)
    return moments.mean + eps @ L.T


def prepare_constraints(cov: np.ndarray, A: np.ndarray,
                        check_rank: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Factor the pieces shared by conditioning and conditional simulation.

    Returns (cov @ A.T, lower Cholesky of A cov A.T).  Skip the rank check
    when A has already been validated (hot loops).
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[1] != cov.shape[0]:
        raise InvalidConstraintError(f"constraint shape {A.shape} does not match dim {cov.shape[0]}")
    if check_rank and np.linalg.matrix_rank(A) < A.shape[0]:
        raise InvalidConstraintError("constraint matrix is rank deficient")
    cov_At = cov @ A.T
    gram = A @ cov_At
    L, _ = chol_with_jitter(gram, what="constraint Gram matrix")
    return cov_At, L


def condition_gaussian(moments: GaussianMoments, A: np.ndarray,
                       values: np.ndarray) -> GaussianMoments:
    """Moments of x | A x = values for x ~ N(mean, cov).

    mean' = mean + cov A' (A cov A')^{-1} (values - A mean)
    cov'  = cov  - cov A' (A cov A')^{-1} A cov
    """
    values = np.asarray(values, dtype=float)
    cov_At, L = prepare_constraints(moments.cov, A)
    resid = values - np.asarray(A, dtype=float) @ moments.mean
    gain = linalg.cho_solve((L, True), cov_At.T)        # (k, n)
    mean = moments.mean + gain.T @ resid
    cov = moments.cov - cov_At @ gain
    return GaussianMoments(mean=mean, cov=0.5 * (cov + cov.T))


def conditional_simulate(moments: GaussianMoments, A: np.ndarray, values: np.ndarray,
                         rng: np.random.Generator,
                         chol_cov: np.ndarray | None = None,
                         constraints: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """One draw from x | A x = values via the two-step update.

    (a) draw x* from N(mean, cov); (b) shift it back onto the constraint:
    x = x* + cov A' (A cov A')^{-1} (values - A x*).  Every draw satisfies
    A x = values to machine precision.  ``chol_cov`` (factor of cov) and
    ``constraints`` (from :func:`prepare_constraints`) can be passed to
    amortize factorizations across draws.
    """
    values = np.asarray(values, dtype=float)
    A = np.asarray(A, dtype=float)
    if chol_cov is None:
        chol_cov, _ = chol_with_jitter(moments.cov)
    eps = rng.standard_normal(moments.dim)
    y_star = moments.mean + chol_cov @ eps
    cov_At, L = constraints if constraints is not None else prepare_constraints(moments.cov, A)
    resid = values - A @ y_star
    return y_star + cov_At @ linalg.cho_solve((L, True), resid)
