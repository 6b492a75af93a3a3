"""Weighted samples, normal mixtures, and weighted kernel density estimation.

The density estimator places one Gaussian component per sample point;
component i keeps the sample weight w_i.  Component covariances are
h^2 * Chat_i, where Chat_i is the covariance of the ceil(alpha * n) sample
points nearest to point i (Euclidean distance after standardizing each
coordinate by its marginal standard deviation).  Component locations are
shrunk toward their neighborhood mean by sqrt(1 - h^2), which keeps the
smoothed mixture's local second moments equal to the sample's instead of
inflating them by (1 + h^2).  Neighborhoods and local covariances are
computed from the point geometry alone: folding importance weights into
them lets a single heavy point collapse a neighborhood into a spike, which
destabilizes everything downstream.

The bandwidth h and localization fraction alpha are picked jointly by a
weighted leave-one-out likelihood.  Two scores are available: the joint
log density

    sum_i w_i * log sum_{j != i} w_j / (1 - w_i) * N(x_i | x_j, h^2 Chat_j)

and, when the caller designates conditioning dimensions, the leave-one-out
*conditional* log density (joint minus the marginal over the conditioning
block), which directly targets the quality of the conditional the algorithm
extracts from the fit.

Conditioning a mixture on an observed sub-vector is exact per component and
reweights components by their marginal likelihood of the observation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import (
    ConditioningFailureError,
    DegenerateSampleError,
    InvalidParameterError,
    NumericalError,
)
from .gaussian import chol_with_jitter

logger = logging.getLogger(__name__)

COMPONENT_WEIGHT_FLOOR = 1e-12
VARIANCE_FLOOR = 1e-30

DEFAULT_H_GRID = tuple(np.geomspace(0.2, 1.2, 8))
DEFAULT_ALPHA_GRID = (0.1, 0.25, 0.5, 1.0)


def logsumexp(a: np.ndarray, axis: int | None = None) -> np.ndarray:
    """Plain max-shifted log-sum-exp (scipy's adds overhead we cannot afford
    on the n-by-n leave-one-out tables)."""
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


@dataclass(frozen=True)
class WeightedSample:
    """Points with normalized nonnegative weights."""

    points: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        w = np.asarray(self.weights, dtype=float)
        if pts.shape[0] != w.shape[0]:
            raise InvalidParameterError("points and weights length differ")
        if not np.all(np.isfinite(pts)):
            raise InvalidParameterError("sample points contain non-finite entries")
        if np.any(w < 0) or not np.isfinite(w).all():
            raise InvalidParameterError("weights must be finite and nonnegative")
        total = w.sum()
        if abs(total - 1.0) > 1e-10:
            raise InvalidParameterError(f"weights sum to {total}, not 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_eff(self) -> float:
        """Effective sample size 1 / sum(w^2)."""
        return float(1.0 / np.sum(self.weights**2))

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def cov(self) -> np.ndarray:
        dev = self.points - self.mean()
        return (dev * self.weights[:, None]).T @ dev


@dataclass(frozen=True)
class NormalMixture:
    """Finite normal mixture with per-component full covariances."""

    weights: np.ndarray = field(repr=False)
    means: np.ndarray = field(repr=False)
    covs: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covs, dtype=float)
        k, d = means.shape
        if w.shape != (k,) or covs.shape != (k, d, d):
            raise InvalidParameterError(
                f"inconsistent mixture shapes: w{w.shape} means{means.shape} covs{covs.shape}"
            )
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-8:
            raise InvalidParameterError("mixture weights must be nonnegative and normalized")
        object.__setattr__(self, "weights", w / w.sum())
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", 0.5 * (covs + np.swapaxes(covs, 1, 2)))

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _factors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Cholesky factor, its inverse, and log-determinant per component."""
        cached = self.__dict__.get("_factor_cache")
        if cached is None:
            try:
                chols = _batched_cholesky(self.covs, "mixture components")
            except NumericalError:
                k, d = self.n_components, self.dim
                chols = np.empty((k, d, d))
                for j in range(k):
                    chols[j], _ = chol_with_jitter(self.covs[j], what="mixture component")
            inv_chols = np.linalg.inv(chols)
            logdets = 2.0 * np.sum(np.log(np.diagonal(chols, axis1=1, axis2=2)), axis=1)
            cached = (chols, inv_chols, logdets)
            object.__setattr__(self, "_factor_cache", cached)
        return cached

    def component_logpdfs(self, x: np.ndarray) -> np.ndarray:
        """(m, k) matrix of per-component log densities at rows of x."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        _, inv_chols, logdets = self._factors()
        m, d = x.shape
        k = self.n_components
        out = np.empty((m, k))
        const = -0.5 * d * math.log(2.0 * math.pi)
        chunk = max(16, int(1e7 / max(m * d, 1)))
        for start in range(0, k, chunk):
            J = slice(start, min(start + chunk, k))
            dev = x[None, :, :] - self.means[J, None, :]
            U = np.einsum("jab,jmb->jma", inv_chols[J], dev)
            out[:, J] = (const - 0.5 * logdets[J][:, None]
                         - 0.5 * np.einsum("jma,jma->jm", U, U)).T
        return out

    def logpdf(self, x: np.ndarray):
        """Log mixture density, stable via log-sum-exp; x may be batched."""
        comp = self.component_logpdfs(x)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        out = logsumexp(comp + logw, axis=1)
        return out if np.ndim(x) > 1 else float(out[0])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n points: pick a component by weight, then draw from it."""
        chols, _, _ = self._factors()
        idx = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for j in np.unique(idx):
            rows = np.nonzero(idx == j)[0]
            out[rows] = self.means[j] + eps[rows] @ chols[j].T
        return out

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Overall mean and covariance of the mixture."""
        mean = self.weights @ self.means
        dev = self.means - mean
        cov = np.einsum("k,kab->ab", self.weights, self.covs)
        cov += (dev * self.weights[:, None]).T @ dev
        return mean, 0.5 * (cov + cov.T)


def mixture_linear_map(mix: NormalMixture, B: np.ndarray,
                       c: np.ndarray | float = 0.0) -> NormalMixture:
    """Mixture of B x + c for x from ``mix``; weights are unchanged."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if B.shape[0] < 1 or B.shape[1] != mix.dim:
        raise InvalidParameterError(f"map shape {B.shape} does not match mixture dim {mix.dim}")
    means = mix.means @ B.T + c
    covs = np.einsum("ab,kbc,dc->kad", B, mix.covs, B)
    return NormalMixture(weights=mix.weights.copy(), means=means, covs=covs)


def mixture_condition(mix: NormalMixture, z_obs: np.ndarray,
                      theta_dims, z_dims,
                      err_cov: np.ndarray | None = None) -> NormalMixture:
    """Condition a joint mixture on observing its z-block at ``z_obs``.

    Component i maps to the usual Gaussian conditional and its weight is
    rescaled by the component's marginal likelihood of z_obs (with optional
    additive observation-error covariance added to every z-block).
    Components whose updated weight falls below 1e-12 are dropped.
    """
    theta_dims = np.asarray(theta_dims, dtype=int)
    z_dims = np.asarray(z_dims, dtype=int)
    z_obs = np.asarray(z_obs, dtype=float)
    if z_obs.shape != (z_dims.size,):
        raise InvalidParameterError("z_obs length does not match z_dims")
    if np.intersect1d(theta_dims, z_dims).size:
        raise InvalidParameterError("theta_dims and z_dims overlap")
    k = mix.n_components
    nt, nz = theta_dims.size, z_dims.size
    err = np.zeros((nz, nz)) if err_cov is None else np.asarray(err_cov, dtype=float)

    new_means = np.empty((k, nt))
    new_covs = np.empty((k, nt, nt))
    loglik = np.empty(k)
    const = -0.5 * nz * math.log(2.0 * math.pi)
    for j in range(k):
        V = mix.covs[j]
        Vtt = V[np.ix_(theta_dims, theta_dims)]
        Vtz = V[np.ix_(theta_dims, z_dims)]
        Vzz = V[np.ix_(z_dims, z_dims)] + err
        Lz, _ = chol_with_jitter(Vzz, what="component z-block")
        dev = z_obs - mix.means[j][z_dims]
        sol = linalg.solve_triangular(Lz, dev, lower=True)
        loglik[j] = const - np.sum(np.log(np.diag(Lz))) - 0.5 * np.dot(sol, sol)
        gain = linalg.cho_solve((Lz, True), Vtz.T).T          # (nt, nz)
        new_means[j] = mix.means[j][theta_dims] + gain @ dev
        cc = Vtt - gain @ Vtz.T
        new_covs[j] = 0.5 * (cc + cc.T)

    with np.errstate(divide="ignore"):
        logv = np.log(mix.weights) + loglik
    top = logv.max()
    if not np.isfinite(top):
        raise ConditioningFailureError(
            f"all component likelihoods vanished; max component log-likelihood {loglik.max():g} "
            "(observation far outside the simulated range)"
        )
    v = np.exp(logv - top)
    v /= v.sum()
    keep = v >= COMPONENT_WEIGHT_FLOOR
    if not np.any(keep):
        keep = v == v.max()
    dropped = k - int(keep.sum())
    if dropped:
        logger.debug("dropping %d mixture components below weight floor", dropped)
    v = v[keep]
    return NormalMixture(weights=v / v.sum(), means=new_means[keep], covs=new_covs[keep])


@dataclass(frozen=True)
class KdeTuning:
    """Candidate grid and guards for the density fit."""

    h_grid: tuple[float, ...] = DEFAULT_H_GRID
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    n_eff_floor: float = 30.0


@dataclass(frozen=True)
class KdeFit:
    """Fit result: the mixture plus the tuning choice that produced it."""

    mixture: NormalMixture
    h: float
    alpha: float
    score: float


def _local_covariances(X: np.ndarray, neighbor_idx: np.ndarray,
                       global_var: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-point localized covariances and neighborhood means."""
    n, d = X.shape
    floor = np.maximum(1e-12 * global_var, VARIANCE_FLOOR)
    covs = np.empty((n, d, d))
    centers = np.empty((n, d))
    for i in range(n):
        pts = X[neighbor_idx[i]]
        centers[i] = pts.mean(axis=0)
        dev = pts - centers[i]
        C = (dev.T @ dev) / pts.shape[0]
        C[np.diag_indices(d)] += floor
        covs[i] = C
    return covs, centers


def _batched_cholesky(covs: np.ndarray, what: str) -> np.ndarray:
    """Stacked lower Cholesky factors with a shared jitter ladder."""
    scale = np.maximum(np.mean(np.diagonal(covs, axis1=1, axis2=2), axis=1), 1e-300)
    eye = np.eye(covs.shape[1])
    for rel in (0.0, 1e-12, 1e-10, 1e-8, 1e-6):
        try:
            return np.linalg.cholesky(covs + (rel * scale)[:, None, None] * eye)
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(f"stacked {what} not factorizable after jitter")


def _shrinkage_tables(X: np.ndarray, centers: np.ndarray, covs: np.ndarray,
                      dims: np.ndarray | None = None, shared: bool = False):
    """Quadratic-form pieces for kernels with shrunken locations.

    Component j sits at m_j(h) = c_j + a(h) (x_j - c_j) with
    a(h) = sqrt(max(0, 1 - h^2)), so

        q_ij(h) = |L_j^{-1}(x_i - m_j)|^2 = q0_ij - 2 a q1_ij + a^2 q2_j

    with the returned (q0, q1, q2, logdets); ``dims`` restricts everything
    to a coordinate block.  With ``shared`` (every component uses the same
    covariance and center, the alpha = 1 case) everything reduces to one
    Gram matrix.
    """
    n = X.shape[0]
    sub = X if dims is None else X[:, dims]
    csub = centers if dims is None else centers[:, dims]
    if shared:
        C = covs[0] if dims is None else covs[0][np.ix_(dims, dims)]
        L, _ = chol_with_jitter(C, what="covariance block")
        U = linalg.solve_triangular(L, (sub - csub[0]).T, lower=True)   # (d, n)
        s = (U**2).sum(axis=0)
        q0 = np.broadcast_to(s[:, None], (n, n))
        q1 = U.T @ U
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        return q0, q1, s, np.full(n, logdet)

    d = sub.shape[1]
    sub_covs = covs if dims is None else covs[:, dims][:, :, dims]
    Ls = _batched_cholesky(sub_covs, "local covariance blocks")
    logdets = 2.0 * np.sum(np.log(np.diagonal(Ls, axis1=1, axis2=2)), axis=1)
    # float32 is plenty for ranking tuning candidates
    Linv = np.linalg.inv(Ls).astype(np.float32)
    sub32 = sub.astype(np.float32)
    csub32 = csub.astype(np.float32)
    q0 = np.empty((n, n), dtype=np.float32)
    q1 = np.empty((n, n), dtype=np.float32)
    q2 = np.empty(n, dtype=np.float32)
    chunk = max(16, int(1e7 / max(n * d, 1)))
    for start in range(0, n, chunk):
        J = np.arange(start, min(start + chunk, n))
        dev = sub32[None, :, :] - csub32[J, None, :]             # (|J|, n, d)
        U = np.einsum("jab,jnb->jna", Linv[J], dev)              # (|J|, n, d)
        q0[:, J] = np.einsum("jna,jna->jn", U, U).T
        v = U[np.arange(J.size), J, :]                           # (|J|, d)
        q1[:, J] = np.einsum("jna,ja->jn", U, v).T
        q2[J] = (v**2).sum(axis=1)
    return q0, q1, q2, logdets


def shrink_factor(h: float) -> float:
    """Location-shrinkage coefficient preserving local second moments."""
    return math.sqrt(max(0.0, 1.0 - h * h))


def kde_fit(sample: WeightedSample, tuning: KdeTuning = KdeTuning(),
            fixed: tuple[float, float] | None = None,
            cond_dims=None) -> KdeFit:
    """Fit the weighted normal-kernel mixture to a sample.

    ``fixed=(h, alpha)`` skips the grid search and fits at the given tuning
    (used when refitting within one algorithm iteration).  When
    ``cond_dims`` names the dimensions the mixture will later be conditioned
    on, the grid search maximizes the leave-one-out *conditional* likelihood
    of the remaining dimensions given those; otherwise it maximizes the
    joint leave-one-out likelihood.
    """
    X, w = sample.points, sample.weights
    n, d = X.shape
    if n < d + 2:
        raise DegenerateSampleError(f"need at least dim+2={d + 2} points, got {n}")
    if sample.n_eff < min(tuning.n_eff_floor, n):
        raise DegenerateSampleError(
            f"effective sample size {sample.n_eff:.1f} below floor "
            f"{min(tuning.n_eff_floor, n):g}"
        )

    global_var = X.var(axis=0)
    sd = np.sqrt(global_var)
    sd[sd == 0] = 1.0
    Xs = X / sd
    sq = (Xs**2).sum(axis=1)
    D2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (Xs @ Xs.T), 0.0)

    alphas = [float(a) for a in (tuning.alpha_grid if fixed is None else (fixed[1],))]
    hs = [float(h) for h in (tuning.h_grid if fixed is None else (fixed[0],))]
    cdims = None if cond_dims is None else np.asarray(cond_dims, dtype=int)
    dz = 0 if cdims is None else cdims.size
    const = -0.5 * d * math.log(2.0 * math.pi)
    const_z = -0.5 * dz * math.log(2.0 * math.pi)
    with np.errstate(divide="ignore"):
        logw = np.log(w)
        log1mw = np.log1p(-np.minimum(w, 1.0 - 1e-15))
    active = w > 0

    floor = np.maximum(1e-12 * global_var, VARIANCE_FLOOR)

    def global_cov_and_center():
        center = X.mean(axis=0)
        dev = X - center
        C = (dev.T @ dev) / n
        C[np.diag_indices(d)] += floor
        return C[None, :, :], center[None, :]

    best = None   # (score, h, alpha, covs, centers, shared)
    for alpha in alphas:
        kn = min(n, max(1, math.ceil(alpha * n)))
        shared = kn >= n
        if kn < d + 2 and not shared and fixed is None:
            logger.debug("skipping alpha=%g: %d neighbors < dim+2", alpha, d + 2)
            continue
        if shared:
            covs, centers = global_cov_and_center()
        else:
            neighbor_idx = np.argpartition(D2, kn - 1, axis=1)[:, :kn]
            covs, centers = _local_covariances(X, neighbor_idx, global_var)
        if fixed is not None:
            best = (np.nan, hs[0], alpha, covs, centers, shared)
            break

        # selection tables in float32: they only rank tuning candidates
        joint_tab = [t.astype(np.float32) for t in
                     _shrinkage_tables(X, centers, covs, shared=shared)]
        tabs = [(joint_tab, const, d)]
        if cdims is not None:
            z_tab = [t.astype(np.float32) for t in
                     _shrinkage_tables(X, centers, covs, cdims, shared=shared)]
            tabs.append((z_tab, const_z, dz))
        logw32 = logw.astype(np.float32)
        work = np.empty((n, n), dtype=np.float32)
        for h in hs:
            a = shrink_factor(h)
            loo_parts = []
            for (q0, q1, q2, logdets), cst, dd in tabs:
                np.multiply(q1, np.float32(-2.0 * a), out=work)
                work += q0
                work += np.float32(a * a) * q2[None, :]
                work *= np.float32(-0.5 / (h * h))
                work += (np.float32(cst - dd * math.log(h)) - np.float32(0.5) * logdets
                         + logw32)[None, :]
                np.fill_diagonal(work, -np.inf)
                loo_parts.append(logsumexp(work, axis=1).astype(float))
            loo = loo_parts[0] - log1mw
            if len(loo_parts) > 1:
                loo = loo - (loo_parts[1] - log1mw)
            score = float(np.sum(w[active] * loo[active]))
            if best is None or score > best[0]:
                best = (score, h, alpha, covs, centers, shared)

    if best is None:
        # every alpha was skipped; fall back to the global covariance fit
        return kde_fit(sample, KdeTuning(h_grid=tuple(hs), alpha_grid=(1.0,),
                                         n_eff_floor=tuning.n_eff_floor),
                       cond_dims=cond_dims)
    score, h, alpha, covs, centers, shared = best
    a = shrink_factor(h)
    if shared:
        covs = np.repeat(covs, n, axis=0)
        centers = np.repeat(centers, n, axis=0)
    means = centers + a * (X - centers)
    mixture = NormalMixture(weights=w.copy(), means=means, covs=(h * h) * covs)
    return KdeFit(mixture=mixture, h=h, alpha=alpha, score=score)
