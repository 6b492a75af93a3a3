"""Stationary geostatistical model for the log-attribute field.

The field has a constant mean ``beta`` and covariance

    cov(Y(x1), Y(x2)) = (1 - tau) * eta2 * rho(|x1 - x2|) + tau * eta2 * I(x1 = x2)

with ``rho`` the Matern correlation at fixed smoothness 1.5,

    rho(d) = (1 + d/lam) * exp(-d/lam).

Parameters live in two coordinate systems: natural units
(beta, lam, eta2, tau) and the unconstrained transformed vector
(beta, log lam, log eta2, logit tau) used by the inference machinery.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import CapacityError, InvalidParameterError
from .grids import Grid

# Dense covariance storage cap; grids in scope are <= 2400 cells.
MAX_DENSE_CELLS = 4096

N_GEOSTAT_PARAMS = 4
TRANSFORMED_LABELS = ("beta", "log_lambda", "log_eta2", "logit_tau")


def matern15_correlation(d, lam: float):
    """Matern correlation with smoothness 1.5 at distance(s) ``d``.

    rho(d) = (1 + d/lam) * exp(-d/lam); rho(0) = 1 and rho decreases
    strictly with distance.
    """
    if not np.isfinite(lam) or lam <= 0:
        raise InvalidParameterError(f"range must be positive and finite, got {lam}")
    r = np.asarray(d, dtype=float) / lam
    out = (1.0 + r) * np.exp(-r)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class GeostatParams:
    """Field mean/covariance parameters (natural units)."""

    beta: float
    lam: float     # correlation range, meters
    eta2: float    # variance of Y
    tau: float     # nugget fraction in [0, 1)

    def __post_init__(self):
        vals = (self.beta, self.lam, self.eta2, self.tau)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidParameterError(f"non-finite geostat parameters {vals}")
        if self.lam <= 0 or self.eta2 <= 0:
            raise InvalidParameterError("range and variance must be positive")
        if not (0.0 <= self.tau < 1.0):
            raise InvalidParameterError(f"nugget fraction must be in [0, 1), got {self.tau}")

    def to_transformed(self) -> np.ndarray:
        """(beta, log lam, log eta2, logit tau); tau = 0 maps to -inf-safe floor."""
        tau = max(self.tau, 1e-300)
        return np.array(
            [self.beta, np.log(self.lam), np.log(self.eta2), np.log(tau / (1.0 - tau))]
        )

    @staticmethod
    def from_transformed(vec) -> "GeostatParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (N_GEOSTAT_PARAMS,) or not np.all(np.isfinite(vec)):
            raise InvalidParameterError(f"transformed vector must be 4 finite entries, got {vec}")
        beta, loglam, logeta2, logit_tau = vec
        # expit keeps tau in (0, 1) without overflow for |logit_tau| up to ~700
        tau = 1.0 / (1.0 + np.exp(-logit_tau))
        return GeostatParams(beta=float(beta), lam=float(np.exp(loglam)),
                             eta2=float(np.exp(logeta2)), tau=float(min(tau, 1.0 - 1e-12)))


def build_covariance(grid: Grid, params: GeostatParams,
                     distances: np.ndarray | None = None) -> np.ndarray:
    """Dense covariance matrix of the field on ``grid``.

    Diagonal entries equal eta2 exactly; off-diagonals are
    (1 - tau) * eta2 * rho(d).  Pass a precomputed ``distances`` matrix to
    amortize the geometry across calls with different parameters.
    """
    n = grid.n_cells
    if n > MAX_DENSE_CELLS:
        raise CapacityError(f"{n} cells exceeds dense-covariance cap {MAX_DENSE_CELLS}")
    if distances is None:
        distances = grid.distance_matrix()
    cov = (1.0 - params.tau) * params.eta2 * matern15_correlation(distances, params.lam)
    np.fill_diagonal(cov, params.eta2)
    return cov


@dataclass(frozen=True)
class GeostatPrior:
    """Prior over the transformed parameter vector.

    In natural units: flat (improper) in beta, gamma on the range, 1/eta2
    (improper) on the variance, beta distribution on the nugget fraction.
    Log-densities are reported in transformed coordinates, including the
    change-of-variables Jacobians; the improper pieces contribute a constant
    (flat in beta and in log eta2), which is harmless because the algorithm
    only ever uses prior-density ratios.
    """

    lam_shape: float = 2.0
    lam_scale: float = 25.0   # default set per-experiment to 1/4 domain length
    tau_a: float = 1.0
    tau_b: float = 9.0

    def __post_init__(self):
        if min(self.lam_shape, self.lam_scale, self.tau_a, self.tau_b) <= 0:
            raise InvalidParameterError("prior hyperparameters must be positive")

    def logpdf_transformed(self, vec) -> float:
        """Log prior density at a transformed 4-vector (up to one global constant).

        Evaluated directly in transformed coordinates so it stays finite for
        any finite input:

        * log lam = u:      gamma(e^u) * e^u  ->  a*u - e^u/s - a*log s - lgamma(a)
        * log eta2:         (eta2)^{-1} * eta2 = 1 (flat)
        * logit tau = v:    beta(expit(v)) * tau(1-tau)
                            ->  a*logsig(v) + b*logsig(-v) - log B(a, b)
        * beta:             flat (improper)
        """
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (N_GEOSTAT_PARAMS,) or not np.all(np.isfinite(vec)):
            raise InvalidParameterError(f"transformed vector must be 4 finite entries, got {vec}")
        u, v = vec[1], vec[3]
        a, s = self.lam_shape, self.lam_scale
        with np.errstate(over="ignore"):
            lam_term = a * u - np.exp(u) / s - a * np.log(s) - special.gammaln(a)
        ta, tb = self.tau_a, self.tau_b
        tau_term = (-ta * np.logaddexp(0.0, -v) - tb * np.logaddexp(0.0, v)
                    - (special.betaln(ta, tb)))
        return float(lam_term + tau_term)

    def sample_natural(self, rng: np.random.Generator,
                       beta_center: float, beta_sd: float,
                       log_eta2_center: float, log_eta2_sd: float) -> GeostatParams:
        """Draw parameters for initialization purposes.

        The improper components (beta, eta2) need proper stand-in sampling
        distributions; centers and spreads come from configuration.
        """
        lam = float(rng.gamma(self.lam_shape, self.lam_scale))
        tau = float(rng.beta(self.tau_a, self.tau_b))
        beta = float(rng.normal(beta_center, beta_sd))
        eta2 = float(np.exp(rng.normal(log_eta2_center, log_eta2_sd)))
        return GeostatParams(beta=beta, lam=max(lam, 1e-9), eta2=eta2, tau=min(tau, 1.0 - 1e-9))
