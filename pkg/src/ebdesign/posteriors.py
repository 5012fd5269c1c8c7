"""Posterior objects consumed by the design objectives and value
functionals: conjugate Gaussian updates, discrete-mixture updates, the
prior-predictive law of the posterior mean, and scalar-index posterior
variances.

All Gaussian conjugacy goes through (V + noise)^{-1}, never V^{-1}, so
rank-deficient priors (including V = 0) work unmodified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import NumericalError, ValidationError
from .priors import DiscretePrior, GaussianPrior

LOG_2PI = math.log(2.0 * math.pi)


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PosteriorSummary:
    """Gaussian posterior mean and covariance."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _readonly(np.atleast_1d(self.mean)))
        object.__setattr__(self, "covariance", _readonly(np.atleast_2d(self.covariance)))


def _check_pd(noise_cov: np.ndarray) -> None:
    if not np.array_equal(noise_cov, noise_cov.T):
        raise ValidationError("noise covariance must be symmetric")
    try:
        np.linalg.cholesky(noise_cov)
    except np.linalg.LinAlgError:
        raise ValidationError("noise covariance must be positive definite") from None


def gaussian_posterior(prior: GaussianPrior, observation, noise_cov) -> PosteriorSummary:
    """Conjugate Gaussian update, inversion-free in the prior covariance.

    Computes V_post = V - V (V + S)^{-1} V and
    m_post = m + V (V + S)^{-1} (obs - m), which equal the textbook
    precision-weighted forms whenever V is invertible and extend them to
    singular V (a zero prior covariance returns the prior unchanged).

    Args:
        prior: Gaussian prior.
        observation: observed estimate vector, same dimension.
        noise_cov: PD sampling covariance of the observation.

    Returns:
        PosteriorSummary with symmetrized PSD covariance.
    """
    obs = np.atleast_1d(np.asarray(observation, dtype=float))
    S = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    V = prior.covariance
    if obs.shape[0] != prior.dimension or S.shape != V.shape:
        raise ValidationError("dimension mismatch between prior, observation, and noise covariance")
    _check_pd(S)
    gain = np.linalg.solve(V + S, V).T
    V_post = V - gain @ V
    V_post = 0.5 * (V_post + V_post.T)
    m_post = prior.mean + gain @ (obs - prior.mean)
    return PosteriorSummary(mean=m_post, covariance=V_post)


def mixture_posterior(
    prior: DiscretePrior,
    observation,
    noise_cov,
    reporting=None,
) -> DiscretePrior:
    """Posterior over the prior's atoms after one Gaussian observation.

    Weights update to w_k * density_k / sum_j w_j * density_j where
    density_k is the Gaussian density of the observation at the
    (optionally reported) atom. All work happens in log space.

    Raises:
        NumericalError: the total posterior mass underflows, meaning the
            observation is incompatible with every atom.
    """
    obs = np.atleast_1d(np.asarray(observation, dtype=float))
    S = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    R = np.eye(prior.dimension) if reporting is None else np.atleast_2d(np.asarray(reporting, dtype=float))
    if R.shape[1] != prior.dimension or obs.shape[0] != R.shape[0] or S.shape != (obs.shape[0], obs.shape[0]):
        raise ValidationError("dimension mismatch between prior, observation, and noise covariance")
    _check_pd(S)
    resid = obs[:, None] - R @ prior.atoms.T
    L = np.linalg.cholesky(S)
    z = solve_triangular(L, resid, lower=True)
    # Extreme residuals overflow z**2 to inf; that is the underflow path
    # handled below, not an error in itself.
    with np.errstate(over="ignore"):
        logdens = -0.5 * (obs.shape[0] * LOG_2PI + 2.0 * np.log(np.diag(L)).sum() + (z**2).sum(axis=0))
    with np.errstate(divide="ignore"):
        scores = logdens + np.log(prior.weights)
    total = logsumexp(scores)
    if not np.isfinite(total):
        raise NumericalError("posterior mass underflows; observation is incompatible with every atom")
    weights = np.exp(scores - total)
    weights = weights / weights.sum()
    return DiscretePrior(atoms=prior.atoms, weights=weights)


def posterior_mean_sd(m: float, v: float, s2: float) -> float:
    """Standard deviation of the prior-predictive law of the posterior mean.

    Under a scalar Gaussian model the posterior mean is distributed
    Normal(m, sigma_B^2) with sigma_B = sqrt(v^2 / (v + s2)) before the
    data arrive.

    Args:
        m: prior mean (sets the law's center; unused in the returned SD).
        v: prior variance, >= 0.
        s2: sampling variance, > 0.
    """
    del m
    if v < 0.0:
        raise ValidationError(f"prior variance must be nonnegative, got {v}")
    if s2 <= 0.0:
        raise ValidationError(f"sampling variance must be positive, got {s2}")
    return math.sqrt(v * v / (v + s2))


def scalar_index_posterior_variance(V, Sigma, alpha) -> float:
    """Posterior variance of the scalar index alpha' theta.

    Evaluates alpha' (V - V (V + Sigma)^{-1} V) alpha, the inversion-free
    form of alpha' (V^{-1} + Sigma^{-1})^{-1} alpha, valid for singular V.
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    S = np.atleast_2d(np.asarray(Sigma, dtype=float))
    a = np.atleast_1d(np.asarray(alpha, dtype=float))
    if V.shape != S.shape or a.shape[0] != V.shape[0]:
        raise ValidationError("dimension mismatch")
    _check_pd(S)
    gain = np.linalg.solve(V + S, V).T
    V_post = V - gain @ V
    V_post = 0.5 * (V_post + V_post.T)
    return float(a @ V_post @ a)
