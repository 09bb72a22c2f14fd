"""Closed-form marginal likelihoods and conjugate posterior draws.

Residuals within a tree are modeled as R ~ N(Phi mu, sigma2 I) with a
N(0, sigma_mu2 I) prior on the leaf values mu. Integrating out mu gives the
marginal likelihood used to weight candidate trees; for a hard tree Phi is
one-hot and the marginal collapses to per-leaf count/sum statistics.
All likelihood values are returned on the log scale.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy import stats as sstats

LOG_2PI = math.log(2.0 * math.pi)

_JITTER = 1e-10


class NumericalError(RuntimeError):
    """Raised when a posterior solve fails even after jitter."""


@dataclass
class LeafSuffStats:
    """Per-leaf counts and residual sums of a hard (one-hot) partition."""

    n_b: np.ndarray          # samples per leaf, ints
    s_b: np.ndarray          # residual sum per leaf
    n: int                   # total sample count
    yty: float               # total sum of squared residuals

    def __post_init__(self):
        self.n_b = np.asarray(self.n_b)
        self.s_b = np.asarray(self.s_b, dtype=float)
        if self.n_b.shape != self.s_b.shape:
            raise ValueError("n_b and s_b must have matching shapes")
        if np.any(self.n_b < 0):
            raise ValueError("leaf counts must be >= 0")
        if int(self.n_b.sum()) != self.n:
            raise ValueError(f"leaf counts sum to {int(self.n_b.sum())}, expected n={self.n}")

    @classmethod
    def from_membership(cls, leaf_idx: np.ndarray, residuals: np.ndarray,
                        num_leaves: int) -> "LeafSuffStats":
        """Aggregate (n_b, s_b) from a per-sample leaf-slot assignment."""
        residuals = np.asarray(residuals, dtype=float)
        n_b = np.bincount(leaf_idx, minlength=num_leaves)
        s_b = np.bincount(leaf_idx, weights=residuals, minlength=num_leaves)
        return cls(n_b=n_b, s_b=s_b, n=residuals.size,
                   yty=float(residuals @ residuals))


@dataclass
class SoftPosterior:
    """Leaf-value posterior N(mu_hat, omega) and the tree's log marginal."""

    omega: np.ndarray
    mu_hat: np.ndarray
    log_marginal: float


@dataclass(frozen=True)
class SigmaPrior:
    """Scaled inverse chi-square prior sigma2 ~ nu*lam / chisq(nu)."""

    nu: float = 3.0
    lam: float = 1.0

    def __post_init__(self):
        if self.nu <= 0 or self.lam <= 0:
            raise ValueError(f"nu and lam must be > 0, got nu={self.nu}, lam={self.lam}")

    @classmethod
    def from_sample_std(cls, y_std: float, nu: float = 3.0,
                        quantile: float = 0.9) -> "SigmaPrior":
        """Pick lam so that P(sigma < y_std) = quantile under the prior."""
        y_std = max(float(y_std), 1e-6)
        lam = sstats.chi2.ppf(1.0 - quantile, nu) * y_std ** 2 / nu
        return cls(nu=nu, lam=float(lam))


@dataclass(frozen=True)
class LeafPrior:
    """Normal prior N(mu_mu, sigma_mu2) on each leaf value."""

    sigma_mu2: float
    mu_mu: float = 0.0

    def __post_init__(self):
        if self.sigma_mu2 <= 0:
            raise ValueError(f"sigma_mu2 must be > 0, got {self.sigma_mu2}")

    @classmethod
    def scaled_default(cls, num_trees: int, k: float = 2.0) -> "LeafPrior":
        """Shrink the per-tree leaf scale with ensemble size: sigma_mu = 0.5/(k sqrt(m)).

        Assumes the response was rescaled to have range one.
        """
        sigma_mu = 0.5 / (k * math.sqrt(num_trees))
        return cls(sigma_mu2=sigma_mu ** 2)


def _check_variances(sigma2: float, sigma_mu2: float) -> None:
    if sigma2 <= 0 or not np.isfinite(sigma2):
        raise ValueError(f"sigma2 must be finite and > 0, got {sigma2}")
    if sigma_mu2 <= 0 or not np.isfinite(sigma_mu2):
        raise ValueError(f"sigma_mu2 must be finite and > 0, got {sigma_mu2}")


def leaf_loglik_terms(n_b, s_b, sigma2: float, sigma_mu2: float):
    """Per-leaf contribution 0.5*[log(s2/(s2+t*n)) + t*s^2/(s2*(s2+t*n))].

    Vectorized over leaves; empty leaves contribute exactly zero. These are
    the only terms of the hard log marginal that depend on the partition,
    so split enumeration works with them alone.
    """
    n_b = np.asarray(n_b, dtype=float)
    s_b = np.asarray(s_b, dtype=float)
    denom = sigma2 + sigma_mu2 * n_b
    return 0.5 * (np.log(sigma2 / denom) + sigma_mu2 * s_b ** 2 / (sigma2 * denom))


def hard_log_marginal(stats: LeafSuffStats, sigma2: float, sigma_mu2: float) -> float:
    """Log marginal likelihood of a hard partition with leaf values integrated out.

    Equals the log density of N(0, sigma2*I + sigma_mu2*Z Z^T) at the residual
    vector, where Z is the one-hot leaf-membership matrix.
    """
    _check_variances(sigma2, sigma_mu2)
    const = (-0.5 * stats.n * LOG_2PI
             - 0.5 * stats.n * math.log(sigma2)
             - stats.yty / (2.0 * sigma2))
    return float(const + leaf_loglik_terms(stats.n_b, stats.s_b, sigma2, sigma_mu2).sum())


def soft_log_marginal(Phi: np.ndarray, R: np.ndarray, sigma2: float,
                      sigma_mu2: float) -> SoftPosterior:
    """Log marginal likelihood of a gated tree plus its leaf-value posterior.

    Parameters
    ----------
    Phi : (n, B) array
        Per-sample leaf probabilities; rows lie on the simplex.
    R : (n,) array
        Residual vector the tree is being fit to.
    sigma2, sigma_mu2 : float
        Noise variance and leaf-value prior variance.

    Returns
    -------
    SoftPosterior with omega = (I/sigma_mu2 + Phi^T Phi/sigma2)^-1,
    mu_hat = omega Phi^T R / sigma2, and the log marginal, which equals the
    log density of N(0, sigma2*I + sigma_mu2*Phi Phi^T) at R.
    """
    _check_variances(sigma2, sigma_mu2)
    Phi = np.asarray(Phi, dtype=float)
    R = np.asarray(R, dtype=float)
    if Phi.ndim != 2 or Phi.shape[0] != R.size:
        raise ValueError(f"Phi shape {Phi.shape} incompatible with R of length {R.size}")
    n, B = Phi.shape
    if B < 1:
        raise ValueError("need at least one leaf")

    precision = Phi.T @ Phi / sigma2
    precision[np.diag_indices(B)] += 1.0 / sigma_mu2
    b = Phi.T @ R / sigma2

    try:
        cho = sla.cho_factor(precision, lower=True)
    except np.linalg.LinAlgError:
        warnings.warn("posterior precision not SPD; adding jitter", RuntimeWarning)
        precision[np.diag_indices(B)] += _JITTER
        try:
            cho = sla.cho_factor(precision, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"posterior precision solve failed for B={B}, sigma2={sigma2}, "
                f"sigma_mu2={sigma_mu2}") from exc

    mu_hat = sla.cho_solve(cho, b)
    omega = sla.cho_solve(cho, np.eye(B))
    logdet_prec = 2.0 * np.log(np.diag(cho[0])).sum()
    log_marginal = (0.5 * (B * LOG_2PI - logdet_prec)
                    - 0.5 * n * (LOG_2PI + math.log(sigma2))
                    - 0.5 * B * (LOG_2PI + math.log(sigma_mu2))
                    - (R @ R) / (2.0 * sigma2)
                    + 0.5 * (b @ mu_hat))
    return SoftPosterior(omega=omega, mu_hat=mu_hat, log_marginal=float(log_marginal))


def draw_hard_leaf_values(stats: LeafSuffStats, sigma2: float, sigma_mu2: float,
                          rng: np.random.Generator) -> np.ndarray:
    """Independent conjugate draws mu_b ~ N(post mean, post variance) per leaf.

    Empty leaves draw from the prior N(0, sigma_mu2).
    """
    _check_variances(sigma2, sigma_mu2)
    precision = stats.n_b / sigma2 + 1.0 / sigma_mu2
    mean = (stats.s_b / sigma2) / precision
    sd = np.sqrt(1.0 / precision)
    return mean + sd * rng.standard_normal(stats.n_b.size)


def draw_soft_leaf_values(post: SoftPosterior, rng: np.random.Generator) -> np.ndarray:
    """One draw from N(mu_hat, omega) via the Cholesky factor of omega."""
    try:
        chol = np.linalg.cholesky(post.omega)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("posterior covariance not SPD in leaf draw") from exc
    return post.mu_hat + chol @ rng.standard_normal(post.mu_hat.size)


def draw_sigma2(residuals: np.ndarray, prior: SigmaPrior,
                rng: np.random.Generator) -> float:
    """Conjugate draw sigma2 ~ (nu*lam + sum(e^2)) / chisq(nu + n)."""
    residuals = np.asarray(residuals, dtype=float)
    ss = float(residuals @ residuals)
    return (prior.nu * prior.lam + ss) / rng.chisquare(prior.nu + residuals.size)
