"""Starting values: pooled GLM fit, data-driven IW prior scale, initial q."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, xlogy

from .errors import SPDError, ValidationError
from .model import Dataset, Family, Parametrization, PriorSpec, VariationalState, build_designs
from .special import spd_inverse, spd_solve

log = logging.getLogger(__name__)

__all__ = ["GlmFit", "glm_irls", "prior_scale_from_data", "default_prior", "init_state", "initialize"]


@dataclass
class GlmFit:
    """Pooled GLM fit with random effects set to zero.

    ``weights`` holds the diagonal of the GLM weight matrix M_i for every
    cluster (list of arrays); ``eta`` the fitted linear predictors.
    """

    beta_hat: np.ndarray
    cov: np.ndarray
    weights: list
    eta: list
    converged: bool
    deviance_trace: list = field(default_factory=list)
    ridge: float = 0.0


def _deviance(family, y, mu):
    if family is Family.POISSON:
        return 2.0 * float(np.sum(xlogy(y, y / np.maximum(mu, 1e-300)) - (y - mu)))
    mu = np.clip(mu, 1e-15, 1 - 1e-15)
    return -2.0 * float(np.sum(y * np.log(mu) + (1 - y) * np.log1p(-mu)))


def _mean_and_weight(family, eta, offset):
    if family is Family.POISSON:
        mu = offset * np.exp(np.minimum(eta, 700.0))
        # var(mu) g'(mu)^2 = mu * (1/mu)^2
        return mu, mu
    mu = expit(eta)
    return mu, mu * (1.0 - mu)


def _collinear_columns(X):
    _, s, vt = np.linalg.svd(X, full_matrices=False)
    null = vt[s < s[0] * 1e-10]
    if null.size == 0:
        return []
    return sorted({int(k) for k in np.flatnonzero(np.any(np.abs(null) > 1e-8, axis=0))})


def glm_irls(ds: Dataset, family=None, *, max_iter: int = 100, tol: float = 1e-10) -> GlmFit:
    """Iteratively reweighted least squares on the pooled data.

    Logistic separation (fitted probabilities saturating at 0 or 1, or a
    coefficient beyond 30) triggers a warning and a refit with a small ridge.
    """
    family = Family.parse(family or ds.family)
    X, y, offset = ds.pooled()
    if np.linalg.matrix_rank(X) < X.shape[1]:
        cols = _collinear_columns(X)
        names = [ds.fixed_names[k] for k in cols]
        raise ValidationError(f"pooled design is rank deficient; collinear columns: {names}")
    beta, cov, trace, converged = _irls(family, X, y, offset, 0.0, max_iter, tol)
    ridge = 0.0
    if family is Family.BERNOULLI and (np.max(np.abs(beta)) > 30 or np.max(np.abs(X @ beta)) > 20):
        log.warning("possible separation in pooled logistic fit (max |beta| = %.1f); refitting with ridge", np.max(np.abs(beta)))
        ridge = 1e-3
        beta, cov, trace, converged = _irls(family, X, y, offset, ridge, max_iter, tol)
    eta_all = X @ beta
    weights, eta = [], []
    start = 0
    for c in ds.clusters:
        e = eta_all[start : start + c.n_i]
        _, w = _mean_and_weight(family, e, c.offset)
        weights.append(w)
        eta.append(e)
        start += c.n_i
    return GlmFit(beta, cov, weights, eta, converged, trace, ridge)


def _irls(family, X, y, offset, ridge, max_iter, tol):
    p = X.shape[1]
    if family is Family.POISSON:
        eta = np.log(np.maximum(y, 0.5) / offset)
    else:
        ybar = np.clip((y + 0.5) / 2.0, 0.05, 0.95)
        eta = np.log(ybar / (1.0 - ybar))
    mu, w = _mean_and_weight(family, eta, offset)
    beta = np.zeros(p)
    trace = []
    converged = False
    dev_old = np.inf
    for _ in range(max_iter):
        # working response; g'(mu) = 1 / w for both canonical links
        z = eta + (y - mu) / np.maximum(w, 1e-300)
        A = X.T @ (w[:, None] * X) + ridge * np.eye(p)
        beta = spd_solve(A, X.T @ (w * z), "IRLS normal equations")
        eta = X @ beta
        mu, w = _mean_and_weight(family, eta, offset)
        dev = _deviance(family, y, mu)
        trace.append(dev)
        if np.isfinite(dev_old) and abs(dev - dev_old) <= tol * (abs(dev) + 0.1):
            converged = True
            break
        dev_old = dev
    cov = spd_inverse(X.T @ (w[:, None] * X) + ridge * np.eye(p), "GLM information")
    return beta, cov, trace, converged


def prior_scale_from_data(ds: Dataset, glm: GlmFit, c: float = 1.0):
    """``(nu, S)`` with ``nu = r`` and ``S = r R_hat``.

    ``R_hat = c (n^{-1} sum_i XR_i^T M_i XR_i)^{-1}`` with M_i the pooled GLM
    weights.
    """
    r = ds.r
    info = sum((cl.XR * w[:, None]).T @ cl.XR for cl, w in zip(ds.clusters, glm.weights)) / ds.n
    try:
        R_hat = c * spd_inverse(info, "average random-effect information")
    except SPDError as err:
        raise SPDError(f"cannot form the data-driven prior scale: {err}", err.min_pivot) from None
    return float(r), r * R_hat


def default_prior(ds: Dataset, glm: GlmFit = None, *, sigma_beta_scale: float = 1000.0, c: float = 1.0, nu=None, S=None):
    """N(0, sigma_beta_scale I) on beta and the data-driven IW prior on D."""
    glm = glm or glm_irls(ds)
    nu_hat, S_hat = prior_scale_from_data(ds, glm, c)
    return PriorSpec(
        sigma_beta_scale * np.eye(ds.p),
        nu_hat if nu is None else nu,
        S_hat if S is None else S,
    )


def init_state(ds: Dataset, prior: PriorSpec, glm: GlmFit, parametrization, c: float = 1.0) -> VariationalState:
    """Initial variational state from the pooled GLM fit.

    q(beta) starts at the GLM estimate and covariance, every q(alpha_tilde_i)
    at its prior mean (u_i = 0) with covariance R_hat, and S^q at
    ``S + n R_hat``.  Tuning matrices use R_hat as the guess for D.
    """
    from .engine import compute_w_glmm_batch

    parametrization = Parametrization.parse(parametrization)
    n, r = ds.n, ds.r
    _, S_hat = prior_scale_from_data(ds, glm, c)
    R_hat = S_hat / r
    if parametrization is Parametrization.CENTERED:
        W = np.zeros((n, r, r))
    elif parametrization is Parametrization.NONCENTERED:
        W = np.tile(np.eye(r), (n, 1, 1))
    else:
        b = ds.batch
        eta = np.zeros(b.y.shape)
        for i, e in enumerate(glm.eta):
            eta[i, : e.size] = e
        W = compute_w_glmm_batch(ds.family, ds, R_hat, eta)
    _, W_tilde, C = build_designs(ds.batch, W)
    mu_alpha = np.einsum("nrp,p->nr", W_tilde, glm.beta_hat)
    return VariationalState.create(
        ds,
        mu_beta=glm.beta_hat,
        Sigma_beta=glm.cov,
        nu_q=n + prior.nu,
        S_q=prior.S + n * R_hat,
        mu_alpha=mu_alpha,
        Sigma_alpha=np.tile(R_hat, (n, 1, 1)),
        W=W,
    )


def initialize(ds: Dataset, prior: PriorSpec, parametrization, c: float = 1.0) -> VariationalState:
    return init_state(ds, prior, glm_irls(ds), parametrization, c)
