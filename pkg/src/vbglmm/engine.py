"""Nonconjugate variational message passing for Poisson and logistic GLMMs.

One cycle of :func:`fit` runs

1. optional refresh of the tuning matrices W_i (partial-adaptive mode),
2. the Gaussian update of q(beta),
3. the Gaussian updates of every q(alpha_tilde_i),
4. the conjugate update of q(D) = IW(nu^q, S^q),

and then evaluates the lower bound.  Gaussian factors use the simplified
fixed-point form ``Sigma <- -1/2 [dS/dSigma]^{-1}``,
``mu <- mu + Sigma dS/dmu`` with the just-updated Sigma.

The linear mixed model scheme with known variances (:func:`lmm_fit`) is
kept as an exactness check: with the tuning matrices of
:func:`compute_w_lmm` it reaches its fixed point in one cycle.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, SPDError, VbGlmmError
from .model import (
    ClusterData,
    Dataset,
    Family,
    FitResult,
    Parametrization,
    PriorSpec,
    VariationalState,
    cluster_c_matrix,
    posterior_summaries,
    validate_dataset,
)
from .special import (
    DuplicationOps,
    b_moments,
    digamma,
    gauss_hermite_rule,
    log_multigamma,
    recenter_pair,
    spd_cholesky,
    spd_inverse,
    spd_inverse_batch,
    spd_logdet,
    spd_logdet_batch,
    spd_solve,
)

log = logging.getLogger(__name__)

__all__ = [
    "FitOptions",
    "ClusterWorkspace",
    "LmmResult",
    "compute_w_lmm",
    "lmm_fit",
    "compute_w_glmm",
    "compute_w_glmm_batch",
    "refresh_workspace",
    "gaussian_workspace",
    "update_beta",
    "update_alpha",
    "update_Sq",
    "refresh_tuning",
    "elbo",
    "elbo_full",
    "fit",
    "generic_gaussian_update",
]

_MAX_EXPONENT = 700.0


@dataclass
class FitOptions:
    """Controls for :func:`fit`.

    ``elbo_check='strict'`` logs a warning and records every cycle where
    the bound drops; ``'monitor'`` only records them.  ``workers > 1``
    splits per-cluster work across threads unless ``deterministic`` is set.
    """

    tolerance: float = 1e-6
    max_iterations: int = 500
    quad_points: int = 10
    damping: float = 1.0
    seed: int = 0
    elbo_check: str = "monitor"
    workers: int = 1
    deterministic: bool = False

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")
        if not 0 < self.damping <= 1:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.elbo_check not in ("monitor", "strict"):
            raise ValueError(f"elbo_check must be 'monitor' or 'strict', got {self.elbo_check!r}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    @property
    def effective_workers(self) -> int:
        return 1 if self.deterministic else self.workers


@dataclass
class ClusterWorkspace:
    """Per-cluster quantities derived from the current q, stacked (n, m).

    ``resid`` holds ``y_i - G_i`` and ``F`` the curvature weights, both zero
    on padded rows.  ``b0`` (logistic) and ``kappa`` (Poisson) feed the
    lower bound.
    """

    mu: np.ndarray
    sigma: np.ndarray
    F: np.ndarray
    G: np.ndarray
    resid: np.ndarray
    kappa: np.ndarray = None
    b0: np.ndarray = None
    center: tuple = None


def _blocks(n: int, workers: int):
    if workers <= 1 or n < 2 * workers:
        return [slice(0, n)]
    edges = np.linspace(0, n, workers + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _run_blocks(fn, n, workers):
    blocks = _blocks(n, workers)
    if len(blocks) == 1:
        return [fn(blocks[0])]
    with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
        return list(pool.map(fn, blocks))


# ---------------------------------------------------------------------------
# linear mixed model with known variances
# ---------------------------------------------------------------------------


def compute_w_lmm(X, sigma2: float, D):
    """Tuning matrix ``(X^T X / sigma2 + D^{-1})^{-1} D^{-1}``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    D_inv = spd_inverse(D, "D")
    return spd_solve(X.T @ X / sigma2 + D_inv, D_inv, "X^T X / sigma2 + D^-1")


@dataclass
class LmmResult:
    mu_beta: np.ndarray
    Sigma_beta: np.ndarray
    mu_alpha: list
    Sigma_alpha: list
    cycles: int
    converged: bool
    fixed_point_cycle: int
    changes: list = field(default_factory=list)


def lmm_fit(X, y, sigma2, D, W=None, *, mu_alpha0=None, max_iter=100, tol=1e-12) -> LmmResult:
    """Cyclic VB updates for ``y_i = X_i beta + X_i u_i + e_i`` with flat prior on beta.

    ``X`` and ``y`` are per-cluster lists; ``W`` defaults to the one-step
    tuning matrices of :func:`compute_w_lmm`.  ``fixed_point_cycle`` is the
    first cycle after which a further cycle changes no parameter by more
    than ``tol``.
    """
    X = [np.atleast_2d(np.asarray(x, dtype=float)) for x in X]
    y = [np.asarray(v, dtype=float).reshape(-1) for v in y]
    D = np.atleast_2d(np.asarray(D, dtype=float))
    r = D.shape[0]
    n = len(X)
    if W is None:
        W = [compute_w_lmm(x, sigma2, D) for x in X]
    W = [np.atleast_2d(np.asarray(w, dtype=float)) for w in W]
    D_inv = spd_inverse(D, "D")
    eye = np.eye(r)
    XtX = [x.T @ x for x in X]
    Xty = [x.T @ v for x, v in zip(X, y)]
    # coupling matrices {D^-1 (I - W_i) - X_i^T X_i W_i / sigma2}
    K = [D_inv @ (eye - w) - xtx @ w / sigma2 for w, xtx in zip(W, XtX)]

    prec_beta = sum((eye - w).T @ D_inv @ (eye - w) + w.T @ xtx @ w / sigma2 for w, xtx in zip(W, XtX))
    try:
        Sigma_beta = spd_inverse(prec_beta, "fixed-effect normal equations")
    except SPDError as err:
        raise SPDError(f"rank-deficient fixed-effect design: {err}", err.min_pivot) from None
    Sigma_alpha = [spd_inverse(D_inv + xtx / sigma2, "D^-1 + X^T X / sigma2") for xtx in XtX]

    mu_alpha = [np.zeros(r) for _ in range(n)] if mu_alpha0 is None else [np.array(m, dtype=float) for m in mu_alpha0]
    mu_beta = np.zeros(r)
    changes = []
    fixed_point = None
    converged = False
    cycles = 0
    for cycles in range(1, max_iter + 1):
        new_beta = Sigma_beta @ sum(w.T @ xty / sigma2 + k.T @ m for w, xty, k, m in zip(W, Xty, K, mu_alpha))
        new_alpha = [sa @ (xty / sigma2 + k @ new_beta) for sa, xty, k in zip(Sigma_alpha, Xty, K)]
        change = max(
            [float(np.max(np.abs(new_beta - mu_beta)))]
            + [float(np.max(np.abs(a - b))) for a, b in zip(new_alpha, mu_alpha)]
        )
        changes.append(change)
        mu_beta, mu_alpha = new_beta, new_alpha
        if cycles > 1 and change <= tol:
            converged = True
            fixed_point = cycles - 1
            break
    return LmmResult(mu_beta, Sigma_beta, mu_alpha, Sigma_alpha, cycles, converged, fixed_point, changes)


# ---------------------------------------------------------------------------
# tuning matrices for GLMMs
# ---------------------------------------------------------------------------


def _info_weights(family: Family, y, eta):
    if family is Family.POISSON:
        # conditional mean approximated by the response
        return np.asarray(y, dtype=float)
    e = np.asarray(eta, dtype=float)
    s = 0.5 * (1.0 + np.tanh(0.5 * e))
    return s * (1.0 - s)


def compute_w_glmm(family, cluster: ClusterData, D_est, eta=None):
    """``(I_f + D^{-1})^{-1} D^{-1}`` with I_f the random-effect information of one cluster.

    Poisson uses ``sum_j y_ij x_ij x_ij^T`` (eta is ignored); Bernoulli uses
    the logistic curvature at ``eta``.  Falls back to W = I (noncentred)
    with a warning if the system is not positive definite.
    """
    family = Family.parse(family)
    D_est = np.atleast_2d(np.asarray(D_est, dtype=float))
    if eta is None:
        if family is Family.BERNOULLI:
            raise ValueError("Bernoulli tuning matrices need the linear predictor eta")
        eta = np.zeros(cluster.n_i)
    eta = np.asarray(eta, dtype=float).reshape(-1)
    if eta.size != cluster.n_i or not np.all(np.isfinite(eta)):
        raise ValueError("eta must be a finite vector of length n_i")
    wts = _info_weights(family, cluster.y, eta)
    info = (cluster.XR * wts[:, None]).T @ cluster.XR
    r = cluster.r
    try:
        D_inv = spd_inverse(D_est, "D estimate")
        return spd_solve(info + D_inv, D_inv, "I_f + D^-1")
    except SPDError as err:
        log.warning("tuning matrix fell back to W = I: %s", err)
        return np.eye(r)


def compute_w_glmm_batch(family, ds: Dataset, D_est, eta):
    """Tuning matrices for every cluster; ``eta`` is (n, m) padded."""
    family = Family.parse(family)
    b = ds.batch
    n, _, r = b.XR.shape
    wts = _info_weights(family, b.y, eta) * b.mask
    info = np.einsum("nmr,nm,nms->nrs", b.XR, wts, b.XR)
    try:
        D_inv = spd_inverse(np.atleast_2d(D_est), "D estimate")
    except SPDError as err:
        log.warning("D estimate not SPD, all tuning matrices set to I: %s", err)
        return np.tile(np.eye(r), (n, 1, 1))
    A = info + D_inv
    try:
        chol = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return np.stack([compute_w_glmm(family, c, D_est, eta[i, : c.n_i]) for i, c in enumerate(ds.clusters)])
    z = np.linalg.solve(chol, np.broadcast_to(D_inv, A.shape))
    return np.linalg.solve(np.swapaxes(chol, -1, -2), z)


def refresh_tuning(state: VariationalState, ds: Dataset, ws: ClusterWorkspace = None) -> None:
    """Recompute W_i from ``D = S^q / (nu^q - r - 1)`` and the current eta means.

    ``mu_alpha`` is shifted so that the posterior means of
    ``alpha_i = alpha_tilde_i + W_i C_i beta_RG1`` are unchanged.
    """
    r = ds.r
    dof = state.nu_q - r - 1
    if dof <= 0:
        log.warning("nu^q - r - 1 <= 0; tuning matrices left unchanged")
        return
    D_est = state.S_q / dof
    eta = ws.mu if ws is not None else _linear_predictor_moments(state, ds.batch, slice(None))[0]
    W_new = compute_w_glmm_batch(ds.family, ds, D_est, eta)
    shift = np.einsum("nrs,nsk,k->nr", state.W - W_new, state.C, state.mu_beta_rg1)
    state.mu_alpha = state.mu_alpha + shift
    state.set_tuning(ds.batch, W_new)


# ---------------------------------------------------------------------------
# workspaces
# ---------------------------------------------------------------------------


def _linear_predictor_moments(state, batch, sl):
    V = state.V[sl]
    XR = batch.XR[sl]
    mu = V @ state.mu_beta + np.einsum("nmr,nr->nm", XR, state.mu_alpha[sl])
    var = np.einsum("nmp,pq,nmq->nm", V, state.Sigma_beta, V) + np.einsum(
        "nmr,nrs,nms->nm", XR, state.Sigma_alpha[sl], XR
    )
    return mu, np.sqrt(np.maximum(var, 0.0))


def _workspace_block(state, ds, rule, sl):
    b = ds.batch
    mask = b.mask[sl]
    y = b.y[sl]
    mu, sigma = _linear_predictor_moments(state, b, sl)
    if ds.family is Family.POISSON:
        expo = mu + 0.5 * sigma**2
        over = (expo > _MAX_EXPONENT) & (mask > 0)
        if np.any(over):
            i, j = np.argwhere(over)[0]
            i += sl.start or 0
            raise NumericalError(
                f"exp overflow in kappa at cluster {i}, row {j} (exponent {expo[over][0]:.1f}); "
                "consider rescaling covariates",
                context={"cluster": int(i), "row": int(j)},
            )
        kappa = np.exp(np.minimum(expo, _MAX_EXPONENT)) * mask
        G = b.offset[sl] * kappa
        return dict(mu=mu, sigma=sigma, F=G * mask, G=G, resid=(y - G) * mask, kappa=kappa)
    center = recenter_pair(mu, sigma)
    b0, b1, b2 = b_moments(mu, sigma, rule, center=center)
    return dict(mu=mu, sigma=sigma, F=b2 * mask, G=b1, resid=(y - b1) * mask, b0=b0 * mask, center=center)


def refresh_workspace(state: VariationalState, ds: Dataset, rule=None, workers: int = 1) -> ClusterWorkspace:
    """Linear-predictor moments and the F, G terms for every cluster.

    For the logistic model the quadrature recentring is computed once at
    r = 1 and reused for B_0 and B_2.
    """
    rule = rule or gauss_hermite_rule(10)
    parts = _run_blocks(lambda sl: _workspace_block(state, ds, rule, sl), ds.n, workers)
    if len(parts) == 1:
        out = parts[0]
    else:
        out = {}
        for key in parts[0]:
            if key == "center":
                out[key] = tuple(
                    tuple(np.concatenate([p[key][side][k] for p in parts]) for k in range(2)) for side in range(2)
                )
            else:
                out[key] = np.concatenate([p[key] for p in parts])
    return ClusterWorkspace(**out)


def gaussian_workspace(state: VariationalState, ds: Dataset, sigma2: float) -> ClusterWorkspace:
    """Workspace for an identity-link Gaussian likelihood with known variance.

    Not a supported family; used to check that the GLMM updates reduce to
    the linear mixed model scheme.
    """
    b = ds.batch
    mu, sigma = _linear_predictor_moments(state, b, slice(None))
    F = b.mask / sigma2
    return ClusterWorkspace(mu=mu, sigma=sigma, F=F, G=mu, resid=(b.y - mu) * b.mask / sigma2)


# ---------------------------------------------------------------------------
# updates
# ---------------------------------------------------------------------------


def _re_precision(state):
    return state.nu_q * spd_inverse(state.S_q, "S^q")


def update_beta(state, ds, ws, prior_precision, re_precision=None, damping: float = 1.0) -> None:
    """Gaussian update of q(beta) in place.

    ``prior_precision`` is Sigma_beta^{-1} (zero for a flat prior) and
    ``re_precision`` defaults to ``nu^q (S^q)^{-1}``.
    """
    prec = _re_precision(state) if re_precision is None else re_precision
    V, Wt = state.V, state.W_tilde
    A = (
        prior_precision
        + np.einsum("nrp,rs,nsq->pq", Wt, prec, Wt)
        + np.einsum("nmp,nm,nmq->pq", V, ws.F, V)
    )
    try:
        Sigma = spd_inverse(A, "q(beta) precision")
    except SPDError as err:
        cond = np.linalg.cond(A)
        raise SPDError(f"{err}; condition number {cond:.3e}", err.min_pivot) from None
    dev = state.mu_alpha - np.einsum("nrp,p->nr", Wt, state.mu_beta)
    grad = (
        -prior_precision @ state.mu_beta
        + np.einsum("nrp,rs,ns->p", Wt, prec, dev)
        + np.einsum("nmp,nm->p", V, ws.resid)
    )
    state.Sigma_beta = Sigma
    state.mu_beta = state.mu_beta + damping * (Sigma @ grad)


def update_alpha(state, ds, ws, re_precision=None, damping: float = 1.0, workers: int = 1) -> None:
    """Gaussian updates of every q(alpha_tilde_i) in place."""
    prec = _re_precision(state) if re_precision is None else re_precision
    XR = ds.batch.XR
    mu_wt = np.einsum("nrp,p->nr", state.W_tilde, state.mu_beta)

    def block(sl):
        A = prec + np.einsum("nmr,nm,nms->nrs", XR[sl], ws.F[sl], XR[sl])
        Sigma = spd_inverse_batch(A, "q(alpha) precision")
        grad = -(state.mu_alpha[sl] - mu_wt[sl]) @ prec + np.einsum("nmr,nm->nr", XR[sl], ws.resid[sl])
        return Sigma, state.mu_alpha[sl] + damping * np.einsum("nrs,ns->nr", Sigma, grad)

    parts = _run_blocks(block, ds.n, workers)
    state.Sigma_alpha = np.concatenate([p[0] for p in parts])
    state.mu_alpha = np.concatenate([p[1] for p in parts])


def update_Sq(state, prior: PriorSpec) -> None:
    """Conjugate update of the inverse-Wishart scale S^q in place."""
    Wt = state.W_tilde
    dev = state.mu_alpha - np.einsum("nrp,p->nr", Wt, state.mu_beta)
    S_q = (
        prior.S
        + dev.T @ dev
        + state.Sigma_alpha.sum(axis=0)
        + np.einsum("nrp,pq,nsq->rs", Wt, state.Sigma_beta, Wt)
    )
    S_q = 0.5 * (S_q + S_q.T)
    spd_cholesky(S_q, "S^q")
    state.S_q = S_q


# ---------------------------------------------------------------------------
# lower bound
# ---------------------------------------------------------------------------


def _loglik_term(ds, ws):
    b = ds.batch
    if ds.family is Family.POISSON:
        vals = b.y * (np.log(b.offset) + ws.mu) - b.offset * ws.kappa - b.log_y_factorial
    else:
        vals = b.y * ws.mu - ws.b0
    return float(np.sum(vals * b.mask))


def elbo(state: VariationalState, ds: Dataset, prior: PriorSpec, ws: ClusterWorkspace) -> float:
    """Lower bound in the simplified form valid right after the S^q update."""
    p, r, n = ds.p, ds.r, ds.n
    P = prior.precision_beta
    total = _loglik_term(ds, ws)
    total += 0.5 * float(np.sum(spd_logdet_batch(state.Sigma_alpha, "Sigma_alpha^q")))
    total += 0.5 * (spd_logdet(state.Sigma_beta, "Sigma_beta^q") - spd_logdet(prior.Sigma_beta, "Sigma_beta"))
    total -= 0.5 * float(np.sum(P * state.Sigma_beta))
    total -= 0.5 * float(state.mu_beta @ P @ state.mu_beta)
    total -= 0.5 * state.nu_q * spd_logdet(state.S_q, "S^q")
    total += 0.5 * prior.nu * spd_logdet(prior.S, "S")
    total += log_multigamma(state.nu_q, r) - log_multigamma(prior.nu, r)
    total += 0.5 * (p + n * r) + 0.5 * n * r * math.log(2.0)
    return total


def _iw_expected_logdet(S, nu, r):
    return spd_logdet(S, "S^q") - float(np.sum(digamma((nu - np.arange(1, r + 1) + 1) / 2.0))) - r * math.log(2.0)


def elbo_full(state: VariationalState, ds: Dataset, prior: PriorSpec, ws: ClusterWorkspace, *, terms=False):
    """Lower bound assembled term by term; valid for any state.

    With ``terms=True`` returns a dict of the individual expectations.
    """
    p, r, n = ds.p, ds.r, ds.n
    nu, nu_q = prior.nu, state.nu_q
    P = prior.precision_beta
    S_q_inv = spd_inverse(state.S_q, "S^q")
    log2pi = math.log(2.0 * math.pi)
    e_logdet_D = _iw_expected_logdet(state.S_q, nu_q, r)

    s_y = _loglik_term(ds, ws)
    s_beta = (
        -0.5 * p * log2pi
        - 0.5 * spd_logdet(prior.Sigma_beta, "Sigma_beta")
        - 0.5 * float(state.mu_beta @ P @ state.mu_beta)
        - 0.5 * float(np.sum(P * state.Sigma_beta))
    )
    Wt = state.W_tilde
    dev = state.mu_alpha - np.einsum("nrp,p->nr", Wt, state.mu_beta)
    quad = np.einsum("nr,rs,ns->n", dev, S_q_inv, dev)
    spread = np.einsum("rs,nsr->n", S_q_inv, state.Sigma_alpha) + np.einsum(
        "rs,nsp,pq,nrq->n", S_q_inv, Wt, state.Sigma_beta, Wt
    )
    s_alpha = float(np.sum(-0.5 * r * log2pi - 0.5 * e_logdet_D - 0.5 * nu_q * (quad + spread)))
    e_log_pD = (
        -0.5 * nu_q * float(np.sum(S_q_inv * prior.S))
        - log_multigamma(nu, r)
        + 0.5 * nu * spd_logdet(prior.S, "S")
        - 0.5 * (nu + r + 1) * e_logdet_D
        - 0.5 * nu * r * math.log(2.0)
    )
    e_log_qbeta = -0.5 * p * log2pi - 0.5 * spd_logdet(state.Sigma_beta, "Sigma_beta^q") - 0.5 * p
    e_log_qalpha = float(
        np.sum(-0.5 * r * log2pi - 0.5 * spd_logdet_batch(state.Sigma_alpha, "Sigma_alpha^q") - 0.5 * r)
    )
    e_log_qD = (
        -0.5 * nu_q * r * math.log(2.0)
        - log_multigamma(nu_q, r)
        + 0.5 * nu_q * spd_logdet(state.S_q, "S^q")
        - 0.5 * (nu_q + r + 1) * e_logdet_D
        - 0.5 * nu_q * r
    )
    parts = {
        "S_y": s_y,
        "S_alpha": s_alpha,
        "S_beta": s_beta,
        "E_log_p_D": e_log_pD,
        "E_log_q_beta": e_log_qbeta,
        "E_log_q_alpha": e_log_qalpha,
        "E_log_q_D": e_log_qD,
    }
    total = s_y + s_alpha + s_beta + e_log_pD - e_log_qbeta - e_log_qalpha - e_log_qD
    if terms:
        parts["total"] = total
        return parts
    return total


# ---------------------------------------------------------------------------
# fitting loop
# ---------------------------------------------------------------------------


def fit(
    ds: Dataset,
    prior: PriorSpec,
    parametrization=Parametrization.PARTIAL_FIXED,
    options: FitOptions = None,
    init: VariationalState = None,
    label: str = "",
) -> FitResult:
    """Run NCVMP cycles until the relative change of the bound is below tolerance.

    Non-convergence is reported through ``FitResult.converged``; numerical
    failures raise with the offending state attached as ``err.state``.
    """
    from .initialization import initialize

    options = options or FitOptions()
    parametrization = Parametrization.parse(parametrization)
    validate_dataset(ds)
    prior.check(ds)
    rule = gauss_hermite_rule(options.quad_points)
    workers = options.effective_workers

    t0 = time.perf_counter()
    state = initialize(ds, prior, parametrization) if init is None else init.copy()
    trace = []
    drops = []
    converged = False
    ws = None
    iteration = 0
    try:
        for iteration in range(1, options.max_iterations + 1):
            if parametrization.adaptive and iteration > 1:
                refresh_tuning(state, ds, ws)
                ws = None
            if ws is None:
                ws = refresh_workspace(state, ds, rule, workers)
            update_beta(state, ds, ws, prior.precision_beta, damping=options.damping)
            ws = refresh_workspace(state, ds, rule, workers)
            update_alpha(state, ds, ws, damping=options.damping, workers=workers)
            update_Sq(state, prior)
            ws = refresh_workspace(state, ds, rule, workers)
            value = elbo(state, ds, prior, ws)
            if not math.isfinite(value):
                raise NumericalError(f"lower bound is not finite at cycle {iteration}", context={"cycle": iteration})
            if trace and value < trace[-1] - 1e-10 * abs(trace[-1]):
                drops.append(iteration)
                if options.elbo_check == "strict":
                    log.warning("lower bound decreased at cycle %d: %.8f -> %.8f", iteration, trace[-1], value)
            trace.append(value)
            if len(trace) > 1 and abs((trace[-1] - trace[-2]) / trace[-1]) < options.tolerance:
                converged = True
                break
    except VbGlmmError as err:
        err.state = state.copy()
        raise
    wall = time.perf_counter() - t0
    return FitResult(
        state=state,
        elbo_trace=trace,
        converged=converged,
        iterations=iteration,
        posterior_summaries=posterior_summaries(state, ds),
        wall_time=wall,
        dataset_hash=ds.content_hash,
        parametrization=parametrization,
        label=label,
        diagnostics={"elbo_decreases": drops},
    )


# ---------------------------------------------------------------------------
# natural-parameter Gaussian update (reference form)
# ---------------------------------------------------------------------------


def generic_gaussian_update(mu, Sigma, dS_dvec_sigma, dS_dmu):
    """Fixed-point update of a Gaussian factor, computed two ways.

    ``dS_dvec_sigma`` (length d^2) and ``dS_dmu`` (length d) are the summed
    gradients of the neighbouring factor expectations.  Returns
    ``(generic, simplified)``, each a ``(mu_new, Sigma_new)`` pair: the first
    solves ``V(lambda) lambda_new = U(lambda) g`` with explicit duplication
    matrices and Kronecker products, the second uses the closed form
    ``Sigma = -1/2 [vec^{-1} g_Sigma]^{-1}``, ``mu = mu + Sigma g_mu``.
    """
    mu = np.asarray(mu, dtype=float).reshape(-1)
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    d = mu.size
    g_sig = np.asarray(dS_dvec_sigma, dtype=float).reshape(-1)
    g_mu = np.asarray(dS_dmu, dtype=float).reshape(-1)
    ops = DuplicationOps(d)
    Dd, Dp = ops.matrix, ops.plus
    col = mu[:, None]

    mu_kron_sig = np.kron(col, Sigma)
    U = np.block(
        [
            [2.0 * Dp @ np.kron(Sigma, Sigma), 2.0 * Dp @ mu_kron_sig],
            [np.zeros((d, d * d)), Sigma],
        ]
    )
    mm = col @ col.T
    v11 = 2.0 * Dp @ (np.kron(mm, Sigma) + np.kron(Sigma, mm) + np.kron(Sigma, Sigma)) @ Dp.T
    v12 = 2.0 * Dp @ mu_kron_sig
    Vmat = np.block([[v11, v12], [v12.T, Sigma]])
    g = np.concatenate([g_sig, g_mu])
    try:
        lam = np.linalg.solve(Vmat, U @ g)
    except np.linalg.LinAlgError as err:
        raise SPDError(f"V(lambda) is singular: {err}") from None
    k = d * (d + 1) // 2
    lam1, lam2 = lam[:k], lam[k:]
    # lam1 = -1/2 D_d^T vec(P): diagonal entries carry P_ii, off-diagonals 2 P_ij
    half = np.where(ops._rows == ops._cols, 1.0, 0.5)
    P = ops.unvech(-2.0 * lam1 * half)
    Sigma_gen = spd_inverse(P, "updated precision")
    generic = (Sigma_gen @ lam2, Sigma_gen)

    G = ops.unvec(g_sig)
    G = 0.5 * (G + G.T)
    Sigma_simple = spd_inverse(-2.0 * G, "updated precision")
    simplified = (mu + Sigma_simple @ g_mu, Sigma_simple)
    return generic, simplified
