"""Data model for clustered GLMMs and the variational state.

Fixed effects are ordered ``beta = [beta_R, beta_G1, beta_G2]``: the r
coefficients whose covariates also carry random effects (intercept first),
the g1 subject-level coefficients, then the within-cluster ones.  The
partially noncentred random effects are

    alpha_tilde_i = C_i beta_RG1 + u_i - W_i C_i beta_RG1,

so that ``eta_i = V_i beta + XR_i alpha_tilde_i``.
"""

from __future__ import annotations

import copy
import enum
import functools
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import ShapeError, SPDError, ValidationError
from .special import spd_cholesky

__all__ = [
    "Family",
    "Parametrization",
    "ClusterData",
    "Dataset",
    "ClusterBatch",
    "PriorSpec",
    "VariationalState",
    "FitResult",
    "build_cluster_design",
    "build_designs",
    "cluster_c_matrix",
    "validate_dataset",
    "constant_within_clusters",
    "posterior_summaries",
]


class Family(enum.Enum):
    POISSON = "poisson"
    BERNOULLI = "bernoulli"

    @classmethod
    def parse(cls, name) -> "Family":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower()
        aliases = {"poisson": cls.POISSON, "bernoulli": cls.BERNOULLI, "logistic": cls.BERNOULLI, "binary": cls.BERNOULLI}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown family {name!r}; expected 'poisson' or 'bernoulli'") from None


class Parametrization(enum.Enum):
    CENTERED = "centered"
    NONCENTERED = "noncentered"
    PARTIAL_FIXED = "partial-fixed"
    PARTIAL_ADAPTIVE = "partial-adaptive"

    @classmethod
    def parse(cls, name) -> "Parametrization":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "-")
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(f"unknown parametrization {name!r}; expected one of {[m.value for m in cls]}")

    @property
    def adaptive(self) -> bool:
        return self is Parametrization.PARTIAL_ADAPTIVE

    @property
    def partial(self) -> bool:
        return self in (Parametrization.PARTIAL_FIXED, Parametrization.PARTIAL_ADAPTIVE)


def _as_matrix(a, rows, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1 and rows is not None and a.size == 0:
        a = a.reshape(rows, 0)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-dimensional, got shape {a.shape}", block=name)
    return a


@dataclass(frozen=True, eq=False)
class ClusterData:
    """One cluster of observations.

    Attributes:
        y: responses, length n_i.
        XR: n_i x r random-effects design (first column ones).
        xg1: length-g1 subject-level covariate row.
        XG2: n_i x g2 within-cluster fixed-effects design.
        offset: length-n_i multiplicative offsets E_i (Poisson only).
    """

    y: np.ndarray
    XR: np.ndarray
    xg1: np.ndarray = None
    XG2: np.ndarray = None
    offset: np.ndarray = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        n_i = y.size
        XR = _as_matrix(self.XR, n_i, "XR")
        xg1 = np.zeros(0) if self.xg1 is None else np.asarray(self.xg1, dtype=float).reshape(-1)
        XG2 = np.zeros((n_i, 0)) if self.XG2 is None else _as_matrix(self.XG2, n_i, "XG2")
        offset = np.ones(n_i) if self.offset is None else np.asarray(self.offset, dtype=float).reshape(-1)
        if XR.shape[0] != n_i:
            raise ShapeError(f"XR has {XR.shape[0]} rows but y has {n_i}", block="XR")
        if XG2.shape[0] != n_i:
            raise ShapeError(f"XG2 has {XG2.shape[0]} rows but y has {n_i}", block="XG2")
        if offset.size != n_i:
            raise ShapeError(f"offset has length {offset.size} but y has {n_i}", block="offset")
        if xg1.size and XR.shape[1] == 0:
            raise ShapeError("subject-level covariates need a random intercept", block="xg1")
        for name, arr in (("y", y), ("XR", XR), ("xg1", xg1), ("XG2", XG2), ("offset", offset)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_i(self) -> int:
        return self.y.size

    @property
    def r(self) -> int:
        return self.XR.shape[1]

    @property
    def g1(self) -> int:
        return self.xg1.size

    @property
    def g2(self) -> int:
        return self.XG2.shape[1]

    @property
    def p(self) -> int:
        return self.r + self.g1 + self.g2

    def pooled_design(self) -> np.ndarray:
        """n_i x p design ``[XR, 1 xg1^T, XG2]`` ordered like beta."""
        return np.hstack([self.XR, np.tile(self.xg1, (self.n_i, 1)), self.XG2])


@dataclass(frozen=True, eq=False)
class ClusterBatch:
    """Zero-padded stack of all clusters, shape ``(n, m, ...)`` with m = max n_i."""

    y: np.ndarray
    mask: np.ndarray
    XR: np.ndarray
    XG2: np.ndarray
    xg1: np.ndarray
    offset: np.ndarray
    log_y_factorial: np.ndarray
    sizes: np.ndarray

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def take(self, idx) -> "ClusterBatch":
        return ClusterBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


@dataclass(eq=False)
class Dataset:
    """Ordered clusters sharing one family and column layout."""

    clusters: list
    family: Family
    fixed_names: list = None
    random_names: list = None
    cluster_ids: list = None

    def __post_init__(self):
        self.family = Family.parse(self.family)
        self.clusters = list(self.clusters)
        if not self.clusters:
            raise ValidationError("dataset has no clusters")
        first = self.clusters[0]
        for i, c in enumerate(self.clusters):
            for attr in ("r", "g1", "g2"):
                if getattr(c, attr) != getattr(first, attr):
                    raise ShapeError(
                        f"cluster {i} has {attr}={getattr(c, attr)} but cluster 0 has {getattr(first, attr)}",
                        block=attr,
                    )
        if self.fixed_names is None:
            self.fixed_names = (
                [f"beta_R{k}" for k in range(self.r)]
                + [f"beta_G1_{k}" for k in range(self.g1)]
                + [f"beta_G2_{k}" for k in range(self.g2)]
            )
        if self.random_names is None:
            self.random_names = [f"u{k}" for k in range(self.r)]
        if self.cluster_ids is None:
            self.cluster_ids = list(range(self.n))
        if len(self.fixed_names) != self.p:
            raise ShapeError(f"{len(self.fixed_names)} fixed-effect names for p={self.p}", block="fixed_names")
        if len(self.random_names) != self.r:
            raise ShapeError(f"{len(self.random_names)} random-effect names for r={self.r}", block="random_names")

    @property
    def n(self) -> int:
        return len(self.clusters)

    @property
    def r(self) -> int:
        return self.clusters[0].r

    @property
    def g1(self) -> int:
        return self.clusters[0].g1

    @property
    def g2(self) -> int:
        return self.clusters[0].g2

    @property
    def p(self) -> int:
        return self.r + self.g1 + self.g2

    @property
    def n_obs(self) -> int:
        return sum(c.n_i for c in self.clusters)

    @functools.cached_property
    def batch(self) -> ClusterBatch:
        n, m, r, g2 = self.n, max(c.n_i for c in self.clusters), self.r, self.g2
        y = np.zeros((n, m))
        mask = np.zeros((n, m))
        XR = np.zeros((n, m, r))
        XG2 = np.zeros((n, m, g2))
        xg1 = np.zeros((n, self.g1))
        offset = np.ones((n, m))
        for i, c in enumerate(self.clusters):
            k = c.n_i
            y[i, :k] = c.y
            mask[i, :k] = 1.0
            XR[i, :k] = c.XR
            XG2[i, :k] = c.XG2
            xg1[i] = c.xg1
            offset[i, :k] = c.offset
        logfact = gammaln(y + 1.0) * mask
        sizes = np.array([c.n_i for c in self.clusters])
        return ClusterBatch(y, mask, XR, XG2, xg1, offset, logfact, sizes)

    @functools.cached_property
    def content_hash(self) -> str:
        """Hash of responses, offsets and cluster structure.

        Two datasets that differ only in which covariates enter the model
        share a hash, so fits of competing models can be compared.
        """
        h = hashlib.sha256()
        h.update(self.family.value.encode())
        for c in self.clusters:
            h.update(np.int64(c.n_i).tobytes())
            h.update(np.ascontiguousarray(c.y).tobytes())
            h.update(np.ascontiguousarray(c.offset).tobytes())
        return h.hexdigest()

    def pooled(self):
        """Stacked ``(X, y, offset)`` over all clusters."""
        X = np.vstack([c.pooled_design() for c in self.clusters])
        y = np.concatenate([c.y for c in self.clusters])
        offset = np.concatenate([c.offset for c in self.clusters])
        return X, y, offset


def validate_dataset(ds: Dataset) -> None:
    """Check data support, offsets and the intercept-column convention.

    Raises ValidationError whose ``diagnostics`` lists every violation as
    ``(cluster_index, row_indices, reason)``.
    """
    problems = []
    for i, c in enumerate(ds.clusters):
        if c.n_i < 1:
            problems.append((i, [], "cluster is empty"))
            continue
        for name in ("y", "XR", "xg1", "XG2", "offset"):
            arr = getattr(c, name)
            if not np.all(np.isfinite(arr)):
                rows = np.unique(np.nonzero(~np.isfinite(arr))[0]).tolist() if arr.ndim else []
                problems.append((i, rows, f"non-finite values in {name}"))
        if ds.family is Family.BERNOULLI:
            bad = np.flatnonzero((c.y != 0) & (c.y != 1))
            if bad.size:
                problems.append((i, bad.tolist(), "Bernoulli response outside {0, 1}"))
            bad = np.flatnonzero(c.offset != 1)
            if bad.size:
                problems.append((i, bad.tolist(), "Bernoulli clusters must have unit offsets"))
        else:
            bad = np.flatnonzero((c.y < 0) | (c.y != np.round(c.y)))
            if bad.size:
                problems.append((i, bad.tolist(), "Poisson response must be a nonnegative integer"))
            bad = np.flatnonzero(~(c.offset > 0))
            if bad.size:
                problems.append((i, bad.tolist(), "Poisson offsets must be positive"))
        if c.r and np.any(c.XR != 0):
            bad = np.flatnonzero(c.XR[:, 0] != 1)
            if bad.size:
                problems.append((i, bad.tolist(), "first column of XR must be all ones (random intercept)"))
    if problems:
        lines = [f"cluster {i}: {reason}" + (f" (rows {rows})" if rows else "") for i, rows, reason in problems]
        raise ValidationError("invalid dataset:\n  " + "\n  ".join(lines), diagnostics=problems)


def constant_within_clusters(columns_by_cluster) -> np.ndarray:
    """Advisory check: which columns are constant within every cluster.

    ``columns_by_cluster`` is a sequence of n_i x k arrays; returns a
    boolean array of length k.
    """
    const = None
    for block in columns_by_cluster:
        block = np.asarray(block, dtype=float)
        ok = np.all(block == block[:1], axis=0)
        const = ok if const is None else const & ok
    return const


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PriorSpec:
    """N(0, Sigma_beta) on fixed effects and IW(nu, S) on D."""

    Sigma_beta: np.ndarray
    nu: float
    S: np.ndarray

    def __post_init__(self):
        self.Sigma_beta = np.atleast_2d(np.asarray(self.Sigma_beta, dtype=float))
        self.S = np.atleast_2d(np.asarray(self.S, dtype=float))
        self.nu = float(self.nu)
        for name in ("Sigma_beta", "S"):
            a = getattr(self, name)
            if a.shape[0] != a.shape[1]:
                raise ShapeError(f"{name} must be square, got {a.shape}", block=name)
            if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12):
                raise SPDError(f"{name} is not symmetric")
            spd_cholesky(a, name)
        r = self.S.shape[0]
        if self.nu < r:
            raise ValueError(f"inverse-Wishart degrees of freedom nu={self.nu} must be >= r={r}")

    @property
    def r(self) -> int:
        return self.S.shape[0]

    @property
    def p(self) -> int:
        return self.Sigma_beta.shape[0]

    @functools.cached_property
    def precision_beta(self) -> np.ndarray:
        from .special import spd_inverse

        return spd_inverse(self.Sigma_beta, "Sigma_beta")

    def check(self, ds: Dataset) -> None:
        if self.p != ds.p:
            raise ShapeError(f"prior Sigma_beta is {self.p}x{self.p} but the model has p={ds.p}", block="Sigma_beta")
        if self.r != ds.r:
            raise ShapeError(f"prior S is {self.r}x{self.r} but the model has r={ds.r}", block="S")


# ---------------------------------------------------------------------------
# designs under a tuning matrix
# ---------------------------------------------------------------------------


def cluster_c_matrix(xg1, r: int) -> np.ndarray:
    """C_i = [I_r | e_1 xg1^T], the r x (r + g1) map beta_RG1 -> cluster mean."""
    xg1 = np.asarray(xg1, dtype=float).reshape(-1)
    C = np.zeros((r, r + xg1.size))
    C[:, :r] = np.eye(r)
    if xg1.size:
        C[0, r:] = xg1
    return C


def build_cluster_design(cluster: ClusterData, W):
    """Return ``(V, W_tilde, C)`` for one cluster under tuning matrix W."""
    W = np.asarray(W, dtype=float)
    r = cluster.r
    if W.shape != (r, r):
        raise ShapeError(f"W must be {r}x{r}, got {W.shape}", block="W")
    C = cluster_c_matrix(cluster.xg1, r)
    V = np.hstack([cluster.XR @ W @ C, cluster.XG2])
    W_tilde = np.hstack([(np.eye(r) - W) @ C, np.zeros((r, cluster.g2))])
    return V, W_tilde, C


def _batch_c(batch: ClusterBatch, r: int) -> np.ndarray:
    n, g1 = batch.xg1.shape
    C = np.zeros((n, r, r + g1))
    C[:, :, :r] = np.eye(r)
    if g1:
        C[:, 0, r:] = batch.xg1
    return C


def build_designs(batch: ClusterBatch, W):
    """Batched ``(V, W_tilde, C)`` with shapes (n, m, p), (n, r, p), (n, r, r+g1)."""
    n, m, r = batch.XR.shape
    g2 = batch.XG2.shape[2]
    W = np.asarray(W, dtype=float)
    if W.shape != (n, r, r):
        raise ShapeError(f"W must have shape {(n, r, r)}, got {W.shape}", block="W")
    C = _batch_c(batch, r)
    V = np.concatenate([batch.XR @ (W @ C), batch.XG2], axis=2)
    W_tilde = np.concatenate([(np.eye(r) - W) @ C, np.zeros((n, r, g2))], axis=2)
    return V, W_tilde, C


# ---------------------------------------------------------------------------
# variational state
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class VariationalState:
    """Parameters of q(beta) q(D) prod_i q(alpha_tilde_i).

    Per-cluster quantities are stacked along a leading axis of length n;
    ``V`` is zero on padded rows.
    """

    mu_beta: np.ndarray
    Sigma_beta: np.ndarray
    nu_q: float
    S_q: np.ndarray
    mu_alpha: np.ndarray
    Sigma_alpha: np.ndarray
    W: np.ndarray
    V: np.ndarray = field(default=None, repr=False)
    W_tilde: np.ndarray = field(default=None, repr=False)
    C: np.ndarray = field(default=None, repr=False)

    @classmethod
    def create(cls, ds: Dataset, mu_beta, Sigma_beta, nu_q, S_q, mu_alpha, Sigma_alpha, W):
        state = cls(
            np.array(mu_beta, dtype=float),
            np.array(Sigma_beta, dtype=float),
            float(nu_q),
            np.array(S_q, dtype=float),
            np.array(mu_alpha, dtype=float),
            np.array(Sigma_alpha, dtype=float),
            np.array(W, dtype=float),
        )
        state.set_tuning(ds.batch, state.W)
        return state

    def set_tuning(self, batch: ClusterBatch, W) -> None:
        """Install new tuning matrices and the derived V, W_tilde."""
        self.W = np.array(W, dtype=float)
        self.V, self.W_tilde, self.C = build_designs(batch, self.W)

    def copy(self) -> "VariationalState":
        return copy.deepcopy(self)

    @property
    def mu_beta_rg1(self) -> np.ndarray:
        return self.mu_beta[: self.C.shape[2]]

    def alpha_means(self) -> np.ndarray:
        """Posterior means of alpha_i = alpha_tilde_i + W_i C_i beta_RG1."""
        return self.mu_alpha + np.einsum("nrs,nsk,k->nr", self.W, self.C, self.mu_beta_rg1)

    def check_invariants(self, ds: Dataset, prior: PriorSpec, atol: float = 1e-10) -> None:
        """Raise AssertionError if any structural invariant fails."""
        n, r, p = ds.n, ds.r, ds.p
        assert self.mu_beta.shape == (p,)
        assert self.Sigma_beta.shape == (p, p)
        assert self.S_q.shape == (r, r)
        assert self.mu_alpha.shape == (n, r)
        assert self.Sigma_alpha.shape == (n, r, r)
        assert math.isclose(self.nu_q, n + prior.nu), f"nu_q={self.nu_q} != n + nu = {n + prior.nu}"
        spd_cholesky(self.Sigma_beta, "Sigma_beta^q")
        spd_cholesky(self.S_q, "S^q")
        spd_cholesky(self.Sigma_alpha, "Sigma_alpha^q")
        V, Wt, _ = build_designs(ds.batch, self.W)
        assert np.allclose(V, self.V, atol=atol) and np.allclose(Wt, self.W_tilde, atol=atol)


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


def _iw_moments(S_q, nu_q):
    """Mean and entrywise SD of D ~ IW(nu_q, S_q)."""
    r = S_q.shape[0]
    a = nu_q - r
    mean = S_q / (a - 1.0) if a > 1 else np.full_like(S_q, np.nan)
    if a > 3:
        d = np.diag(S_q)
        var = ((a + 1.0) * S_q**2 + (a - 1.0) * np.outer(d, d)) / (a * (a - 1.0) ** 2 * (a - 3.0))
        sd = np.sqrt(var)
    else:
        sd = np.full_like(S_q, np.nan)
    return mean, sd


def posterior_summaries(state: VariationalState, ds: Dataset) -> dict:
    """Posterior means and SDs of fixed effects and random-effect SDs.

    Random-effect SDs are ``sqrt(E D_kk)`` with a delta-method SD from the
    inverse-Wishart variance of ``D_kk``.
    """
    sd_beta = np.sqrt(np.diag(state.Sigma_beta))
    D_mean, D_sd = _iw_moments(state.S_q, state.nu_q)
    with np.errstate(invalid="ignore"):
        sig = np.sqrt(np.diag(D_mean))
        sig_sd = np.diag(D_sd) / (2.0 * sig)
    return {
        "fixed": [
            {"name": name, "mean": float(m), "sd": float(s)}
            for name, m, s in zip(ds.fixed_names, state.mu_beta, sd_beta)
        ],
        "random_sd": [
            {"name": name, "mean": float(m), "sd": float(s)} for name, m, s in zip(ds.random_names, sig, sig_sd)
        ],
        "D_mean": D_mean.tolist(),
        "D_sd": D_sd.tolist(),
    }


@dataclass(eq=False)
class FitResult:
    state: VariationalState
    elbo_trace: list
    converged: bool
    iterations: int
    posterior_summaries: dict
    wall_time: float
    dataset_hash: str = ""
    parametrization: Parametrization = None
    label: str = ""
    diagnostics: dict = field(default_factory=dict)

    @property
    def elbo(self) -> float:
        return self.elbo_trace[-1] if self.elbo_trace else float("nan")

    def fixed_means(self) -> np.ndarray:
        return np.array([row["mean"] for row in self.posterior_summaries["fixed"]])

    def random_sd_means(self) -> np.ndarray:
        return np.array([row["mean"] for row in self.posterior_summaries["random_sd"]])
