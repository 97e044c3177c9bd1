"""Special functions, Gauss-Hermite quadrature and small linear-algebra helpers.

The logistic mixed model needs expectations of ``b(x) = log(1 + e^x)`` and
its first two derivatives under a univariate normal,

    B_r(mu, sigma) = int b^(r)(sigma * x + mu) phi(x) dx,   r = 0, 1, 2,

evaluated with Gauss-Hermite quadrature recentred at the mode of the
integrand (Liu & Pierce, 1994).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, eigh_tridiagonal
from scipy.special import expit

from .errors import DomainError, NumericalError, SPDError

__all__ = [
    "digamma",
    "log_multigamma",
    "QuadratureRule",
    "gauss_hermite_rule",
    "softplus_deriv",
    "recenter",
    "recenter_pair",
    "adaptive_ghq_b",
    "vector_b_batch",
    "b_moments",
    "spd_cholesky",
    "spd_solve",
    "spd_logdet",
    "spd_inverse",
    "spd_inverse_batch",
    "spd_logdet_batch",
    "DuplicationOps",
]

# ---------------------------------------------------------------------------
# digamma / multivariate gamma
# ---------------------------------------------------------------------------

# Bernoulli numbers B_2k / (2k) for the asymptotic expansion of psi.
_PSI_SERIES = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)
_PSI_SHIFT = 10.0


def digamma(x):
    """Digamma function for positive real arguments (scalar or array).

    Shifts the argument above 10 with psi(x) = psi(x + 1) - 1/x and then
    sums the asymptotic series through the x^-14 term.
    """
    arr = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr <= 0):
        raise DomainError(f"digamma requires finite x > 0, got {x!r}")
    z = arr.copy()
    acc = np.zeros_like(z)
    small = z < _PSI_SHIFT
    while np.any(small):
        acc[small] -= 1.0 / z[small]
        z[small] += 1.0
        small = z < _PSI_SHIFT
    inv2 = 1.0 / (z * z)
    series = np.zeros_like(z)
    for coef in reversed(_PSI_SERIES):
        series = (series + coef) * inv2
    out = acc + np.log(z) - 0.5 / z - series
    return float(out) if np.ndim(x) == 0 else out


def log_multigamma(nu: float, r: int) -> float:
    """log of the r-variate gamma function Gamma_r(nu / 2).

    Equal to ``r(r-1)/4 log(pi) + sum_{l=1}^r log Gamma((nu + 1 - l) / 2)``.
    """
    if r < 1:
        raise DomainError(f"dimension r must be >= 1, got {r}")
    total = r * (r - 1) / 4.0 * math.log(math.pi)
    for l in range(1, r + 1):
        arg = (nu + 1 - l) / 2.0
        if arg <= 0:
            raise DomainError(
                f"log_multigamma needs nu > r - 1 (nu={nu}, r={r}); "
                f"Gamma argument {arg} is not positive"
            )
        total += math.lgamma(arg)
    return total


# ---------------------------------------------------------------------------
# Gauss-Hermite rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Gauss-Hermite rule for the weight ``exp(-x^2)``.

    Attributes:
        order: number of nodes m.
        nodes: length-m array, symmetric about zero, ascending.
        weights: length-m array of positive weights summing to sqrt(pi).
    """

    order: int
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.nodes.setflags(write=False)
        self.weights.setflags(write=False)

    @functools.cached_property
    def log_scaled_weights(self) -> np.ndarray:
        # log(w_k) + x_k^2, used by the recentred rule; avoids overflow of
        # exp(x_k^2) for large m.
        out = np.log(self.weights) + self.nodes**2
        out.setflags(write=False)
        return out

    def integrate(self, f) -> float:
        """Approximate ``int f(x) exp(-x^2) dx``."""
        return float(np.sum(self.weights * f(self.nodes)))


@functools.lru_cache(maxsize=None)
def gauss_hermite_rule(m: int) -> QuadratureRule:
    """Order-m Gauss-Hermite rule via the Golub-Welsch eigenproblem.

    The Jacobi matrix of the (physicists') Hermite polynomials has a zero
    diagonal and off-diagonal entries sqrt(k / 2); its eigenvalues are the
    nodes.
    """
    if not isinstance(m, (int, np.integer)) or not 1 <= m <= 100:
        raise DomainError(f"quadrature order must be an integer in [1, 100], got {m!r}")
    m = int(m)
    if m == 1:
        return QuadratureRule(1, np.zeros(1), np.array([math.sqrt(math.pi)]))
    off = np.sqrt(np.arange(1, m) / 2.0)
    nodes = eigh_tridiagonal(np.zeros(m), off, eigvals_only=True)
    # Squared eigenvector components underflow for large m, so polish the
    # nodes with Newton on the orthonormal polynomial and take Christoffel
    # weights 1 / sum_j p_j(x)^2 instead.
    for _ in range(3):
        vals = _orthonormal_hermite(nodes, m)
        nodes = nodes - vals[m] / (math.sqrt(2.0 * m) * vals[m - 1])
    vals = _orthonormal_hermite(nodes, m)
    weights = 1.0 / np.sum(vals[:m] ** 2, axis=0)
    # enforce exact symmetry
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return QuadratureRule(m, nodes, weights)


def _orthonormal_hermite(x, m):
    """Rows j = 0..m of the Hermite polynomials orthonormal under exp(-x^2)."""
    out = np.empty((m + 1, x.size))
    out[0] = math.pi**-0.25
    out[1] = math.sqrt(2.0) * x * out[0]
    for j in range(1, m):
        out[j + 1] = (x * out[j] - math.sqrt(j / 2.0) * out[j - 1]) / math.sqrt((j + 1) / 2.0)
    return out


# ---------------------------------------------------------------------------
# b(x) = log(1 + e^x) and its derivatives
# ---------------------------------------------------------------------------


def softplus_deriv(order: int, z):
    """r-th derivative of ``log(1 + e^z)`` for r in {0, 1, 2}."""
    z = np.asarray(z, dtype=float)
    if order == 0:
        return np.logaddexp(0.0, z)
    if order == 1:
        return expit(z)
    if order == 2:
        return expit(z) * expit(-z)
    raise DomainError(f"derivative order must be 0, 1 or 2, got {order}")


def _log_ratio_terms(order: int, z):
    """d/dz log b^(r)(z) and its derivative."""
    s = expit(z)
    sc = expit(-z)
    if order == 1:
        return sc, -s * sc
    if order == 2:
        return sc - s, -2.0 * s * sc
    # order 0: b'/b and b''/b - (b'/b)^2, with the z -> -inf limits spelled
    # out where both numerator and denominator underflow.
    far = z < -30.0
    ez = np.exp(np.minimum(z, -30.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        sp = np.logaddexp(0.0, z)
        ratio = np.where(far, 1.0 - 0.5 * ez, s / sp)
        dratio = np.where(far, -0.5 * ez, s * sc / sp - ratio * ratio)
    return ratio, dratio


def recenter(order: int, mu, sigma, *, max_iter: int = 50, tol: float = 1e-10):
    """Mode and curvature scale of ``x -> b^(r)(sigma x + mu) phi(x)``.

    Returns ``(mode, scale)`` arrays.  The log-integrand is strictly concave
    for r = 0, 1, 2, and because d/dz log b^(r) lies in (-1, 1) the mode is
    bracketed by ``[-sigma - 1, sigma + 1]``; Newton steps that leave the
    current bracket are replaced by bisection.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    mu, sigma = np.broadcast_arrays(mu, sigma)
    lo = -sigma - 1.0
    hi = sigma + 1.0
    x = np.zeros(mu.shape)
    active = np.ones(mu.shape, dtype=bool)
    for _ in range(max_iter):
        ratio, dratio = _log_ratio_terms(order, sigma * x + mu)
        grad = sigma * ratio - x
        curv = sigma * sigma * dratio - 1.0
        lo = np.where(active & (grad > 0), x, lo)
        hi = np.where(active & (grad <= 0), x, hi)
        step = -grad / curv
        x_new = x + step
        outside = (x_new <= lo) | (x_new >= hi)
        x_new = np.where(outside, 0.5 * (lo + hi), x_new)
        done = (np.abs(x_new - x) < tol) | (hi - lo < tol)
        x = np.where(active, x_new, x)
        active &= ~done
        if not active.any():
            break
    _, dratio = _log_ratio_terms(order, sigma * x + mu)
    curv = sigma * sigma * dratio - 1.0
    return x, 1.0 / np.sqrt(-curv)


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _recentred_sum(order, mu, sigma, mode, scale, rule):
    t = mode[..., None] + math.sqrt(2.0) * scale[..., None] * rule.nodes
    logw = rule.log_scaled_weights - 0.5 * t * t
    vals = softplus_deriv(order, sigma[..., None] * t + mu[..., None])
    out = math.sqrt(2.0) * scale * _INV_SQRT_2PI * np.sum(np.exp(logw) * vals, axis=-1)
    degenerate = sigma == 0
    if np.any(degenerate):
        out = np.where(degenerate, softplus_deriv(order, mu), out)
    return out


def _check_inputs(mu, sigma):
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if mu.shape != sigma.shape:
        raise ValueError(f"mu and sigma shapes differ: {mu.shape} vs {sigma.shape}")
    if np.any(sigma < 0) or not np.all(np.isfinite(sigma)) or not np.all(np.isfinite(mu)):
        raise DomainError("sigma must be finite and nonnegative and mu finite")
    return mu, sigma


def _raise_nonfinite(order, mu, sigma, out):
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        k = int(bad[0])
        raise NumericalError(
            f"non-finite B^({order}) at index {k}",
            context={"r": order, "mu": float(mu.flat[k]), "sigma": float(sigma.flat[k]), "index": k},
        )


def adaptive_ghq_b(r_order: int, mu: float, sigma: float, rule: QuadratureRule) -> float:
    """``B_r(mu, sigma)`` for scalar arguments by adaptive Gauss-Hermite quadrature."""
    out = vector_b_batch(r_order, np.array([mu], dtype=float), np.array([sigma], dtype=float), rule)
    return float(out[0])


def _reflect(order, mu, direct, mirrored):
    # B_0(mu) = mu + B_0(-mu), B_1(mu) = 1 - B_1(-mu), B_2 is even in mu
    if order == 0:
        alt = mu + mirrored
    elif order == 1:
        alt = 1.0 - mirrored
    else:
        alt = mirrored
    return 0.5 * (direct + alt)


def vector_b_batch(r_order: int, mu, sigma, rule: QuadratureRule, center=None, *, symmetric=True):
    """Elementwise ``B_r`` over equal-shaped ``mu`` and ``sigma``.

    ``center`` is an optional recentring from :func:`recenter` (a
    ``(mode, scale)`` pair) or, in symmetric mode, from
    :func:`recenter_pair`; when omitted the mode is located for this
    derivative order.  ``symmetric=True`` averages the rule applied at
    ``mu`` with the reflection identity applied at ``-mu``, which makes the
    result respect the exact symmetries of B_r (e.g. ``B_1(0, s) = 1/2``)
    and roughly halves the quadrature error for wide ``sigma``.
    """
    mu, sigma = _check_inputs(mu, sigma)
    if symmetric:
        if center is None:
            center = (recenter(r_order, mu, sigma), recenter(r_order, -mu, sigma))
        elif len(center) != 2 or np.ndim(center[0]) == np.ndim(mu):
            raise ValueError("symmetric mode needs a center pair from recenter_pair")
        direct = _recentred_sum(r_order, mu, sigma, *center[0], rule)
        mirrored = _recentred_sum(r_order, -mu, sigma, *center[1], rule)
        out = _reflect(r_order, mu, direct, mirrored)
    else:
        if center is None:
            center = recenter(r_order, mu, sigma)
        out = _recentred_sum(r_order, mu, sigma, *center, rule)
    _raise_nonfinite(r_order, mu, sigma, out)
    return out


def recenter_pair(mu, sigma):
    """r = 1 recentrings at ``mu`` and ``-mu``, shared by B_0, B_1 and B_2."""
    mu, sigma = _check_inputs(mu, sigma)
    return recenter(1, mu, sigma), recenter(1, -mu, sigma)


def b_moments(mu, sigma, rule: QuadratureRule, center=None):
    """``(B_0, B_1, B_2)`` sharing one recentring computed at r = 1."""
    center = recenter_pair(mu, sigma) if center is None else center
    return tuple(vector_b_batch(r, mu, sigma, rule, center=center) for r in (0, 1, 2))


# ---------------------------------------------------------------------------
# SPD helpers
# ---------------------------------------------------------------------------


def _min_eig(a):
    try:
        return float(np.min(np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, -1, -2)))))
    except np.linalg.LinAlgError:
        return float("nan")


def spd_cholesky(a, what: str = "matrix"):
    """Lower Cholesky factor; on failure symmetrize once and retry."""
    a = np.asarray(a, dtype=float)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    sym = 0.5 * (a + np.swapaxes(a, -1, -2))
    try:
        return np.linalg.cholesky(sym)
    except np.linalg.LinAlgError:
        piv = _min_eig(a)
        raise SPDError(f"{what} is not positive definite (smallest eigenvalue {piv:.3e})", min_pivot=piv) from None


def spd_solve(a, b, what: str = "matrix"):
    """Solve ``a x = b`` for SPD ``a``."""
    chol = spd_cholesky(a, what)
    return cho_solve((chol, True), np.asarray(b, dtype=float))


def spd_logdet(a, what: str = "matrix") -> float:
    chol = spd_cholesky(a, what)
    return float(2.0 * np.sum(np.log(np.diag(chol))))


def spd_inverse(a, what: str = "matrix"):
    """Explicit inverse, for quantities that must be materialized as covariances."""
    a = np.asarray(a, dtype=float)
    inv = spd_solve(a, np.eye(a.shape[-1]), what)
    return 0.5 * (inv + inv.T)


def spd_inverse_batch(a, what: str = "matrix"):
    """Inverse of a stack ``(..., d, d)`` of SPD matrices."""
    chol = spd_cholesky(a, what)
    linv = np.linalg.inv(chol)
    inv = np.swapaxes(linv, -1, -2) @ linv
    return 0.5 * (inv + np.swapaxes(inv, -1, -2))


def spd_logdet_batch(a, what: str = "matrix"):
    chol = spd_cholesky(a, what)
    return 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)


# ---------------------------------------------------------------------------
# vec / vech and the duplication matrix
# ---------------------------------------------------------------------------


class DuplicationOps:
    """vec/vech maps and the duplication matrix ``D_d`` for d x d matrices.

    ``vec`` stacks columns; ``vech`` keeps the on-and-below-diagonal part
    column by column.  ``matrix`` satisfies ``matrix @ vech(A) == vec(A)``
    for symmetric A and ``plus`` is its Moore-Penrose inverse.
    """

    def __init__(self, d: int):
        if d < 1:
            raise ValueError("d must be positive")
        self.d = d
        self._rows, self._cols = np.tril_indices(d)
        # column-major order of the lower triangle
        order = np.lexsort((self._rows, self._cols))
        self._rows, self._cols = self._rows[order], self._cols[order]

    @staticmethod
    def vec(a):
        return np.asarray(a).reshape(-1, order="F")

    def unvec(self, v):
        return np.asarray(v).reshape(self.d, self.d, order="F")

    def vech(self, a):
        return np.asarray(a)[self._rows, self._cols]

    def unvech(self, v):
        out = np.zeros((self.d, self.d))
        out[self._rows, self._cols] = v
        out[self._cols, self._rows] = v
        return out

    @functools.cached_property
    def matrix(self):
        d = self.d
        out = np.zeros((d * d, d * (d + 1) // 2))
        for k, (i, j) in enumerate(zip(self._rows, self._cols)):
            out[j * d + i, k] = 1.0
            out[i * d + j, k] = 1.0
        return out

    @functools.cached_property
    def plus(self):
        dm = self.matrix
        return np.linalg.solve(dm.T @ dm, dm.T)
