"""Model comparison through the lower bound, and the random-intercept simulation designs."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .model import ClusterData, Dataset, Family, FitResult

__all__ = [
    "ModelComparison",
    "model_probabilities",
    "compare_models",
    "stagewise_selection",
    "DesignTag",
    "SimDesign",
    "simulate_design",
    "rmse_report",
    "rows_to_csv",
    "format_table",
]


def model_probabilities(elbos) -> np.ndarray:
    """Posterior model probabilities under equal prior weights.

    Non-finite bounds (failed fits) get probability zero.
    """
    elbos = np.asarray(elbos, dtype=float)
    ok = np.isfinite(elbos)
    probs = np.zeros_like(elbos)
    if ok.any():
        e = np.exp(elbos[ok] - elbos[ok].max())
        probs[ok] = e / e.sum()
    return probs


@dataclass
class ModelComparison:
    labels: list
    elbos: np.ndarray
    converged: list
    probabilities: np.ndarray

    @property
    def ranking(self) -> list:
        order = sorted(range(len(self.labels)), key=lambda k: (-self.elbos[k], k))
        return [self.labels[k] for k in order]

    @property
    def best(self) -> str:
        return self.ranking[0]

    def rows(self) -> list:
        return [
            {"model": lab, "elbo": float(e), "converged": bool(c), "probability": float(p)}
            for lab, e, c, p in zip(self.labels, self.elbos, self.converged, self.probabilities)
        ]


def compare_models(fits, labels=None) -> ModelComparison:
    """Rank fits of competing models on one dataset by their lower bounds."""
    fits = list(fits)
    if len(fits) < 2:
        raise ValueError("model comparison needs at least two fits")
    hashes = {f.dataset_hash for f in fits}
    if len(hashes) > 1:
        raise ValidationError("fits come from different datasets (content hashes differ)")
    if labels is None:
        labels = [f.label or f"model{k + 1}" for k, f in enumerate(fits)]
    elbos = np.array([f.elbo for f in fits])
    return ModelComparison(list(labels), elbos, [f.converged for f in fits], model_probabilities(elbos))


def stagewise_selection(fit_model, terms, *, max_stages=None):
    """Backward elimination by lower bound.

    ``fit_model(terms)`` returns a FitResult for the model with the given
    tuple of terms.  Each stage fits every drop-one submodel of the current
    model; the best submodel replaces the current one if its bound is
    higher, otherwise selection stops.  Returns ``(selected_terms, stages)``
    where ``stages`` lists the ModelComparison of each stage.
    """
    current = tuple(terms)
    current_fit = fit_model(current)
    stages = []
    while current and (max_stages is None or len(stages) < max_stages):
        candidates = [tuple(t for t in current if t != drop) for drop in current]
        fits = [current_fit] + [fit_model(c) for c in candidates]
        labels = ["+".join(current) or "(none)"] + ["+".join(c) or "(none)" for c in candidates]
        cmp = compare_models(fits, labels)
        stages.append(cmp)
        best = int(np.argmax(cmp.elbos))
        if best == 0:
            break
        current, current_fit = candidates[best - 1], fits[best]
    return current, stages


# ---------------------------------------------------------------------------
# simulation designs
# ---------------------------------------------------------------------------


class DesignTag(enum.Enum):
    POISSON_INTERCEPT = "poisson-intercept"
    LOGISTIC_INTERCEPT = "logistic-intercept"


_DESIGNS = {
    # beta0, beta1, sigma, n, n_i, covariate x_ij as a function of j = 1..n_i
    DesignTag.POISSON_INTERCEPT: (Family.POISSON, -0.5, -0.5, 0.1, 100, 2, lambda j, ni: j - 1.0),
    DesignTag.LOGISTIC_INTERCEPT: (Family.BERNOULLI, 0.0, 5.0, math.sqrt(1.5), 50, 8, lambda j, ni: j / 8.0),
}


@dataclass(frozen=True)
class SimDesign:
    """Random-intercept simulation design ``g(mu_ij) = beta0 + beta1 x_ij + u_i``.

    ``beta1``/``sigma``/``n`` override the standard settings when given.
    """

    tag: DesignTag
    replicates: int = 100
    seed: int = 0
    beta0: float = None
    beta1: float = None
    sigma: float = None
    n: int = None

    def __post_init__(self):
        object.__setattr__(self, "tag", DesignTag(self.tag))
        fam, b0, b1, sig, n, _, _ = _DESIGNS[self.tag]
        for name, default in (("beta0", b0), ("beta1", b1), ("sigma", sig), ("n", n)):
            if getattr(self, name) is None:
                object.__setattr__(self, name, default)
        if self.replicates < 1:
            raise ValueError("replicates must be positive")

    @property
    def family(self) -> Family:
        return _DESIGNS[self.tag][0]

    @property
    def cluster_size(self) -> int:
        return _DESIGNS[self.tag][5]

    def covariate(self) -> np.ndarray:
        ni = self.cluster_size
        return np.array([_DESIGNS[self.tag][6](j, ni) for j in range(1, ni + 1)])

    @property
    def truth(self) -> dict:
        return {"(Intercept)": self.beta0, "x": self.beta1, "sigma_(Intercept)": self.sigma}


def _simulate_one(design: SimDesign, rng) -> Dataset:
    x = design.covariate()
    ni = x.size
    XR = np.ones((ni, 1))
    XG2 = x[:, None]
    u = rng.normal(0.0, design.sigma, size=design.n)
    eta = design.beta0 + design.beta1 * x[None, :] + u[:, None]
    if design.family is Family.POISSON:
        y = rng.poisson(np.exp(eta)).astype(float)
    else:
        y = (rng.uniform(size=eta.shape) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    clusters = [ClusterData(y[i], XR, XG2=XG2) for i in range(design.n)]
    return Dataset(clusters, design.family, fixed_names=["(Intercept)", "x"], random_names=["(Intercept)"])


def simulate_design(design: SimDesign) -> list:
    """Replicate datasets; replicate k is drawn from an independent child seed."""
    children = np.random.SeedSequence(design.seed).spawn(design.replicates)
    return [_simulate_one(design, np.random.default_rng(child)) for child in children]


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def _estimates(fit: FitResult) -> dict:
    out = {}
    for row in fit.posterior_summaries["fixed"]:
        out[row["name"]] = (row["mean"], row["sd"])
    for row in fit.posterior_summaries["random_sd"]:
        out["sigma_" + row["name"]] = (row["mean"], row["sd"])
    return out


def rmse_report(fits, reference) -> list:
    """Per-parameter averages and root mean squared error against a reference.

    ``reference`` maps parameter names to either a scalar (e.g. the design
    truth) or a per-replicate sequence (e.g. estimates from another
    method); alternatively it may be a list of FitResults.  Rows hold
    ``parameter, mean, sd_mean, rmse``.
    """
    fits = list(fits)
    if not fits:
        raise ValueError("no fits to summarize")
    est = [_estimates(f) for f in fits]
    if isinstance(reference, (list, tuple)) and reference and isinstance(reference[0], FitResult):
        if len(reference) != len(fits):
            raise ShapeError(f"{len(reference)} reference fits for {len(fits)} fits", block="reference")
        ref_est = [_estimates(f) for f in reference]
        reference = {k: [e[k][0] for e in ref_est] for k in ref_est[0]}
    rows = []
    for name in est[0]:
        means = np.array([e[name][0] for e in est])
        sds = np.array([e[name][1] for e in est])
        row = {"parameter": name, "mean": float(means.mean()), "sd_mean": float(sds.mean()), "rmse": float("nan")}
        if name in reference:
            ref = np.asarray(reference[name], dtype=float)
            if ref.ndim and ref.size != means.size:
                raise ShapeError(f"reference for {name} has {ref.size} values for {means.size} fits", block=name)
            row["rmse"] = float(np.sqrt(np.mean((means - ref) ** 2)))
        rows.append(row)
    return rows


def rows_to_csv(rows, columns=None) -> str:
    rows = list(rows)
    columns = columns or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt_cell(row.get(k)) for k in columns})
    return buf.getvalue()


def _fmt_cell(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    return "" if v is None else v


def format_table(rows, columns=None, floatfmt="{:.4f}") -> str:
    """Fixed-width text rendering of a list of dict rows."""
    rows = list(rows)
    if not rows:
        return ""
    columns = columns or list(rows[0])
    cells = [[str(c) for c in columns]]
    for row in rows:
        line = []
        for c in columns:
            v = row.get(c)
            line.append(floatfmt.format(v) if isinstance(v, float) else str(v))
        cells.append(line)
    widths = [max(len(r[k]) for r in cells) for k in range(len(columns))]
    return "\n".join("  ".join(s.rjust(w) for s, w in zip(r, widths)) for r in cells)
