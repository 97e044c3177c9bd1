"""Model configuration files and CSV data ingestion."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .engine import FitOptions
from .errors import ValidationError
from .initialization import default_prior, glm_irls
from .model import ClusterData, Dataset, Family, Parametrization, constant_within_clusters, validate_dataset

__all__ = ["ModelConfig", "ingest_csv", "emit_csv", "build_prior", "build_options", "config_hash"]

_PRIOR_KEYS = {"sigma_beta_scale", "nu", "S", "c"}
_OPTION_KEYS = set(FitOptions.__dataclass_fields__)


@dataclass
class ModelConfig:
    """Declarative model description read from JSON.

    The random intercept is implied; ``random`` lists additional columns
    with random slopes.  Fixed effects are the intercept, the ``random``
    columns, the cluster-level ``subject`` columns and the ``within``
    columns, in that order.
    """

    family: str
    response: str
    cluster: str
    offset: str = None
    random: list = field(default_factory=list)
    subject: list = field(default_factory=list)
    within: list = field(default_factory=list)
    prior: dict = field(default_factory=dict)
    parametrization: str = "partial-fixed"
    options: dict = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        fam = Family.parse(self.family)
        self.family = fam.value
        self.parametrization = Parametrization.parse(self.parametrization).value
        for name in ("random", "subject", "within"):
            setattr(self, name, list(getattr(self, name) or []))
        if fam is Family.BERNOULLI and self.offset:
            raise ValidationError("an offset column is not allowed for the bernoulli family")
        cols = self.random + self.subject + self.within
        dup = sorted({c for c in cols if cols.count(c) > 1})
        if dup:
            raise ValidationError(f"columns listed more than once: {dup}")
        clash = {self.response, self.cluster} & set(cols)
        if clash:
            raise ValidationError(f"response/cluster columns used as covariates: {sorted(clash)}")
        bad = set(self.prior) - _PRIOR_KEYS
        if bad:
            raise ValidationError(f"unknown prior keys: {sorted(bad)}")
        bad = set(self.options) - _OPTION_KEYS
        if bad:
            raise ValidationError(f"unknown option keys: {sorted(bad)}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown model config keys: {sorted(extra)}")
        missing = {"family", "response", "cluster"} - set(d)
        if missing:
            raise ValidationError(f"model config is missing {sorted(missing)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def columns(self) -> list:
        cols = [self.cluster, self.response] + self.random + self.subject + self.within
        return cols + ([self.offset] if self.offset else [])

    @property
    def fixed_names(self) -> list:
        return ["(Intercept)"] + self.random + self.subject + self.within

    @property
    def random_names(self) -> list:
        return ["(Intercept)"] + self.random


def config_hash(config: ModelConfig) -> str:
    text = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _number(text, line, col):
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise ValidationError(f"line {line}: column '{col}' is not numeric: {text!r}") from None
    if not math.isfinite(v):
        raise ValidationError(f"line {line}: column '{col}' is not finite: {text!r}")
    return v


def ingest_csv(path, config: ModelConfig) -> Dataset:
    """Read one-row-per-observation CSV data into a validated Dataset.

    Clusters appear in order of first occurrence and rows keep file order
    within their cluster.  Errors report 1-based file line numbers (the
    header is line 1).
    """
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in config.columns if c not in header]
        if missing:
            raise ValidationError(f"{path}: missing column(s) {missing}; header is {header}")
        groups, lines = {}, {}
        for row in reader:
            line = reader.line_num
            cid = (row[config.cluster] or "").strip()
            if not cid:
                raise ValidationError(f"line {line}: empty cluster id")
            values = [_number(row[c], line, c) for c in config.columns[1:]]
            groups.setdefault(cid, []).append(values)
            lines.setdefault(cid, []).append(line)
    if not groups:
        raise ValidationError(f"{path}: no data rows")

    k_r, k_s = len(config.random), len(config.subject)
    clusters = []
    for cid, rows in groups.items():
        a = np.array(rows)
        y = a[:, 0]
        XR = np.column_stack([np.ones(len(a)), a[:, 1 : 1 + k_r]])
        G1 = a[:, 1 + k_r : 1 + k_r + k_s]
        XG2 = a[:, 1 + k_r + k_s : 1 + k_r + k_s + len(config.within)]
        if k_s:
            const = constant_within_clusters([G1])
            if not const.all():
                col = config.subject[int(np.flatnonzero(~const)[0])]
                j = int(np.flatnonzero(G1[:, ~const][:, 0] != G1[0, ~const][0])[0])
                raise ValidationError(
                    f"line {lines[cid][j]}: subject-level column '{col}' varies within cluster '{cid}'"
                )
        offset = a[:, -1] if config.offset else None
        clusters.append(ClusterData(y, XR, xg1=G1[0] if k_s else None, XG2=XG2, offset=offset))
    ds = Dataset(clusters, config.family, config.fixed_names, config.random_names, list(groups))
    try:
        validate_dataset(ds)
    except ValidationError as err:
        cid_list = list(groups)
        msgs = []
        for i, rows, reason in err.diagnostics:
            ln = [lines[cid_list[i]][j] for j in rows]
            msgs.append(f"cluster '{cid_list[i]}'" + (f" line(s) {ln}" if ln else "") + f": {reason}")
        raise ValidationError("invalid data:\n  " + "\n  ".join(msgs), diagnostics=err.diagnostics) from None
    return ds


def emit_csv(ds: Dataset, path, *, cluster="cluster", response="y", offset="offset") -> ModelConfig:
    """Write a Dataset as CSV and return the config that reads it back."""
    names = list(ds.fixed_names[1:])
    r, g1 = ds.r, ds.g1
    random, subject, within = names[: r - 1], names[r - 1 : r - 1 + g1], names[r - 1 + g1 :]
    with_offset = ds.family is Family.POISSON and any(np.any(c.offset != 1) for c in ds.clusters)
    header = [cluster, response] + names + ([offset] if with_offset else [])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for cid, c in zip(ds.cluster_ids, ds.clusters):
            for j in range(c.n_i):
                row = [cid, _fmt(c.y[j])] + [_fmt(v) for v in c.XR[j, 1:]] + [_fmt(v) for v in c.xg1]
                row += [_fmt(v) for v in c.XG2[j]]
                if with_offset:
                    row.append(_fmt(c.offset[j]))
                w.writerow(row)
    return ModelConfig(
        family=ds.family.value,
        response=response,
        cluster=cluster,
        offset=offset if with_offset else None,
        random=random,
        subject=subject,
        within=within,
    )


def _fmt(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


def build_prior(ds: Dataset, config: ModelConfig):
    """Default data-driven prior with any overrides from the config."""
    p = dict(config.prior)
    S = p.get("S")
    if S is not None:
        S = np.atleast_2d(np.asarray(S, dtype=float))
    return default_prior(
        ds,
        glm_irls(ds),
        sigma_beta_scale=float(p.get("sigma_beta_scale", 1000.0)),
        c=float(p.get("c", 1.0)),
        nu=p.get("nu"),
        S=S,
    )


def build_options(config: ModelConfig, **overrides) -> FitOptions:
    opts = dict(config.options)
    opts.update({k: v for k, v in overrides.items() if v is not None})
    return FitOptions(**opts)
