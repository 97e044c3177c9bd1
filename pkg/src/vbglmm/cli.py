"""Command-line interface: ``vbglmm fit | simulate | select``.

Exit codes: 0 converged, 2 stopped at the iteration limit, 1 error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ModelConfig, build_options, build_prior, config_hash, emit_csv, ingest_csv
from .engine import fit
from .errors import VbGlmmError
from .selection import DesignTag, SimDesign, format_table, model_probabilities, rows_to_csv, simulate_design

log = logging.getLogger("vbglmm")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2
WORKERS_ENV = "VBGLMM_WORKERS"


def _env_workers():
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return None
    try:
        k = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}") from None
    if k < 1:
        raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return k


def _clean(x):
    """JSON-safe floats (non-finite values become null)."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return float(x) if np.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def result_document(res, config: ModelConfig, options, ds, *, include_timing=True) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "vbglmm_version": __version__,
        "label": config.label,
        "config_hash": config_hash(config),
        "dataset_hash": res.dataset_hash,
        "seed": options.seed,
        "family": ds.family.value,
        "parametrization": res.parametrization.value,
        "n_clusters": ds.n,
        "n_observations": ds.n_obs,
        "converged": res.converged,
        "iterations": res.iterations,
        "tolerance": options.tolerance,
        "quad_points": options.quad_points,
        "elbo": res.elbo,
        "elbo_decreases": res.diagnostics.get("elbo_decreases", []),
        "fixed": res.posterior_summaries["fixed"],
        "random_sd": res.posterior_summaries["random_sd"],
        "D_mean": res.posterior_summaries["D_mean"],
        "D_sd": res.posterior_summaries["D_sd"],
    }
    if include_timing:
        doc["wall_time"] = res.wall_time
    return _clean(doc)


def _write_json(path: Path, doc):
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def _summary(res, ds) -> str:
    lines = [
        f"{ds.family.value} GLMM, {ds.n} clusters, {ds.n_obs} observations, {res.parametrization.value}",
        f"{'converged' if res.converged else 'NOT converged'} after {res.iterations} cycles; lower bound {res.elbo:.4f}",
        "",
    ]
    rows = [dict(parameter=r["name"], mean=r["mean"], sd=r["sd"]) for r in res.posterior_summaries["fixed"]]
    rows += [dict(parameter="sd " + r["name"], mean=r["mean"], sd=r["sd"]) for r in res.posterior_summaries["random_sd"]]
    lines.append(format_table(rows))
    return "\n".join(lines)


def cmd_fit(args) -> int:
    config = ModelConfig.load(args.model)
    if args.parametrization:
        config.parametrization = args.parametrization
    ds = ingest_csv(args.data, config)
    workers = _env_workers()
    options = build_options(
        config,
        tolerance=args.tol,
        max_iterations=args.max_iter,
        quad_points=args.quad_points,
        seed=args.seed,
        workers=workers,
        deterministic=True if args.deterministic else None,
    )
    prior = build_prior(ds, config)
    res = fit(ds, prior, config.parametrization, options, label=config.label)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "result.json", result_document(res, config, options, ds, include_timing=not options.deterministic))
    with open(out / "elbo_trace.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "elbo"])
        for k, v in enumerate(res.elbo_trace, 1):
            w.writerow([k, repr(float(v))])
    print(_summary(res, ds))
    if not res.converged:
        log.warning("stopped at the iteration limit (%d) without converging", options.max_iterations)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_simulate(args) -> int:
    design = SimDesign(DesignTag(args.design), replicates=args.replicates, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(design.replicates)))
    manifest = []
    config = None
    for k, ds in enumerate(simulate_design(design), 1):
        name = f"replicate_{k:0{width}d}.csv"
        config = emit_csv(ds, out / name)
        manifest.append({"replicate": k, "file": name, "rows": ds.n_obs, "clusters": ds.n})
    config.label = design.tag.value
    _write_json(out / "model.json", config.to_dict())
    (out / "manifest.csv").write_text(rows_to_csv(manifest), encoding="utf-8")
    meta = {"design": design.tag.value, "replicates": design.replicates, "seed": design.seed, "truth": design.truth}
    _write_json(out / "design.json", meta)
    print(f"wrote {design.replicates} {design.tag.value} replicates to {out}")
    return EXIT_OK


def cmd_select(args) -> int:
    with open(args.models, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list) or len(raw) < 2:
        raise VbGlmmError("--models must hold a JSON list of at least two model configs")
    configs = [ModelConfig.from_dict(d) for d in raw]
    workers = _env_workers()
    rows, elbos, hashes = [], [], set()
    any_failed = False
    for k, config in enumerate(configs):
        label = config.label or f"model{k + 1}"
        try:
            ds = ingest_csv(args.data, config)
            res = fit(ds, build_prior(ds, config), config.parametrization, build_options(config, workers=workers), label=label)
        except (VbGlmmError, ValueError, FloatingPointError) as err:
            log.error("model %s failed: %s", label, err)
            rows.append({"model": label, "elbo": float("nan"), "converged": "failed"})
            elbos.append(float("nan"))
            any_failed = True
            continue
        hashes.add(res.dataset_hash)
        rows.append({"model": label, "elbo": res.elbo, "converged": str(res.converged).lower()})
        elbos.append(res.elbo)
        any_failed |= not res.converged
    if len(hashes) > 1:
        raise VbGlmmError("models read different responses or offsets; bounds are not comparable")
    for row, p in zip(rows, model_probabilities(elbos)):
        row["probability"] = float(p)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    columns = ["model", "elbo", "converged", "probability"]
    (out / "selection.csv").write_text(rows_to_csv(rows, columns), encoding="utf-8")
    ranked = sorted(rows, key=lambda r: -r["elbo"] if np.isfinite(r["elbo"]) else np.inf)
    print(format_table(ranked, columns))
    print("\nranking: " + " > ".join(r["model"] for r in ranked if np.isfinite(r["elbo"])))
    return EXIT_NOT_CONVERGED if any_failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vbglmm", description="Variational Bayes for Poisson and logistic GLMMs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on standard error")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one model")
    p.add_argument("--data", required=True, help="CSV data, one row per observation")
    p.add_argument("--model", required=True, help="JSON model config")
    p.add_argument(
        "--parametrization",
        choices=["centered", "noncentered", "partial-fixed", "partial-adaptive"],
        help="overrides the config value",
    )
    p.add_argument("--tol", type=float, help="relative lower-bound tolerance (default 1e-6)")
    p.add_argument("--max-iter", type=int, help="maximum cycles (default 500)")
    p.add_argument("--quad-points", type=int, help="adaptive Gauss-Hermite points (default 10)")
    p.add_argument("--seed", type=int, help="seed recorded with the run")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, timing omitted from result.json")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="write replicate datasets for a simulation design")
    p.add_argument("--design", required=True, choices=[t.value for t in DesignTag])
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("select", help="fit competing models and compare lower bounds")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True, help="JSON list of model configs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="vbglmm: %(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (VbGlmmError, ValueError, OSError, json.JSONDecodeError) as err:
        print(f"vbglmm: error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
