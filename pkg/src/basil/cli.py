"""
Command-line front end.

Subcommands: select-k, fit, sample, simulate, study, loglik. Every run writes
``resolved-config.json`` into its output directory; ``basil --config FILE``
repeats the job it describes. Exit codes: 0 success, 2 usage or validation
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import BasilError, NumericalError, ParseError, ValidationError
from .genesets import align_genes, filter_gene_sets, load_gene_sets, write_gene_sets
from .matrixcore import DataMatrix, standardize_columns
from .posterior import (
    FitConfig,
    PosteriorDraws,
    correlation_intervals,
    covariance_posterior_mean,
    fit,
    load_fit,
    sample_posterior,
    save_fit,
)
from .selection import select_k
from .simbench import (
    ESTIMATORS,
    PRESETS,
    SimulationDesign,
    generate_random_genesets,
    generate_synthetic,
    oos_loglik,
    run_replication_study,
    run_split_study,
    sample_from_truth,
)

log = logging.getLogger("basil")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3
FLOAT_FORMAT = "%.17g"
# options that never change numerical output and stay out of resolved-config.json
_NOT_RESOLVED = {"output_dir", "log_level", "config", "handler"}
_PATH_OPTIONS = {"expression", "genesets", "fit_dir", "test", "genes_file"}


class UsageError(ValidationError):
    pass


# ---------------------------------------------------------------------------
# file I/O


def read_expression(path) -> DataMatrix:
    """Samples in rows, genes in columns, header of gene ids.

    A first column whose header is empty, or whose values are not all numeric,
    is taken as sample ids.
    """
    path = str(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as exc:
        raise ParseError(str(exc).strip(), path=path) from None
    except (FileNotFoundError, IsADirectoryError) as exc:
        raise ValidationError(f"{path}: {exc.strerror}") from None
    except pd.errors.EmptyDataError:
        raise ParseError("file is empty", path=path) from None
    if frame.shape[1] == 0:
        raise ParseError("no columns", path=path)

    sample_ids = None
    first = frame.columns[0]
    first_numeric = pd.to_numeric(frame[first], errors="coerce").notna().all()
    if str(first).startswith("Unnamed:") or str(first) == "" or not first_numeric:
        sample_ids = tuple(frame[first])
        frame = frame.drop(columns=first)
        offset = 2
    else:
        offset = 1
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().to_numpy() | ~np.isfinite(numeric.to_numpy(dtype=float, na_value=np.nan))
    if bad.any():
        i, j = map(int, np.argwhere(bad)[0])
        raise ParseError(
            f"non-numeric value {frame.iat[i, j]!r} for gene {frame.columns[j]!r}",
            path=path,
            line=i + 2,
            column=j + offset,
        )
    return DataMatrix(numeric.to_numpy(dtype=float), tuple(frame.columns), sample_ids=sample_ids)


def write_expression(Y: DataMatrix, path):
    frame = pd.DataFrame(Y.values, columns=list(Y.gene_ids))
    if Y.sample_ids is not None:
        frame.insert(0, "sample", list(Y.sample_ids))
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def _write_matrix(array, index, columns, path, index_label="gene"):
    frame = pd.DataFrame(array, index=list(index), columns=list(columns))
    frame.to_csv(path, index_label=index_label, float_format=FLOAT_FORMAT)


def _write_json(payload, path):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _factor_names(k):
    return [f"factor{j + 1}" for j in range(k)]


# ---------------------------------------------------------------------------
# shared pipeline pieces


def _load_inputs(args):
    Y = read_expression(args.expression)
    C = load_gene_sets(args.genesets)
    Y, C = align_genes(Y, C, policy=args.gene_policy)
    min_genes = 10 if args.min_genes is None else args.min_genes
    C, report = filter_gene_sets(C, min_genes, args.drop_unannotated)
    if report.n_removed_sets or report.n_removed_genes:
        log.info(
            "filtered %d gene sets below %d genes and %d unannotated genes",
            report.n_removed_sets, min_genes, report.n_removed_genes,
        )
    if C.gene_ids != Y.gene_ids:
        Y = Y.select_genes(C.gene_ids)
    return Y, C


def _fit_config(args):
    return FitConfig(
        k=args.k,
        k_max=args.k_max,
        standardize=args.standardize,
        pair_budget=args.pair_budget,
        seed=args.seed,
        tau_gamma_sq=args.tau_gamma_sq,
        tau_psi_sq=args.tau_psi_sq,
        rho=args.rho,
        noise_dof=args.noise_dof,
    )


def _subset_genes(args, result):
    if args.genes_file:
        genes = [line.strip() for line in Path(args.genes_file).read_text().splitlines() if line.strip()]
    elif args.genes:
        genes = [g.strip() for g in args.genes.split(",") if g.strip()]
    else:
        genes = list(result.gene_ids[: min(args.n_genes, result.p)])
    return genes


# ---------------------------------------------------------------------------
# commands


def cmd_select_k(args, out: Path):
    Y = read_expression(args.expression)
    if args.standardize:
        Y = standardize_columns(Y)
    profile = select_k(Y.values, args.k_max)
    frame = pd.DataFrame(
        {
            "k": profile.k_values,
            "jic": profile.jic,
            "loglik_hat": profile.loglik_hat,
            "penalty": profile.penalty,
        }
    )
    frame.to_csv(out / "jic_profile.csv", index=False, float_format=FLOAT_FORMAT)
    _write_json({"k_selected": int(profile.k_selected)}, out / "select_k.json")
    print(profile.k_selected)


def cmd_fit(args, out: Path):
    if args.k is not None and args.k_max is not None:
        raise UsageError("give either --k or --k-max, not both")
    Y, C = _load_inputs(args)
    result = fit(Y, C, _fit_config(args))
    names = _factor_names(result.k)
    _write_matrix(result.lambda_bar, result.gene_ids, names, out / "lambda_bar.csv")
    _write_matrix(result.gamma_bar, result.set_ids, names, out / "gamma_bar.csv", index_label="gene_set")
    _write_matrix(result.psi_bar, result.gene_ids, names, out / "psi_bar.csv")
    save_fit(result, out / "fit.npz")
    h = result.hyper
    diag = result.diagnostics
    summary = {
        "k": result.k,
        "n": result.n,
        "p": result.p,
        "q": result.q,
        "r": result.r,
        "tau_gamma_sq": h.tau_gamma_sq,
        "tau_psi_sq": h.tau_psi_sq,
        "tau_ratio": h.tau_gamma_sq / h.tau_psi_sq if h.tau_psi_sq > 0 else None,
        "sigma_hat_sq": h.sigma_hat_sq,
        "rho": h.rho,
        "v_n": result.v_n,
        "sigma_n_sq": result.sigma_n_sq,
        "standardized": result.standardized,
        "max_abs_Ct_psi": diag["max_abs_Ct_psi"],
        "max_abs_decomposition": diag["max_abs_decomposition"],
        "jic": None if result.jic is None else dict(
            k_values=result.jic.k_values.tolist(), jic=result.jic.jic.tolist()
        ),
    }
    _write_json(summary, out / "fit.json")
    _write_json(result.timings, out / "timings.json")
    print(f"k={result.k} tau_gamma_sq={h.tau_gamma_sq:.6g} tau_psi_sq={h.tau_psi_sq:.6g} rho={h.rho:.6g}")


def cmd_sample(args, out: Path):
    if args.n_draws < 1:
        raise UsageError("--n-draws must be a positive integer")
    result = load_fit(Path(args.fit_dir) / "fit.npz")
    draws = sample_posterior(
        result, args.n_draws, seed=args.seed, coverage_corrected=not args.no_coverage_correction
    )
    np.save(out / "sigma_sq.npy", draws.sigma_sq)
    _write_json(
        {
            "fit": str(Path(args.fit_dir).resolve() / "fit.npz"),
            "n_draws": draws.n_draws,
            "seed": draws.seed,
            "coverage_corrected": draws.coverage_corrected,
            "sigma_sq": "sigma_sq.npy",
            "noise_stream": "SeedSequence(seed, spawn_key=(draw,))",
        },
        out / "draws.json",
    )
    genes = _subset_genes(args, result)
    summary = correlation_intervals(draws, genes, level=args.level, threads=args.threads)
    iu = np.triu_indices(len(summary.gene_ids), 1)
    ids = np.asarray(summary.gene_ids)
    pd.DataFrame(
        {
            "gene_a": ids[iu[0]],
            "gene_b": ids[iu[1]],
            "mean": summary.mean[iu],
            "lo": summary.lower[iu],
            "hi": summary.upper[iu],
            "masked": summary.masked[iu],
        }
    ).to_csv(out / "correlation.csv", index=False, float_format=FLOAT_FORMAT)
    if args.densify:
        rows = result.gene_index(genes)
        _densify(draws, rows, out / "lambda_draws.csv")
    print(f"masked fraction {summary.masked_fraction():.4f} over {len(iu[0])} pairs")


def _densify(draws: PosteriorDraws, rows, path):
    fit_ = draws.fit
    names = _factor_names(fit_.k)
    genes = [fit_.gene_ids[i] for i in rows]
    with open(path, "w") as fh:
        fh.write(",".join(["draw", "gene", "sigma_sq", *names]) + "\n")
        for s, (sigma_sq, lam) in enumerate(draws.iter_lambda(rows)):
            frame = pd.DataFrame(lam, columns=names)
            frame.insert(0, "sigma_sq", sigma_sq)
            frame.insert(0, "gene", genes)
            frame.insert(0, "draw", s)
            frame.to_csv(fh, header=False, index=False, float_format=FLOAT_FORMAT)


def _design(args):
    if args.preset is not None and args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; valid presets: {', '.join(sorted(PRESETS))}")
    values = dict(PRESETS.get(args.preset, {}))
    for key in ("n", "p", "k", "q", "tau_gamma_sq", "tau_psi_sq", "sigma_sq", "density", "min_genes"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    if getattr(args, "replications", None) is not None:
        values["n_replications"] = args.replications
    return SimulationDesign(**values, seed=args.seed)


def cmd_simulate(args, out: Path):
    design = _design(args)
    C = generate_random_genesets(design.p, design.q, design.density, design.min_genes, seed=design.seed)
    Y, truth = generate_synthetic(design, C, seed=design.seed + 1)
    write_expression(Y, out / "expression.csv")
    write_gene_sets(C, out / "genesets.csv")
    _write_matrix(truth.lambda0, C.gene_ids, _factor_names(design.k), out / "truth_lambda.csv")
    if args.n_test:
        write_expression(sample_from_truth(truth, args.n_test, seed=design.seed + 2, gene_ids=Y.gene_ids),
                         out / "test.csv")
    _write_json({key: getattr(design, key) for key in design.__dataclass_fields__}, out / "design.json")
    print(f"wrote {design.n}x{design.p} expression and {design.q} gene sets to {out}")


def cmd_study(args, out: Path):
    estimators = tuple(e.strip() for e in args.estimators.split(","))
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise UsageError(f"unknown estimators {sorted(unknown)}; choose from {', '.join(ESTIMATORS)}")
    if args.expression:
        Y, C = _load_inputs(args)
        report = run_split_study(Y, C, estimators, n_splits=args.splits, seed=args.seed,
                                 standardize=args.standardize)
    else:
        design = _design(args)
        report = run_replication_study(
            design, estimators, k_max=args.k_max or 30, n_draws=args.n_draws, level=args.level,
            submatrix_size=args.submatrix_size, threads=args.threads,
        )
    report.write_csv(out / "study.csv")
    report.write_json(out / "study.json", include_timings=False)
    _write_json(report.timings, out / "timings.json")
    for est, metrics in report.summary().items():
        text = " ".join(f"{m}={v['mean']:.6g}" for m, v in sorted(metrics.items()))
        print(f"{est}: {text}")
    if report.failures:
        print(f"{len(report.failures)} replications failed", file=sys.stderr)


def cmd_loglik(args, out: Path):
    result = load_fit(Path(args.fit_dir) / "fit.npz")
    test = read_expression(args.test)
    if test.n_genes != result.p:
        raise ValidationError(
            f"{args.test}: test data has {test.n_genes} genes, the fit has {result.p}"
        )
    if set(test.gene_ids) == set(result.gene_ids):
        test = test.select_genes(result.gene_ids)
    else:
        raise ValidationError(f"{args.test}: gene ids differ from the fitted genes")
    values = test.values
    if result.standardized:
        values = (values - result.column_means) / result.column_sds
    value = oos_loglik(covariance_posterior_mean(result), values)
    _write_json({"oos_loglik": value, "n_test": int(values.shape[0])}, out / "loglik.json")
    print(repr(value))


# ---------------------------------------------------------------------------
# argument parsing


def _add_fit_options(p):
    p.add_argument("--k", type=int, help="fixed number of factors (skips JIC)")
    p.add_argument("--k-max", type=int, help="largest k tried by JIC (default: 80%% variance rule)")
    p.add_argument("--min-genes", type=int, default=10, help="drop gene sets with fewer genes")
    p.add_argument("--drop-unannotated", action="store_true", help="drop genes in no gene set")
    p.add_argument("--gene-policy", choices=("intersect", "require-superset"), default="intersect")
    p.add_argument("--standardize", action=argparse.BooleanOptionalAction, default=False,
                   help="center and scale genes before fitting")
    p.add_argument("--pair-budget", type=int, default=100_000, help="gene pairs used for rho")
    p.add_argument("--tau-gamma-sq", type=float, help="override the estimated structured prior variance")
    p.add_argument("--tau-psi-sq", type=float, help="override the estimated residual prior variance")
    p.add_argument("--rho", type=float, help="override the coverage correction factor")
    p.add_argument("--noise-dof", choices=("entries", "samples"), default="entries")


def _add_design_options(p):
    p.add_argument("--preset", help=f"one of: {', '.join(sorted(PRESETS))}")
    for name, typ in (("n", int), ("p", int), ("k", int), ("q", int), ("tau-gamma-sq", float),
                      ("tau-psi-sq", float), ("sigma-sq", float), ("density", float), ("min-genes", int)):
        p.add_argument(f"--{name}", type=typ)


def build_parser():
    parser = argparse.ArgumentParser(prog="basil", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=f"basil {__version__}")
    parser.add_argument("--config", help="re-run the job in a resolved-config.json")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $BASIL_THREADS or 1)")
    parser.add_argument("--output-dir", default=".", help="directory for all artifacts")
    parser.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("select-k", help="choose the number of factors by JIC")
    p.add_argument("expression")
    p.add_argument("--k-max", type=int)
    p.add_argument("--standardize", action=argparse.BooleanOptionalAction, default=False)
    p.set_defaults(handler=cmd_select_k)

    p = sub.add_parser("fit", help="estimate loadings and hyperparameters")
    p.add_argument("expression")
    p.add_argument("genesets")
    _add_fit_options(p)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("sample", help="posterior draws and correlation intervals")
    p.add_argument("fit_dir", help="output directory of a previous fit")
    p.add_argument("--n-draws", type=int, default=2000)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--genes", help="comma-separated gene ids for the correlation summary")
    p.add_argument("--genes-file", help="file with one gene id per line")
    p.add_argument("--n-genes", type=int, default=100, help="first N genes when no list is given")
    p.add_argument("--no-coverage-correction", action="store_true")
    p.add_argument("--densify", action="store_true", help="also export every draw as CSV")
    p.set_defaults(handler=cmd_sample)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    _add_design_options(p)
    p.add_argument("--n-test", type=int, default=0, help="extra held-out samples")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("study", help="replication study or train/test splits")
    _add_design_options(p)
    p.add_argument("--replications", type=int)
    p.add_argument("--estimators", default=",".join(ESTIMATORS))
    p.add_argument("--k-max", type=int)
    p.add_argument("--n-draws", type=int, default=2000)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--submatrix-size", type=int, default=200)
    p.add_argument("--expression", help="real data: run train/test splits instead")
    p.add_argument("--genesets")
    p.add_argument("--splits", type=int, default=50)
    p.add_argument("--gene-policy", choices=("intersect", "require-superset"), default="intersect")
    p.add_argument("--drop-unannotated", action="store_true")
    p.add_argument("--standardize", action=argparse.BooleanOptionalAction, default=True,
                   help="standardize each training split (real-data mode only)")
    p.set_defaults(handler=cmd_study)

    p = sub.add_parser("loglik", help="held-out log-likelihood under a fit")
    p.add_argument("fit_dir")
    p.add_argument("test")
    p.set_defaults(handler=cmd_loglik)
    return parser


HANDLERS = {
    "select-k": cmd_select_k,
    "fit": cmd_fit,
    "sample": cmd_sample,
    "simulate": cmd_simulate,
    "study": cmd_study,
    "loglik": cmd_loglik,
}


def resolve_args(parser, argv):
    """Parse ``argv``; with --config, start from the stored job instead."""
    args = parser.parse_args(argv)
    if args.config:
        stored = json.loads(Path(args.config).read_text())
        command = stored.pop("command")
        if args.command not in (None, command):
            parser.error(f"--config describes '{command}', not '{args.command}'")
        base = vars(parser.parse_args([command, *_positional_stub(parser, command)]))
        base.update(stored)
        base.update(output_dir=args.output_dir, log_level=args.log_level, config=args.config,
                    command=command)
        args = argparse.Namespace(**base)
    elif args.command is None:
        parser.error("a subcommand is required (or --config)")
    args.handler = HANDLERS[args.command]
    if args.threads is None:
        env = os.environ.get("BASIL_THREADS")
        try:
            args.threads = int(env) if env else 1
        except ValueError:
            parser.error(f"BASIL_THREADS must be an integer, got {env!r}")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    return args


def _positional_stub(parser, command):
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return ["_" for a in sub.choices[command]._actions if not a.option_strings]


def resolved_config(args):
    cfg = {}
    for key, value in sorted(vars(args).items()):
        if key in _NOT_RESOLVED:
            continue
        if key in _PATH_OPTIONS and value is not None:
            value = str(Path(value).resolve())
        cfg[key] = value
    return cfg


def _blas_threads(requested):
    # OpenBLAS sizes its buffers for the CPUs visible at import; asking for
    # more threads than that can crash inside LAPACK
    try:
        available = len(os.sched_getaffinity(0))
    except AttributeError:
        available = os.cpu_count() or 1
    return max(1, min(int(requested), available))


def main(argv=None):
    parser = build_parser()
    try:
        args = resolve_args(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(resolved_config(args), out / "resolved-config.json")
        t0 = time.perf_counter()
        with threadpool_limits(limits=_blas_threads(args.threads)):
            args.handler(args, out)
        log.info("%s finished in %.2fs", args.command, time.perf_counter() - t0)
    except NumericalError as exc:
        print(f"basil {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (BasilError, ValueError, OSError) as exc:
        print(f"basil {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
