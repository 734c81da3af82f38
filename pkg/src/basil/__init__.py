"""Pathway-informed Bayesian factor models for gene expression covariance."""

from .covariance import LowRankCovariance
from .ebayes import Hyperparameters, rho_hat, rho_report, sigma_hat, tau_hats
from . import errors
from .errors import *  # noqa: F401,F403
from .genesets import (
    FilterReport,
    GeneSetMatrix,
    align_genes,
    filter_gene_sets,
    load_gene_sets,
    write_gene_sets,
)
from .matrixcore import (
    DataMatrix,
    SpectralDecomposition,
    SubspaceBasis,
    column_space_basis,
    pca_factor_estimate,
    project_onto,
    standardize_columns,
    truncated_svd,
)
from .posterior import (
    CorrelationSummary,
    FactorModelFit,
    FitConfig,
    PosteriorDraws,
    check_invariants,
    correlation_intervals,
    covariance_posterior_mean,
    fit,
    latent_factor_posterior,
    latent_factor_posterior_mean_mc,
    sample_posterior,
)
from .selection import JicProfile, jic_penalty, select_k, spectral_loglik
from .simbench import (
    ESTIMATORS,
    PRESETS,
    SimulationDesign,
    StudyReport,
    SyntheticTruth,
    coverage_rate,
    diagonal_baseline,
    generate_random_genesets,
    generate_synthetic,
    interval_coverage,
    oos_loglik,
    preset,
    relative_frobenius_error,
    run_replication_study,
    run_split_study,
    sample_from_truth,
    spectral_baseline,
)

__version__ = "0.1.0"

__all__ = [
    "FilterReport",
    "GeneSetMatrix",
    "align_genes",
    "filter_gene_sets",
    "load_gene_sets",
    "write_gene_sets",
    "DataMatrix",
    "SpectralDecomposition",
    "SubspaceBasis",
    "column_space_basis",
    "pca_factor_estimate",
    "project_onto",
    "standardize_columns",
    "truncated_svd",
    "CorrelationSummary",
    "FactorModelFit",
    "FitConfig",
    "PosteriorDraws",
    "check_invariants",
    "correlation_intervals",
    "covariance_posterior_mean",
    "fit",
    "latent_factor_posterior",
    "latent_factor_posterior_mean_mc",
    "sample_posterior",
    "SimulationDesign",
    "StudyReport",
    "SyntheticTruth",
    "coverage_rate",
    "generate_random_genesets",
    "generate_synthetic",
    "oos_loglik",
    "preset",
    "relative_frobenius_error",
    "run_replication_study",
    "run_split_study",
    "spectral_baseline",
    "sample_from_truth",
    "interval_coverage",
    "diagonal_baseline",
    "PRESETS",
    "ESTIMATORS",
    "LowRankCovariance",
    "Hyperparameters",
    "rho_hat",
    "rho_report",
    "sigma_hat",
    "tau_hats",
    "JicProfile",
    "jic_penalty",
    "select_k",
    "spectral_loglik",
] + errors.__all__
