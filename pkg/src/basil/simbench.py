"""
Synthetic data from the structured factor model, accuracy / coverage metrics,
out-of-sample log-likelihood and a replication-study driver that writes a
long-format CSV plus a JSON summary.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .covariance import LowRankCovariance
from .errors import (
    DimensionMismatch,
    InfeasibleDensity,
    InsufficientDraws,
    ValidationError,
    ZeroTruth,
)
from .genesets import GeneSetMatrix
from .matrixcore import (
    DataMatrix,
    column_space_basis,
    project_onto,
    standardize_columns,
    truncated_svd,
)
from .posterior import FitConfig, PosteriorDraws, covariance_posterior_mean, fit, sample_posterior
from .selection import default_k_max, select_k

log = logging.getLogger(__name__)

ESTIMATORS = ("basil", "spectral", "diagonal")


@dataclass(frozen=True)
class SimulationDesign:
    n: int = 500
    p: int = 1000
    k: int = 10
    q: int = 100
    tau_gamma_sq: float = 0.7
    tau_psi_sq: float = 0.1
    sigma_sq: float = 15.0
    density: float = 0.05
    min_genes: int = 10
    n_replications: int = 25
    seed: int = 0

    def __post_init__(self):
        if not self.sigma_sq > 0:
            raise ValidationError("sigma_sq must be positive")
        if self.tau_gamma_sq < 0 or self.tau_psi_sq < 0:
            raise ValidationError("prior variances must be nonnegative")
        if not 1 <= self.k < min(self.n, self.p):
            raise ValidationError(f"need 1 <= k < min(n, p), got k={self.k}")
        if not 1 <= self.q < self.p:
            raise ValidationError(f"need 1 <= q < p, got q={self.q}")


PRESETS = {
    "high-signal": dict(n=500, p=1000, k=10, q=100, tau_gamma_sq=0.7, tau_psi_sq=0.1, sigma_sq=15.0),
    "low-signal": dict(n=500, p=1000, k=10, q=100, tau_gamma_sq=0.4, tau_psi_sq=0.7, sigma_sq=15.0),
}


def preset(name, **overrides) -> SimulationDesign:
    try:
        values = PRESETS[name]
    except KeyError:
        raise ValidationError(
            f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}"
        ) from None
    return SimulationDesign(**{**values, **overrides})


@dataclass(frozen=True)
class SyntheticTruth:
    lambda0: np.ndarray
    gamma0: np.ndarray
    psi0: np.ndarray
    m0: np.ndarray
    sigma0_sq: float

    def covariance(self):
        return LowRankCovariance(self.lambda0, self.sigma0_sq)


def generate_random_genesets(p, q, density=0.05, min_genes=10, seed=0) -> GeneSetMatrix:
    """Bernoulli(density) membership, each column redrawn until it has ``min_genes`` members."""
    if not 0 < density <= 1:
        raise ValidationError("density must be in (0, 1]")
    if density * p < min_genes / 3:
        raise InfeasibleDensity(
            f"expected set size {density * p:.1f} is far below min_genes={min_genes}"
        )
    if min_genes > p:
        raise InfeasibleDensity(f"min_genes={min_genes} exceeds p={p}")
    rng = np.random.default_rng(seed)
    membership = np.zeros((p, q))
    for j in range(q):
        while True:
            col = rng.random(p) < density
            if col.sum() >= min_genes:
                break
        membership[:, j] = col
    width = len(str(p - 1))
    gene_ids = [f"g{j:0{width}d}" for j in range(p)]
    set_ids = [f"set{l:0{len(str(q - 1))}d}" for l in range(q)]
    return GeneSetMatrix(membership, tuple(gene_ids), tuple(set_ids))


def generate_synthetic(design: SimulationDesign, C, seed=None):
    """Draw (Y, truth) with Lambda0 = C Gamma0 + Psi0 and Psi0 orthogonal to span(C).

    Gamma0 and the pre-projection Psi0 have iid N(0, tau^2 sigma^2) entries;
    factors are standard normal and the noise is N(0, sigma^2).
    """
    seed = design.seed if seed is None else seed
    membership = getattr(C, "membership", C)
    membership = np.asarray(membership, dtype=float)
    p, q = membership.shape
    if p != design.p:
        raise DimensionMismatch(f"gene-set matrix has {p} genes, design asks for {design.p}")
    rng = np.random.default_rng(seed)
    s2 = design.sigma_sq
    gamma0 = rng.standard_normal((q, design.k)) * math.sqrt(design.tau_gamma_sq * s2)
    g = rng.standard_normal((p, design.k)) * math.sqrt(design.tau_psi_sq * s2)
    psi0 = project_onto(column_space_basis(membership), g, complement=True)
    lambda0 = membership @ gamma0 + psi0
    m0 = rng.standard_normal((design.n, design.k))
    noise = rng.standard_normal((design.n, p)) * math.sqrt(s2)
    values = m0 @ lambda0.T + noise
    gene_ids = getattr(C, "gene_ids", None) or tuple(f"g{j}" for j in range(p))
    truth = SyntheticTruth(lambda0, gamma0, psi0, m0, s2)
    return DataMatrix(values, gene_ids), truth


def sample_from_truth(truth: SyntheticTruth, n, seed=0, gene_ids=None):
    """Fresh samples from N(0, Lambda0 Lambda0^T + sigma^2 I)."""
    rng = np.random.default_rng(seed)
    p, k = truth.lambda0.shape
    values = rng.standard_normal((n, k)) @ truth.lambda0.T + rng.standard_normal((n, p)) * math.sqrt(
        truth.sigma0_sq
    )
    gene_ids = gene_ids or tuple(f"g{j}" for j in range(p))
    return DataMatrix(values, gene_ids)


def _loadings(x):
    if isinstance(x, SyntheticTruth):
        return x.lambda0
    if isinstance(x, LowRankCovariance):
        return x.loadings * np.sqrt(np.clip(x.weights, 0, None))
    return np.asarray(x, dtype=float)


def relative_frobenius_error(estimate, truth) -> float:
    """||A A^T - B B^T||_F / ||B B^T||_F through k x k Gram matrices."""
    A = _loadings(estimate)
    B = _loadings(truth)
    if A.shape[0] != B.shape[0]:
        raise DimensionMismatch(f"estimate has {A.shape[0]} rows, truth {B.shape[0]}")
    bb = float(np.sum((B.T @ B) ** 2))
    if bb == 0:
        raise ZeroTruth("true loadings are zero")
    aa = float(np.sum((A.T @ A) ** 2))
    ab = float(np.sum((A.T @ B) ** 2))
    return math.sqrt(max(aa - 2 * ab + bb, 0.0) / bb)


def interval_coverage(samples, target, level, weights=None) -> float:
    """Fraction of targets inside the equal-tailed ``level`` interval of ``samples``.

    ``samples`` has draws along axis 0. A level of 0 gives empty intervals.
    """
    samples = np.asarray(samples, dtype=float)
    target = np.asarray(target, dtype=float)
    if not 0 <= level < 1:
        raise ValidationError(f"level must be in [0, 1), got {level}")
    if level == 0:
        return 0.0
    lo, hi = np.quantile(samples, [(1 - level) / 2, 1 - (1 - level) / 2], axis=0)
    inside = (lo <= target) & (target <= hi)
    if weights is None:
        return float(np.mean(inside))
    return float(np.sum(inside * weights) / np.sum(weights))


def coverage_rate(
    draws: PosteriorDraws, truth, submatrix_size=200, level=0.95, seed=0, threads=1
) -> float:
    """Coverage of the entries of Lambda0 Lambda0^T on a random gene subset.

    Every entry of the symmetric submatrix counts once, so off-diagonal pairs
    are weighted twice relative to the diagonal.
    """
    if draws.n_draws < 100:
        raise InsufficientDraws(f"{draws.n_draws} draws; at least 100 needed")
    lam0 = _loadings(truth)
    p = lam0.shape[0]
    if submatrix_size > p:
        raise ValidationError(f"submatrix_size={submatrix_size} exceeds p={p}")
    rng = np.random.default_rng(seed)
    rows = np.sort(rng.choice(p, size=submatrix_size, replace=False))
    lam = draws.lambda_array(rows, threads)
    target = lam0[rows] @ lam0[rows].T
    m = submatrix_size
    covered, total = 0.0, 0.0
    block = max(1, int(4_000_000 // max(1, draws.n_draws * m)))
    for start in range(0, m, block):
        stop = min(m, start + block)
        # upper triangle only: columns from ``start`` on, off-diagonal weight 2
        prod = np.matmul(lam[:, start:stop], lam[:, start:].transpose(0, 2, 1))
        i = np.arange(start, stop)[:, None]
        j = np.arange(start, m)[None, :]
        w = np.where(j > i, 2.0, np.where(j == i, 1.0, 0.0))
        frac = interval_coverage(prod, target[start:stop, start:], level, weights=w)
        covered += frac * w.sum()
        total += w.sum()
    return covered / total


def oos_loglik(cov: LowRankCovariance, Y_test) -> float:
    """Gaussian log-likelihood of held-out rows, log-det and quadratic form via Woodbury."""
    values = Y_test.values if isinstance(Y_test, DataMatrix) else np.asarray(Y_test, dtype=float)
    values = np.atleast_2d(values)
    if values.shape[1] != cov.dim:
        raise DimensionMismatch(f"test data has {values.shape[1]} genes, covariance has {cov.dim}")
    return cov.loglik(values)


# ---------------------------------------------------------------------------
# comparator estimators


def spectral_baseline(Y, k):
    """Lambda_hat = V D / sqrt(n) with the residual-variance estimate as noise."""
    values = getattr(Y, "values", Y)
    n, p = values.shape
    svd = truncated_svd(values, k)
    lam = svd.right * svd.singular_values / math.sqrt(n)
    s2 = svd.residual_sq_norm(k) / ((n - k) * p)
    return LowRankCovariance(lam, s2)


def diagonal_baseline(Y):
    values = getattr(Y, "values", Y)
    var = values.var(axis=0, ddof=1)
    return LowRankCovariance(np.zeros((values.shape[1], 0)), var)


# ---------------------------------------------------------------------------
# replication study


@dataclass
class StudyReport:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    design: dict = field(default_factory=dict)

    def add(self, replication, estimator, metric, value):
        self.rows.append((int(replication), estimator, metric, float(value)))

    def values(self, estimator, metric):
        return np.array([v for _, e, m, v in self.rows if e == estimator and m == metric])

    def summary(self):
        groups = {}
        for _, est, metric, value in self.rows:
            groups.setdefault(est, {}).setdefault(metric, []).append(value)
        out = {}
        for est, metrics in groups.items():
            out[est] = {}
            for metric, vals in metrics.items():
                arr = np.asarray(vals)
                se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
                out[est][metric] = {"mean": float(arr.mean()), "se": se, "n": int(arr.size)}
        return out

    def write_csv(self, path):
        rows = sorted(self.rows, key=lambda r: (r[0], r[1], r[2]))
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["replication", "estimator", "metric", "value"])
            for rep, est, metric, value in rows:
                writer.writerow([rep, est, metric, format(value, ".17g")])

    def write_json(self, path, include_timings=True):
        payload = {
            "design": self.design,
            "summary": self.summary(),
            "failures": self.failures,
        }
        if include_timings:
            payload["timings"] = self.timings
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)


def _check_estimators(estimators):
    unknown = [e for e in estimators if e not in ESTIMATORS]
    if unknown:
        raise ValidationError(f"unknown estimators {unknown}; choose from {', '.join(ESTIMATORS)}")


def _replication_seeds(seed, replication):
    ss = np.random.SeedSequence(seed, spawn_key=(int(replication),))
    return [int(x) for x in ss.generate_state(4, dtype=np.uint32)]


def _evaluate(report, rep, Y_train, Y_test, C, estimators, truth, k_max, n_draws, level,
              submatrix_size, seeds, threads):
    for est in estimators:
        t0 = time.perf_counter()
        if est == "basil":
            result = fit(Y_train, C, FitConfig(k_max=k_max, seed=seeds[2]))
            cov = covariance_posterior_mean(result)
            k_sel = result.k
            lam = result.lambda_bar
        elif est == "spectral":
            k_sel = select_k(Y_train, k_max).k_selected
            cov = spectral_baseline(Y_train, k_sel)
            lam = cov.loadings
        elif est == "diagonal":
            cov = diagonal_baseline(Y_train)
            k_sel = 0
            lam = np.zeros((Y_train.n_genes, 1))
        else:
            raise ValidationError(f"unknown estimator {est!r}; choose from {ESTIMATORS}")
        elapsed = time.perf_counter() - t0
        report.add(rep, est, "k_selected", k_sel)
        if truth is not None:
            report.add(rep, est, "relative_error", relative_frobenius_error(lam, truth))
        if est == "basil" and truth is not None and n_draws:
            draws = sample_posterior(result, n_draws, seed=seeds[3])
            report.add(
                rep, est, "coverage",
                coverage_rate(draws, truth, submatrix_size, level, seed=seeds[3], threads=threads),
            )
        if Y_test is not None:
            report.add(rep, est, "oos_loglik", oos_loglik(cov, Y_test))
        report.timings.append({"replication": rep, "estimator": est, "seconds": elapsed})


def run_replication_study(
    design: SimulationDesign,
    estimators=ESTIMATORS,
    C: GeneSetMatrix | None = None,
    k_max=30,
    n_draws=2000,
    level=0.95,
    submatrix_size=200,
    test_fraction=0.2,
    threads=1,
) -> StudyReport:
    """Repeat simulate / fit / evaluate ``design.n_replications`` times.

    Each replication draws its own gene-set matrix (unless ``C`` is given),
    a training set of ``design.n`` samples and an independent test set so that
    the test share of all samples is ``test_fraction``. Seeds are derived from
    (design.seed, replication), so replications are independent of order.
    """
    _check_estimators(estimators)
    report = StudyReport(design=asdict(design))
    n_test = int(round(design.n * test_fraction / (1 - test_fraction))) if test_fraction else 0
    for rep in range(design.n_replications):
        seeds = _replication_seeds(design.seed, rep)
        try:
            C_rep = C if C is not None else generate_random_genesets(
                design.p, design.q, design.density, design.min_genes, seed=seeds[0]
            )
            Y, truth = generate_synthetic(design, C_rep, seed=seeds[1])
            Y_test = (
                sample_from_truth(truth, n_test, seed=seeds[3] + 1, gene_ids=Y.gene_ids)
                if n_test else None
            )
            _evaluate(report, rep, Y, Y_test, C_rep, estimators, truth, k_max, n_draws, level,
                      min(submatrix_size, design.p), seeds, threads)
        except Exception as exc:  # one bad replication should not sink the study
            log.warning("replication %d failed: %s", rep, exc)
            report.failures.append({"replication": rep, "error": f"{type(exc).__name__}: {exc}"})
    return report


def run_split_study(Y: DataMatrix, C: GeneSetMatrix, estimators=ESTIMATORS, n_splits=50,
                    train_fraction=0.8, seed=0, standardize=True) -> StudyReport:
    """Out-of-sample log-likelihood over random train/test splits of a real dataset.

    ``k_max`` for every split is the number of principal components of the
    training data explaining 80% of the variance. With ``standardize`` the
    test rows are scaled by the training means and standard deviations.
    """
    _check_estimators(estimators)
    report = StudyReport(design={"n_splits": n_splits, "train_fraction": train_fraction,
                                 "seed": seed, "n": Y.n_samples, "p": Y.n_genes})
    n = Y.n_samples
    n_train = int(round(train_fraction * n))
    for split in range(n_splits):
        seeds = _replication_seeds(seed, split)
        try:
            perm = np.random.default_rng(seeds[0]).permutation(n)
            train = Y.select_samples(np.sort(perm[:n_train]))
            test = Y.select_samples(np.sort(perm[n_train:]))
            if standardize:
                train = standardize_columns(train)
                test = DataMatrix((test.values - train.column_means) / train.column_sds, test.gene_ids)
            k_max = default_k_max(train)
            _evaluate(report, split, train, test, C, estimators, None, k_max, 0, 0.95, 0, seeds, 1)
        except Exception as exc:
            log.warning("split %d failed: %s", split, exc)
            report.failures.append({"replication": split, "error": f"{type(exc).__name__}: {exc}"})
    return report

