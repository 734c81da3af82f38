"""
Pathway-structured Bayesian factor model with pre-estimated latent factors.

Loadings are split as Lambda = B_C Lambda_C + B_N Lambda_N, where B_C spans
the columns of the gene-set matrix C and B_N its orthogonal complement. Given
the spectral factor estimate M = sqrt(n) U, both blocks and the noise
variance have a Normal / inverse-gamma posterior with closed-form parameters,
so point estimates are analytic and posterior draws are independent.

B_N is never formed: every action of I - P_C goes through B_C, and Gaussian
noise in the null space is drawn as (I - P_C) applied to an isotropic p x k
Gaussian, which has the same distribution as B_N times an isotropic
(p - r) x k Gaussian.
"""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import ebayes
from .covariance import LowRankCovariance
from .errors import (
    DimensionMismatch,
    InfiniteShrinkageWarning,
    InvariantViolation,
    SubsetTooLarge,
    UndefinedMean,
    ValidationError,
)
from .genesets import GeneSetMatrix
from .matrixcore import (
    SVD_DEGENERATE_RTOL,
    DataMatrix,
    SpectralDecomposition,
    SubspaceBasis,
    column_space_basis,
    pca_factor_estimate,
    standardize_columns,
    truncated_svd,
)
from .selection import JicProfile, default_k_max, select_k

log = logging.getLogger(__name__)

INVARIANT_TOL = 1e-8
DEFAULT_MAX_SUBSET = 2000


@dataclass(frozen=True)
class FitConfig:
    """Options for :func:`fit`.

    Either ``k`` is fixed or it is chosen by JIC over 1..``k_max`` (``k_max``
    defaults to the number of components explaining 80% of the variance).
    The ``tau_*`` and ``rho`` fields override the empirical Bayes values;
    ``float('inf')`` for a tau switches shrinkage of that block off.
    ``noise_dof`` sets the posterior degrees of freedom of sigma^2:
    ``"entries"`` gives v0 + n p (one Gaussian residual per matrix entry),
    ``"samples"`` gives v0 + n.
    """

    k: int | None = None
    k_max: int | None = None
    standardize: bool = False
    pair_budget: int = ebayes.DEFAULT_PAIR_BUDGET
    seed: int = 0
    v0: float = 1.0
    sigma0_sq: float = 1.0
    tau_gamma_sq: float | None = None
    tau_psi_sq: float | None = None
    rho: float | None = None
    noise_dof: str = "entries"
    check_invariants: bool = True


def _posterior_scale(tau_sq, n):
    """1 / (n + tau^-2), with tau^2 = 0 mapping to 0 and tau^2 = inf to 1 / n."""
    if tau_sq == 0:
        return 0.0
    return 1.0 / (n + 1.0 / tau_sq)


@dataclass(frozen=True)
class FactorModelFit:
    k: int
    n: int
    p: int
    q: int
    r: int
    basis: SubspaceBasis
    svd: SpectralDecomposition
    hyper: ebayes.Hyperparameters
    v_n: float
    sigma_n_sq: float
    lambda_bar: np.ndarray
    gamma_bar: np.ndarray
    psi_bar: np.ndarray
    gene_ids: tuple
    set_ids: tuple
    jic: JicProfile | None = None
    column_means: np.ndarray | None = None
    column_sds: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def m_hat(self):
        return pca_factor_estimate(self.svd, self.n)

    @property
    def scale_gamma(self):
        """Posterior variance of a structured loading entry per unit sigma^2."""
        return _posterior_scale(self.hyper.tau_gamma_sq, self.n)

    @property
    def scale_psi(self):
        return _posterior_scale(self.hyper.tau_psi_sq, self.n)

    @property
    def sigma_sq_mean(self):
        if self.v_n <= 2:
            raise UndefinedMean(f"posterior mean of sigma^2 needs v_n > 2, got {self.v_n}")
        return self.v_n * self.sigma_n_sq / (self.v_n - 2)

    @property
    def standardized(self):
        return self.column_means is not None

    def gene_index(self, genes):
        """Row indices for gene ids (or pass-through for integer indices)."""
        genes = list(genes)
        if all(isinstance(g, (int, np.integer)) for g in genes):
            return np.asarray(genes, dtype=int)
        lookup = {g: j for j, g in enumerate(self.gene_ids)}
        try:
            return np.array([lookup[str(g)] for g in genes], dtype=int)
        except KeyError as exc:
            raise ValidationError(f"unknown gene id {exc.args[0]!r}") from None


def _as_data(Y):
    if isinstance(Y, DataMatrix):
        return Y
    return DataMatrix.from_array(Y)


def _as_genesets(C, gene_ids):
    if isinstance(C, GeneSetMatrix):
        return C
    return GeneSetMatrix.from_array(np.asarray(C), gene_ids=gene_ids)


def fit(Y, C, config: FitConfig | None = None, **overrides) -> FactorModelFit:
    """Run the full estimation pipeline and return closed-form posterior summaries.

    ``Y`` is an n x p ``DataMatrix`` (or array) and ``C`` a p x q
    ``GeneSetMatrix`` (or 0/1 array) on the same gene order. Keyword overrides
    are applied on top of ``config``.
    """
    config = config or FitConfig()
    if overrides:
        config = FitConfig(**{**config.__dict__, **overrides})
    if config.noise_dof not in ("entries", "samples"):
        raise ValidationError(f"noise_dof must be 'entries' or 'samples', got {config.noise_dof!r}")
    timings = {}
    t0 = time.perf_counter()

    Y = _as_data(Y)
    C = _as_genesets(C, Y.gene_ids)
    if C.n_genes != Y.n_genes:
        raise DimensionMismatch(f"expression has {Y.n_genes} genes, gene-set matrix {C.n_genes}")
    if isinstance(C, GeneSetMatrix) and C.gene_ids != Y.gene_ids:
        raise ValidationError("gene order differs between Y and C; call align_genes first")
    if config.standardize and not Y.standardized:
        Y = standardize_columns(Y)
    values = Y.values
    n, p = values.shape

    # number of factors and the spectral decomposition
    jic = None
    if config.k is not None:
        k = int(config.k)
        if not 1 <= k < min(n, p):
            raise DimensionMismatch(f"k={k} outside [1, {min(n, p) - 1}]")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            svd_full = truncated_svd(values, k)
    else:
        k_max = config.k_max
        if k_max is None:
            k_max = default_k_max(Y)
        k_max = min(int(k_max), min(n, p) - 1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            svd_full = truncated_svd(values, k_max)
        jic = select_k(values, k_max, svd=svd_full)
        k = jic.k_selected
    d = svd_full.singular_values
    k_requested = k
    while k > 1 and d[k - 1] <= SVD_DEGENERATE_RTOL * d[0]:
        k -= 1
    if k < k_requested:
        warnings.warn(f"k reduced to {k}: trailing singular values are numerically zero", stacklevel=2)
    svd = svd_full.truncate(k)
    timings["spectral"] = time.perf_counter() - t0

    # gene-set geometry
    t1 = time.perf_counter()
    basis = column_space_basis(C)
    r = basis.dim_subspace
    timings["basis"] = time.perf_counter() - t1

    # hyperparameters
    t2 = time.perf_counter()
    s_hat = ebayes.sigma_hat(values, svd, k)
    tg_hat, tp_hat = ebayes.tau_hats(svd, basis, s_hat, k, n)
    tau_g = tg_hat if config.tau_gamma_sq is None else float(config.tau_gamma_sq)
    tau_p = tp_hat if config.tau_psi_sq is None else float(config.tau_psi_sq)
    for name, value in (("tau_gamma_sq", tau_g), ("tau_psi_sq", tau_p)):
        if value == 0:
            warnings.warn(
                f"{name} is exactly zero; that loading block is set to zero",
                InfiniteShrinkageWarning,
                stacklevel=2,
            )
    a = _posterior_scale(tau_g, n)
    b = _posterior_scale(tau_p, n)

    # closed-form posterior means
    vd = svd.right * svd.singular_values
    coords = basis.basis.T @ vd
    c_part = basis.basis @ coords
    n_part = vd - c_part
    root_n = math.sqrt(n)
    lambda_c = root_n * a * c_part
    psi_bar = root_n * b * n_part
    lambda_bar = lambda_c + psi_bar
    gamma_bar = root_n * a * basis.pinv_apply(vd)

    # noise variance update; M^T Y B_C = sqrt(n) D V^T B_C, so no n x p products
    # beyond Y B_C are needed
    total = svd.total_sq_norm
    yc_sq = float(np.sum((values @ basis.basis) ** 2))
    coords_sq = float(np.sum(coords**2))
    signal_sq = float(np.sum(svd.singular_values**2))
    term_c = yc_sq - a * n * coords_sq
    term_n = (total - yc_sq) - b * n * (signal_sq - coords_sq)
    dof = n * p if config.noise_dof == "entries" else n
    v_n = config.v0 + dof
    sigma_n_sq = (config.v0 * config.sigma0_sq + term_c + term_n) / v_n

    if config.rho is not None:
        rho = float(config.rho)
        rho_info = None
    else:
        rho_info = ebayes.rho_report(lambda_bar, s_hat, config.pair_budget, config.seed)
        rho = rho_info.rho
    hyper = ebayes.Hyperparameters(
        tau_gamma_sq=tau_g,
        tau_psi_sq=tau_p,
        rho=rho,
        sigma_hat_sq=s_hat,
        v0=config.v0,
        sigma0_sq=config.sigma0_sq,
        pair_budget=config.pair_budget,
    )
    timings["posterior"] = time.perf_counter() - t2

    diagnostics = {
        "tau_gamma_sq_hat": tg_hat,
        "tau_psi_sq_hat": tp_hat,
        "sigma_terms": (term_c, term_n),
        "max_abs_Ct_psi": float(np.max(np.abs(C.membership.T @ psi_bar))),
        "max_abs_Bt_psi": float(np.max(np.abs(basis.basis.T @ psi_bar))),
        "max_abs_decomposition": float(
            np.max(np.abs(lambda_bar - C.membership @ gamma_bar - psi_bar))
        ),
        "max_abs_projection_identity": float(
            np.max(np.abs(c_part + n_part - vd))
        ),
        "basis_orthonormality": float(np.max(np.abs(basis.basis.T @ basis.basis - np.eye(r)))),
        "left_orthonormality": float(np.max(np.abs(svd.left.T @ svd.left - np.eye(k)))),
        "right_orthonormality": float(np.max(np.abs(svd.right.T @ svd.right - np.eye(k)))),
        "rho_pairs": None if rho_info is None else rho_info.n_pairs,
        "rho_skipped": None if rho_info is None else rho_info.n_skipped,
    }
    result = FactorModelFit(
        k=k,
        n=n,
        p=p,
        q=C.n_sets,
        r=r,
        basis=basis,
        svd=svd,
        hyper=hyper,
        v_n=float(v_n),
        sigma_n_sq=float(sigma_n_sq),
        lambda_bar=lambda_bar,
        gamma_bar=gamma_bar,
        psi_bar=psi_bar,
        gene_ids=Y.gene_ids,
        set_ids=C.set_ids,
        jic=jic,
        column_means=Y.column_means if Y.standardized else None,
        column_sds=Y.column_sds if Y.standardized else None,
        diagnostics=diagnostics,
        timings=timings,
    )
    timings["total"] = time.perf_counter() - t0
    if config.check_invariants:
        check_invariants(result, C)
    return result


def check_invariants(result: FactorModelFit, C: GeneSetMatrix | None = None):
    """Raise ``InvariantViolation`` if a structural identity of the fit fails."""
    diag = result.diagnostics
    # absolute tolerance, widened only when entries are large enough for
    # rounding in double precision to approach it
    scale = float(np.max(np.abs(result.svd.singular_values))) if result.k else 1.0
    problems = []
    if C is not None:
        col_max = float(np.max(C.membership.sum(axis=0)))
        if diag["max_abs_Ct_psi"] > max(INVARIANT_TOL, 1e-13 * col_max * scale):
            problems.append(f"C^T psi_bar = {diag['max_abs_Ct_psi']:.3g}")
    if diag["max_abs_Bt_psi"] > max(INVARIANT_TOL, 1e-13 * scale):
        problems.append(f"B_C^T psi_bar = {diag['max_abs_Bt_psi']:.3g}")
    if diag["max_abs_projection_identity"] > max(1e-12, 1e-15 * scale):
        problems.append(f"P_C + (I - P_C) identity off by {diag['max_abs_projection_identity']:.3g}")
    if result.r == result.q and diag["max_abs_decomposition"] > max(INVARIANT_TOL, 1e-13 * scale):
        problems.append(f"lambda_bar - C gamma_bar - psi_bar = {diag['max_abs_decomposition']:.3g}")
    for key in ("basis_orthonormality", "left_orthonormality", "right_orthonormality"):
        if diag[key] > INVARIANT_TOL:
            problems.append(f"{key} = {diag[key]:.3g}")
    term_c, term_n = diag["sigma_terms"]
    floor = -INVARIANT_TOL * max(1.0, result.svd.total_sq_norm)
    if term_c < floor or term_n < floor:
        problems.append(f"negative noise-variance terms {term_c:.3g}, {term_n:.3g}")
    if not result.sigma_n_sq > 0:
        problems.append(f"sigma_n^2 = {result.sigma_n_sq}")
    if not result.hyper.rho >= 1.0:
        problems.append(f"rho = {result.hyper.rho}")
    if problems:
        raise InvariantViolation("; ".join(problems))


# ---------------------------------------------------------------------------
# persistence

_FIT_ARRAYS = ("lambda_bar", "gamma_bar", "psi_bar", "column_means", "column_sds")


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, (tuple, list)):
        return [_jsonable(v) for v in value]
    return value


def save_fit(result: FactorModelFit, path):
    """Write everything needed to rebuild ``result`` into one ``.npz`` file."""
    meta = {
        "k": result.k, "n": result.n, "p": result.p, "q": result.q, "r": result.r,
        "v_n": result.v_n, "sigma_n_sq": result.sigma_n_sq,
        "hyper": {key: _jsonable(v) for key, v in result.hyper.__dict__.items()},
        "svd_total_sq_norm": result.svd.total_sq_norm,
        "svd_degenerate": result.svd.degenerate,
        "basis_n_columns": result.basis.n_columns,
        "diagnostics": {key: _jsonable(v) for key, v in result.diagnostics.items()},
    }
    arrays = {
        "svd_left": result.svd.left,
        "svd_singular_values": result.svd.singular_values,
        "svd_right": result.svd.right,
        "basis": result.basis.basis,
        "basis_singular_values": result.basis.singular_values,
        "basis_right": result.basis.right,
        "gene_ids": np.array(result.gene_ids, dtype=str),
        "set_ids": np.array(result.set_ids, dtype=str),
        "meta": np.array(json.dumps(meta, sort_keys=True)),
    }
    if result.jic is not None:
        arrays["jic"] = np.vstack([result.jic.k_values, result.jic.jic, result.jic.loglik_hat, result.jic.penalty])
        meta["jic_k_selected"] = result.jic.k_selected
        arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    for name in _FIT_ARRAYS:
        value = getattr(result, name)
        if value is not None:
            arrays[name] = value
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_fit(path) -> FactorModelFit:
    """Inverse of :func:`save_fit`."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        arrays = {key: data[key] for key in data.files}
    svd = SpectralDecomposition(
        arrays["svd_left"], arrays["svd_singular_values"], arrays["svd_right"],
        total_sq_norm=meta["svd_total_sq_norm"], degenerate=meta["svd_degenerate"],
    )
    basis = SubspaceBasis(
        arrays["basis"], arrays["basis_singular_values"], arrays["basis_right"],
        n_columns=meta["basis_n_columns"],
    )
    jic = None
    if "jic" in arrays:
        k_values, values, loglik, penalty = arrays["jic"]
        jic = JicProfile(k_values.astype(int), values, loglik, penalty, meta["jic_k_selected"])
    diagnostics = dict(meta["diagnostics"])
    if "sigma_terms" in diagnostics:
        diagnostics["sigma_terms"] = tuple(diagnostics["sigma_terms"])
    return FactorModelFit(
        k=meta["k"], n=meta["n"], p=meta["p"], q=meta["q"], r=meta["r"],
        basis=basis, svd=svd, hyper=ebayes.Hyperparameters(**meta["hyper"]),
        v_n=meta["v_n"], sigma_n_sq=meta["sigma_n_sq"],
        lambda_bar=arrays["lambda_bar"], gamma_bar=arrays["gamma_bar"], psi_bar=arrays["psi_bar"],
        gene_ids=tuple(str(g) for g in arrays["gene_ids"]),
        set_ids=tuple(str(g) for g in arrays["set_ids"]),
        jic=jic,
        column_means=arrays.get("column_means"), column_sds=arrays.get("column_sds"),
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# posterior draws


@dataclass(frozen=True)
class PosteriorDraws:
    """Independent joint draws of (Lambda, sigma^2), stored in factored form.

    Only the sigma^2 draws are kept. The Gaussian noise of draw ``s`` comes
    from its own stream seeded by (seed, s), so any draw can be regenerated
    exactly and in any order.
    """

    fit: FactorModelFit
    n_draws: int
    seed: int
    sigma_sq: np.ndarray
    coverage_corrected: bool = True

    @property
    def inflation(self):
        return self.fit.hyper.rho**2 if self.coverage_corrected else 1.0

    def _noise(self, s):
        fit = self.fit
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(int(s),)))
        z_c = rng.standard_normal((fit.r, fit.k))
        z_p = rng.standard_normal((fit.p, fit.k))
        var = self.sigma_sq[s] * self.inflation
        return z_c * math.sqrt(var * fit.scale_gamma), z_p * math.sqrt(var * fit.scale_psi)

    def _parts(self, s):
        e_c, e_p = self._noise(s)
        # B_C e_c + (I - P_C) e_p = B_C (e_c - B_C^T e_p) + e_p
        coeff = e_c - self.fit.basis.basis.T @ e_p
        return coeff, e_c, e_p

    def lambda_draw(self, s, rows=None):
        if not 0 <= s < self.n_draws:
            raise IndexError(f"draw {s} out of range for {self.n_draws} draws")
        coeff, _, e_p = self._parts(s)
        B = self.fit.basis.basis
        if rows is None:
            return self.fit.lambda_bar + B @ coeff + e_p
        return self.fit.lambda_bar[rows] + B[rows] @ coeff + e_p[rows]

    def structured_draw(self, s):
        """Draw ``s`` of (Gamma, Psi), the gene-set and residual loading blocks."""
        coeff, e_c, e_p = self._parts(s)
        fit = self.fit
        coords_bar = fit.basis.basis.T @ fit.lambda_bar
        gamma = fit.basis.right @ ((coords_bar + e_c) / fit.basis.singular_values[:, None])
        psi = fit.psi_bar + e_p - fit.basis.basis @ (fit.basis.basis.T @ e_p)
        return gamma, psi

    def iter_lambda(self, rows=None, threads=1):
        """Yield (sigma^2, Lambda) per draw, in draw order."""
        if threads <= 1:
            for s in range(self.n_draws):
                yield self.sigma_sq[s], self.lambda_draw(s, rows)
            return
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for s, lam in enumerate(pool.map(lambda i: self.lambda_draw(i, rows), range(self.n_draws))):
                yield self.sigma_sq[s], lam

    def lambda_array(self, rows=None, threads=1):
        """All draws as an array of shape (n_draws, len(rows) or p, k)."""
        m = self.fit.p if rows is None else len(np.arange(self.fit.p)[rows])
        out = np.empty((self.n_draws, m, self.fit.k))
        for s, (_, lam) in enumerate(self.iter_lambda(rows, threads)):
            out[s] = lam
        return out


def sample_posterior(
    result: FactorModelFit,
    n_draws,
    seed=0,
    coverage_corrected=True,
    fixed_sigma_sq=None,
) -> PosteriorDraws:
    """Draw ``n_draws`` independent posterior samples.

    sigma^2 ~ InvGamma(v_n / 2, v_n sigma_n^2 / 2); given sigma^2, the
    structured and residual blocks get isotropic Gaussian noise with variances
    sigma^2 rho^2 / (n + tau^-2). ``fixed_sigma_sq`` pins sigma^2 instead of
    sampling it.
    """
    n_draws = int(n_draws)
    if n_draws < 1:
        raise ValidationError("n_draws must be at least 1")
    if fixed_sigma_sq is not None:
        sigma_sq = np.full(n_draws, float(fixed_sigma_sq))
    else:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        shape = result.v_n / 2.0
        scale = result.v_n * result.sigma_n_sq / 2.0
        sigma_sq = scale / rng.standard_gamma(shape, size=n_draws)
    return PosteriorDraws(result, n_draws, int(seed), sigma_sq, coverage_corrected)


# ---------------------------------------------------------------------------
# induced covariance and correlation


def covariance_posterior_mean(result: FactorModelFit, exact=True, coverage_corrected=True):
    """Posterior mean of Lambda Lambda^T + sigma^2 I as a ``LowRankCovariance``.

    With ``exact`` the loading noise contributes
    k E[sigma^2] rho^2 (a P_C + b (I - P_C)), where a and b are the two
    posterior scales; this is carried as an extra weighted block on B_C.
    Otherwise the isotropic approximation
    E[sigma^2] {1 + rho^2 (a + b)} I is used for the diagonal part.
    """
    es2 = result.sigma_sq_mean
    rho_sq = result.hyper.rho**2 if coverage_corrected else 1.0
    a, b = result.scale_gamma, result.scale_psi
    if not exact:
        delta = es2 * (1.0 + rho_sq * (a + b))
        return LowRankCovariance(result.lambda_bar, delta)
    k = result.k
    delta = es2 * (1.0 + rho_sq * k * b)
    extra = es2 * rho_sq * k * (a - b)
    loadings = np.hstack([result.lambda_bar, result.basis.basis])
    weights = np.concatenate([np.ones(k), np.full(result.r, extra)])
    return LowRankCovariance(loadings, delta, weights)


@dataclass(frozen=True)
class CorrelationSummary:
    gene_ids: tuple
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    plugin: np.ndarray

    @property
    def significant(self):
        sig = ~((self.lower <= 0) & (self.upper >= 0))
        np.fill_diagonal(sig, True)
        return sig

    @property
    def masked(self):
        return np.where(self.significant, self.mean, 0.0)

    def masked_fraction(self):
        """Share of off-diagonal pairs whose interval contains zero."""
        iu = np.triu_indices(len(self.gene_ids), 1)
        return float(np.mean(~self.significant[iu])) if iu[0].size else 0.0


def _quantile_bounds(level):
    if not 0 < level < 1:
        raise ValidationError(f"level must be in (0, 1), got {level}")
    return (1 - level) / 2, 1 - (1 - level) / 2


def correlation_intervals(
    draws: PosteriorDraws, gene_subset, level=0.95, max_genes=DEFAULT_MAX_SUBSET, threads=1
) -> CorrelationSummary:
    """Posterior mean and equal-tailed intervals of gene-gene correlations.

    Each draw's correlation is computed from Lambda Lambda^T + sigma^2 I on
    the subset. ``plugin`` holds the correlation of the posterior-mean
    covariance for comparison.
    """
    lo_q, hi_q = _quantile_bounds(level)
    fit = draws.fit
    rows = fit.gene_index(gene_subset)
    s = rows.shape[0]
    if s > max_genes:
        raise SubsetTooLarge(f"{s} genes requested, cap is {max_genes}")
    lam = draws.lambda_array(rows, threads)
    sig2 = draws.sigma_sq
    var = np.einsum("sik,sik->si", lam, lam) + sig2[:, None]
    sd = np.sqrt(var)

    mean = np.empty((s, s))
    lower = np.empty((s, s))
    upper = np.empty((s, s))
    block = max(1, int(4_000_000 // max(1, draws.n_draws * s)))
    for start in range(0, s, block):
        stop = min(s, start + block)
        cov = np.matmul(lam[:, start:stop], lam.transpose(0, 2, 1))
        idx = np.arange(start, stop)
        cov[:, idx - start, idx] += sig2[:, None]
        corr = cov / (sd[:, start:stop, None] * sd[:, None, :])
        mean[start:stop] = corr.mean(axis=0)
        lower[start:stop], upper[start:stop] = np.quantile(corr, [lo_q, hi_q], axis=0)
    for arr in (mean, lower, upper):
        np.fill_diagonal(arr, 1.0)
    plugin = covariance_posterior_mean(fit, coverage_corrected=draws.coverage_corrected).correlation(rows)
    gene_ids = tuple(fit.gene_ids[i] for i in rows)
    return CorrelationSummary(gene_ids, mean, lower, upper, level, plugin)


# ---------------------------------------------------------------------------
# latent factors


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    covariance: np.ndarray


def latent_factor_posterior(y, lam, sigma_sq) -> GaussianSummary:
    """Posterior of eta given y = Lambda eta + noise, eta ~ N(0, I).

    ``y`` may be a length-p vector or an n x p matrix (one row per sample).
    Only the k x k system Lambda^T Lambda + sigma^2 I is factorized.
    """
    if not sigma_sq > 0:
        raise ValidationError("sigma_sq must be positive")
    lam = np.asarray(lam, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != lam.shape[0]:
        raise DimensionMismatch(f"y has {y.shape[-1]} genes, loadings have {lam.shape[0]}")
    k = lam.shape[1]
    gram = lam.T @ lam + sigma_sq * np.eye(k)
    factor = scipy.linalg.cho_factor(gram)
    mean = scipy.linalg.cho_solve(factor, lam.T @ y.T).T
    # (Lambda^T Lambda / sigma^2 + I)^-1 = sigma^2 (Lambda^T Lambda + sigma^2 I)^-1
    cov = sigma_sq * scipy.linalg.cho_solve(factor, np.eye(k))
    return GaussianSummary(mean, cov)


def latent_factor_posterior_mean_mc(y, draws) -> np.ndarray:
    """Average of the conditional posterior means of eta over loading draws.

    ``draws`` is a ``PosteriorDraws`` or any iterable of (sigma^2, Lambda).
    """
    source = draws.iter_lambda() if isinstance(draws, PosteriorDraws) else draws
    total, count = None, 0
    for sigma_sq, lam in source:
        m = latent_factor_posterior(y, lam, sigma_sq).mean
        total = m if total is None else total + m
        count += 1
    if count == 0:
        raise ValidationError("no draws supplied")
    return total / count
