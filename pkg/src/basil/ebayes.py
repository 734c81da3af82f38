"""
Empirical Bayes plug-ins: residual variance, the prior variances of the
structured and unstructured loading blocks, and the coverage inflation
factor rho.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateResidual, DimensionMismatch, ValidationError
from .matrixcore import SpectralDecomposition, SubspaceBasis, project_onto

log = logging.getLogger(__name__)

DEFAULT_PAIR_BUDGET = 100_000
ZERO_ROW_TOL = 1e-15


@dataclass(frozen=True)
class Hyperparameters:
    tau_gamma_sq: float
    tau_psi_sq: float
    rho: float
    sigma_hat_sq: float
    v0: float = 1.0
    sigma0_sq: float = 1.0
    pair_budget: int = DEFAULT_PAIR_BUDGET

    def __post_init__(self):
        for name in ("tau_gamma_sq", "tau_psi_sq"):
            value = getattr(self, name)
            if np.isnan(value) or value < 0:
                raise ValidationError(f"{name} must be nonnegative, got {value}")
        if not self.rho >= 1.0:
            raise ValidationError(f"rho must be >= 1, got {self.rho}")
        if not self.sigma_hat_sq > 0:
            raise ValidationError(f"sigma_hat_sq must be positive, got {self.sigma_hat_sq}")


@dataclass(frozen=True)
class RhoReport:
    rho: float
    n_pairs: int
    n_skipped: int
    exhaustive: bool


def sigma_hat(Y, svd: SpectralDecomposition, k) -> float:
    """Residual variance ||(I - U U^T) Y||_F^2 / ((n - k) p)."""
    values = getattr(Y, "values", Y)
    n, p = np.shape(values)
    if not 0 < k < n:
        raise DimensionMismatch(f"need 0 < k < n, got k={k}, n={n}")
    if svd.rank < k:
        raise DimensionMismatch(f"decomposition has rank {svd.rank} < k={k}")
    rss = svd.residual_sq_norm(k)
    if rss < 1e-12:
        raise DegenerateResidual(f"rank-{k} fit leaves no residual")
    return rss / ((n - k) * p)


def signal_split(svd: SpectralDecomposition, basis: SubspaceBasis, k, n):
    """(L_C, L_N): squared norms of P_C V D and (I - P_C) V D, divided by n."""
    if k > svd.rank:
        raise DimensionMismatch(f"k={k} exceeds decomposition rank {svd.rank}")
    vd = svd.right[:, :k] * svd.singular_values[:k]
    l_c = float(np.sum((basis.basis.T @ vd) ** 2)) / n
    l_n = float(np.sum(project_onto(basis, vd, complement=True) ** 2)) / n
    return l_c, l_n


def tau_hats(svd: SpectralDecomposition, basis: SubspaceBasis, sigma_hat_sq, k, n=None):
    """Prior variances matched to the signal in and out of the gene-set span.

    The subspace dimension r (the numerical rank of C) stands in for the
    number of gene sets, so a rank-deficient C still gives consistent
    denominators.
    """
    if not sigma_hat_sq > 0:
        raise ValidationError("sigma_hat_sq must be positive")
    n = svd.left.shape[0] if n is None else n
    p, r = basis.basis.shape
    l_c, l_n = signal_split(svd, basis, k, n)
    tau_gamma_sq = l_c / (k * r * sigma_hat_sq)
    tau_psi_sq = l_n / (k * (p - r) * sigma_hat_sq) if p > r else 0.0
    return tau_gamma_sq, tau_psi_sq


def _pair_index(t, p):
    """Map linear indices of the upper triangle (f <= g, row-major) to (f, g)."""
    # start[f] = number of pairs in rows before f
    f_idx = np.arange(p)
    start = f_idx * p - f_idx * (f_idx - 1) // 2
    f = np.searchsorted(start, t, side="right") - 1
    g = f + (t - start[f])
    return f, g


def _b_values(mu, sq, f, g, sigma_hat_sq):
    sf, sg = sq[f], sq[g]
    cross = np.einsum("ij,ij->i", mu[f], mu[g])
    diag = f == g
    b = np.empty(f.shape[0])
    b[diag] = np.sqrt(1.0 + sf[diag] / (2.0 * sigma_hat_sq))
    off = ~diag
    denom = sf[off] + sg[off]
    valid = denom >= ZERO_ROW_TOL
    vals = np.full(off.sum(), np.nan)
    vals[valid] = np.sqrt(
        1.0
        + (sf[off][valid] * sg[off][valid] + cross[off][valid] ** 2)
        / (sigma_hat_sq * denom[valid])
    )
    b[off] = vals
    return b


def rho_report(lambda_bar, sigma_hat_sq, pair_budget=DEFAULT_PAIR_BUDGET, seed=0) -> RhoReport:
    """Average of the per-entry inflation factors b_fg over gene pairs f <= g.

    All p (p + 1) / 2 pairs are used when they fit within ``pair_budget``;
    otherwise ``pair_budget`` distinct pairs are drawn uniformly with ``seed``.
    Off-diagonal pairs of two zero rows carry no information and are skipped.
    """
    if pair_budget < 1:
        raise ValidationError("pair_budget must be at least 1")
    mu = np.asarray(lambda_bar, dtype=float)
    p = mu.shape[0]
    sq = np.einsum("ij,ij->i", mu, mu)
    total = p * (p + 1) // 2
    exhaustive = total <= pair_budget
    if exhaustive:
        f, g = np.triu_indices(p)
    else:
        rng = np.random.default_rng(seed)
        t = np.sort(rng.choice(total, size=pair_budget, replace=False))
        f, g = _pair_index(t, p)

    chunk = 1 << 16
    acc, count, skipped = 0.0, 0, 0
    for start in range(0, f.shape[0], chunk):
        b = _b_values(mu, sq, f[start : start + chunk], g[start : start + chunk], sigma_hat_sq)
        ok = ~np.isnan(b)
        skipped += int((~ok).sum())
        acc += float(b[ok].sum())
        count += int(ok.sum())
    if skipped:
        log.info("rho: skipped %d pairs of zero rows", skipped)
    rho = acc / count if count else 1.0
    return RhoReport(max(rho, 1.0), count, skipped, exhaustive)


def rho_hat(lambda_bar, sigma_hat_sq, pair_budget=DEFAULT_PAIR_BUDGET, seed=0) -> float:
    return rho_report(lambda_bar, sigma_hat_sq, pair_budget, seed).rho
