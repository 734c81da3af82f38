"""
Choice of the number of latent factors by the joint-likelihood information
criterion JIC(k) = -2 l_k + k max(n, p) log min(n, p).

The joint log-likelihood is evaluated at the rank-k spectral fit with the
Gaussian residual variance set to its MLE, so every l_k is a function of the
singular value tail of a single SVD.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateResidual, DimensionMismatch
from .matrixcore import DataMatrix, SpectralDecomposition, truncated_svd

RESIDUAL_FLOOR = 1e-12


@dataclass(frozen=True)
class JicProfile:
    k_values: np.ndarray
    jic: np.ndarray
    loglik_hat: np.ndarray
    penalty: np.ndarray
    k_selected: int


def _values(Y):
    return Y.values if isinstance(Y, DataMatrix) else np.asarray(Y, dtype=float)


def jic_penalty(k, n, p):
    return k * max(n, p) * math.log(min(n, p))


def _loglik_from_residual(rss, n, p):
    s2 = rss / (n * p)
    if s2 < RESIDUAL_FLOOR:
        return math.inf
    return -0.5 * n * p * math.log(2 * math.pi * s2) - 0.5 * n * p


def spectral_loglik(Y, k, svd: SpectralDecomposition | None = None) -> float:
    """Gaussian log-likelihood of ``Y`` under its best rank-``k`` fit.

    Returns ``math.inf`` when the residual variance is numerically zero.
    """
    values = _values(Y)
    n, p = values.shape
    if not 1 <= k < min(n, p):
        raise DimensionMismatch(f"k={k} outside [1, {min(n, p) - 1}]")
    if svd is None or svd.rank < k:
        svd = truncated_svd(values, k)
    return _loglik_from_residual(svd.residual_sq_norm(k), n, p)


def default_k_max(svd_or_Y, explained=0.8):
    """Smallest k whose leading components explain ``explained`` of the variance."""
    if isinstance(svd_or_Y, SpectralDecomposition):
        svd = svd_or_Y
        cap = svd.rank
    else:
        values = _values(svd_or_Y)
        cap = min(values.shape) - 1
        svd = truncated_svd(values, cap)
    frac = np.cumsum(svd.singular_values**2) / svd.total_sq_norm
    k = int(np.searchsorted(frac, explained - 1e-12) + 1)
    return max(1, min(k, cap))


def select_k(Y, k_max=None, svd: SpectralDecomposition | None = None) -> JicProfile:
    """Evaluate JIC for k = 1..k_max and pick its minimizer (smallest k on ties)."""
    values = _values(Y)
    n, p = values.shape
    if k_max is None:
        k_max = default_k_max(Y if svd is None else svd)
    if not 1 <= k_max < min(n, p):
        raise DimensionMismatch(f"k_max={k_max} outside [1, {min(n, p) - 1}]")
    if svd is None or svd.rank < k_max:
        with warnings.catch_warnings():
            # trailing zero singular values are handled by truncation below
            warnings.simplefilter("ignore")
            svd = truncated_svd(values, k_max)

    ks, lls = [], []
    for k in range(1, k_max + 1):
        ll = _loglik_from_residual(svd.residual_sq_norm(k), n, p)
        if math.isinf(ll):
            if k == 1:
                raise DegenerateResidual("rank-1 fit already reproduces the data exactly")
            warnings.warn(
                f"residual vanishes at k={k}; JIC profile truncated at k={k - 1}",
                stacklevel=2,
            )
            break
        ks.append(k)
        lls.append(ll)

    k_values = np.array(ks)
    loglik = np.array(lls)
    penalty = np.array([jic_penalty(k, n, p) for k in ks])
    jic = -2.0 * loglik + penalty
    # argmin returns the first minimizer, i.e. the smallest k among ties
    k_selected = int(k_values[np.argmin(jic)])
    return JicProfile(k_values, jic, loglik, penalty, k_selected)
