"""
Covariance matrices of the form L diag(w) L^T + D with a thin L (p x m) and a
positive diagonal D. Determinants and inverse quadratic forms go through the
m x m capacitance system, so nothing p x p is ever formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, ValidationError


@dataclass(frozen=True)
class LowRankCovariance:
    """Sigma = L diag(weights) L^T + diag(noise_var).

    ``noise_var`` is a scalar (isotropic noise) or a length-p vector.
    ``weights`` defaults to ones and may contain negative entries as long as
    Sigma itself stays positive definite.
    """

    loadings: np.ndarray
    noise_var: float | np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        L = np.asarray(self.loadings, dtype=float)
        if L.ndim != 2:
            raise ValidationError("loadings must be a p x m array")
        noise = np.asarray(self.noise_var, dtype=float)
        if noise.ndim > 1 or (noise.ndim == 1 and noise.shape[0] != L.shape[0]):
            raise DimensionMismatch("noise_var must be a scalar or a length-p vector")
        if not np.all(noise > 0):
            raise ValidationError("noise variance must be positive")
        w = np.ones(L.shape[1]) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != (L.shape[1],):
            raise DimensionMismatch("weights must have one entry per loading column")
        object.__setattr__(self, "loadings", L)
        object.__setattr__(self, "noise_var", float(noise) if noise.ndim == 0 else noise)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self):
        return self.loadings.shape[0]

    @property
    def rank(self):
        return self.loadings.shape[1]

    def _noise_vector(self):
        return np.broadcast_to(np.asarray(self.noise_var, dtype=float), (self.dim,))

    def _capacitance(self):
        # I + W L^T D^-1 L
        L = self.loadings
        scaled = L / self._noise_vector()[:, None]
        gram = L.T @ scaled
        return np.eye(self.rank) + self.weights[:, None] * gram, scaled

    def diagonal(self):
        return np.einsum("ij,j,ij->i", self.loadings, self.weights, self.loadings) + self._noise_vector()

    def dense(self, rows=None):
        """Materialize Sigma, or its rows x rows block."""
        L = self.loadings if rows is None else self.loadings[rows]
        noise = self._noise_vector() if rows is None else self._noise_vector()[rows]
        return (L * self.weights) @ L.T + np.diag(noise)

    def correlation(self, rows=None):
        block = self.dense(rows)
        sd = np.sqrt(np.diag(block))
        corr = block / np.outer(sd, sd)
        np.fill_diagonal(corr, 1.0)
        return corr

    def logdet(self):
        cap, _ = self._capacitance()
        sign, logdet_cap = np.linalg.slogdet(cap)
        if sign <= 0:
            raise ValidationError("covariance is not positive definite")
        return float(np.sum(np.log(self._noise_vector())) + logdet_cap)

    def solve(self, Y):
        """Sigma^{-1} applied to the columns of ``Y`` (p x m or length p)."""
        Y = np.asarray(Y, dtype=float)
        if Y.shape[0] != self.dim:
            raise DimensionMismatch(f"operand has {Y.shape[0]} rows, covariance is {self.dim}x{self.dim}")
        cap, scaled = self._capacitance()
        Y2 = Y.reshape(self.dim, -1)
        inner = np.linalg.solve(cap, self.weights[:, None] * (scaled.T @ Y2))
        out = Y2 / self._noise_vector()[:, None] - scaled @ inner
        return out.reshape(Y.shape)

    def inv_quad(self, Y):
        """y^T Sigma^{-1} y for each row y of ``Y`` (or a single vector)."""
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            return float(Y @ self.solve(Y))
        if Y.shape[1] != self.dim:
            raise DimensionMismatch(f"rows have length {Y.shape[1]}, covariance is {self.dim}x{self.dim}")
        return np.einsum("ij,ji->i", Y, self.solve(Y.T))

    def loglik(self, Y):
        """Sum of zero-mean Gaussian log-densities of the rows of ``Y``."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if Y.shape[1] != self.dim:
            raise DimensionMismatch(f"test rows have {Y.shape[1]} genes, covariance has {self.dim}")
        n = Y.shape[0]
        return (
            -0.5 * n * self.dim * math.log(2 * math.pi)
            - 0.5 * n * self.logdet()
            - 0.5 * float(np.sum(self.inv_quad(Y)))
        )
