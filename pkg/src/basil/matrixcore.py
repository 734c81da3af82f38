"""
Dense linear algebra used by the factor model: column standardization,
truncated SVD through the small-side Gram matrix, orthonormal bases for the
column space of a gene-set matrix, and lazy projections onto that space.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    DimensionMismatch,
    EmptyGeneSetMatrix,
    RankDeficientWarning,
    ValidationError,
    ZeroVarianceColumn,
)

# singular values of C below this fraction of the largest are treated as zero
BASIS_RANK_RTOL = 1e-8
# k-th singular value below this fraction of the first flags a degenerate SVD
SVD_DEGENERATE_RTOL = 1e-10


@dataclass(frozen=True)
class DataMatrix:
    """n x p expression matrix, rows are samples and columns are genes."""

    values: np.ndarray
    gene_ids: tuple
    sample_ids: tuple | None = None
    standardized: bool = False
    column_means: np.ndarray | None = None
    column_sds: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValidationError("expression values must be a 2-d array")
        n, p = values.shape
        if n < 2 or p < 1:
            raise ValidationError(f"need at least 2 samples and 1 gene, got {n}x{p}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("expression values must be finite")
        gene_ids = tuple(str(g) for g in self.gene_ids)
        if len(gene_ids) != p:
            raise DimensionMismatch(f"{len(gene_ids)} gene ids for {p} columns")
        if len(set(gene_ids)) != p:
            raise ValidationError("duplicate gene ids in expression matrix")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "gene_ids", gene_ids)
        if self.sample_ids is not None:
            sample_ids = tuple(str(s) for s in self.sample_ids)
            if len(sample_ids) != n:
                raise DimensionMismatch(f"{len(sample_ids)} sample ids for {n} rows")
            object.__setattr__(self, "sample_ids", sample_ids)

    @classmethod
    def from_array(cls, values, gene_ids=None, **kwargs):
        values = np.asarray(values, dtype=float)
        if gene_ids is None:
            gene_ids = [f"g{j}" for j in range(values.shape[1])]
        return cls(values, tuple(gene_ids), **kwargs)

    @property
    def n_samples(self):
        return self.values.shape[0]

    @property
    def n_genes(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def select_genes(self, gene_ids):
        index = {g: j for j, g in enumerate(self.gene_ids)}
        cols = [index[g] for g in gene_ids]
        return DataMatrix(
            self.values[:, cols],
            tuple(gene_ids),
            sample_ids=self.sample_ids,
            standardized=self.standardized,
            column_means=None if self.column_means is None else self.column_means[cols],
            column_sds=None if self.column_sds is None else self.column_sds[cols],
        )

    def select_samples(self, rows):
        rows = np.asarray(rows)
        return DataMatrix(
            self.values[rows],
            self.gene_ids,
            sample_ids=None if self.sample_ids is None else tuple(np.asarray(self.sample_ids)[rows]),
            standardized=False,
            column_means=self.column_means,
            column_sds=self.column_sds,
        )


@dataclass(frozen=True)
class SpectralDecomposition:
    """Leading singular triplets: A ~ left @ diag(singular_values) @ right.T"""

    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray
    total_sq_norm: float = np.nan
    degenerate: bool = False

    @property
    def rank(self):
        return self.singular_values.shape[0]

    def truncate(self, k):
        if not 1 <= k <= self.rank:
            raise DimensionMismatch(f"cannot truncate rank-{self.rank} decomposition to {k}")
        d = self.singular_values[:k]
        return SpectralDecomposition(
            self.left[:, :k].copy(),
            d.copy(),
            self.right[:, :k].copy(),
            total_sq_norm=self.total_sq_norm,
            degenerate=bool(d[-1] < SVD_DEGENERATE_RTOL * d[0]),
        )

    def reconstruct(self):
        return (self.left * self.singular_values) @ self.right.T

    def residual_sq_norm(self, k=None):
        """||A - A_k||_F^2 from the singular value tail, clipped at zero."""
        k = self.rank if k is None else k
        return max(self.total_sq_norm - float(np.sum(self.singular_values[:k] ** 2)), 0.0)


@dataclass(frozen=True)
class SubspaceBasis:
    """Orthonormal basis (p x r) of a subspace of R^p.

    The projector onto the subspace is only ever applied as B (B^T A).
    """

    basis: np.ndarray
    singular_values: np.ndarray = field(default=None, repr=False)
    right: np.ndarray = field(default=None, repr=False)
    n_columns: int | None = None

    def pinv_apply(self, A):
        """pinv(C) @ A for the matrix C this basis was computed from."""
        if self.right is None:
            raise ValidationError("basis was not built from a gene-set matrix")
        return self.right @ ((self.basis.T @ A) / self.singular_values[:, None])

    @property
    def dim_ambient(self):
        return self.basis.shape[0]

    @property
    def dim_subspace(self):
        return self.basis.shape[1]

    @property
    def projector_applied_lazily(self):
        return True


def standardize_columns(Y: DataMatrix) -> DataMatrix:
    """Center each gene and scale to unit sample variance (n - 1 denominator).

    Already standardized input is returned with its original moments kept, so
    repeated calls are idempotent.
    """
    values = Y.values
    means = values.mean(axis=0)
    sds = values.std(axis=0, ddof=1)
    zero = np.flatnonzero(~(sds > 0))
    if zero.size:
        raise ZeroVarianceColumn(Y.gene_ids[zero[0]])
    out = (values - means) / sds
    if Y.standardized and Y.column_means is not None:
        # compose with the stored transform so inverse mapping stays valid
        means = Y.column_means + Y.column_sds * means
        sds = Y.column_sds * sds
    return DataMatrix(
        out,
        Y.gene_ids,
        sample_ids=Y.sample_ids,
        standardized=True,
        column_means=means,
        column_sds=sds,
    )


def _fix_signs(left, right):
    # largest-magnitude entry of each right singular vector made positive
    idx = np.argmax(np.abs(right), axis=0)
    signs = np.sign(right[idx, np.arange(right.shape[1])])
    signs[signs == 0] = 1.0
    return left * signs, right * signs


def truncated_svd(A, k) -> SpectralDecomposition:
    """Leading ``k`` singular triplets of ``A``.

    The eigendecomposition is taken on the smaller Gram matrix (A A^T when
    n <= p, else A^T A) and the other side is recovered by one product with
    ``A`` followed by renormalization.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise DimensionMismatch("truncated_svd expects a 2-d array")
    n, p = A.shape
    if not 1 <= k <= min(n, p):
        raise DimensionMismatch(f"k={k} outside [1, {min(n, p)}] for a {n}x{p} matrix")
    if not np.all(np.isfinite(A)):
        raise ValidationError("matrix has non-finite entries")

    wide = n <= p
    gram = A @ A.T if wide else A.T @ A
    m = gram.shape[0]
    _, evecs = scipy.linalg.eigh(gram, subset_by_index=[m - k, m - 1])
    evecs = evecs[:, ::-1]

    # recover the other side; its column norms are the singular values, which
    # resolves small ones far better than sqrt of the Gram eigenvalues
    other = A.T @ evecs if wide else A @ evecs
    d = np.linalg.norm(other, axis=0)
    order = np.argsort(-d, kind="stable")
    d, evecs, other = d[order], evecs[:, order], other[:, order]
    safe = d > 0
    other[:, safe] /= d[safe]

    total = float(np.trace(gram))
    degenerate = bool(d[-1] < SVD_DEGENERATE_RTOL * d[0]) if d[0] > 0 else True
    if degenerate:
        warnings.warn(
            f"k-th singular value {d[-1]:.3g} is numerically zero relative to {d[0]:.3g}",
            RankDeficientWarning,
            stacklevel=2,
        )

    if wide:
        left, right = evecs, other
    else:
        left, right = other, evecs
    left, right = _fix_signs(left, right)
    return SpectralDecomposition(
        np.ascontiguousarray(left),
        d,
        np.ascontiguousarray(right),
        total_sq_norm=total,
        degenerate=degenerate,
    )


def column_space_basis(C) -> SubspaceBasis:
    """Orthonormal basis for the column space of a gene-set matrix.

    ``C`` may be a ``GeneSetMatrix`` or a plain p x q array. The basis is the
    set of left singular vectors whose singular values exceed
    ``BASIS_RANK_RTOL`` times the largest one.
    """
    membership = getattr(C, "membership", C)
    membership = np.asarray(membership, dtype=float)
    if membership.ndim != 2 or membership.size == 0:
        raise EmptyGeneSetMatrix("gene-set matrix has no entries")
    q = membership.shape[1]
    u, s, vt = np.linalg.svd(membership, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        raise EmptyGeneSetMatrix("gene-set matrix has no nonzero entries")
    r = int(np.sum(s > BASIS_RANK_RTOL * s[0]))
    if r < q:
        warnings.warn(
            f"gene-set matrix has numerical rank {r} < {q} columns",
            RankDeficientWarning,
            stacklevel=2,
        )
    basis = u[:, :r]
    # same sign convention as truncated_svd, for reproducible bases
    idx = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[idx, np.arange(r)])
    signs[signs == 0] = 1.0
    right = vt[:r].T * signs
    return SubspaceBasis(
        np.ascontiguousarray(basis * signs), s[:r], np.ascontiguousarray(right), n_columns=q
    )


def project_onto(B: SubspaceBasis, A, complement=False):
    """Apply P = B B^T (or I - P) to ``A`` without forming a p x p matrix."""
    basis = B.basis if isinstance(B, SubspaceBasis) else np.asarray(B)
    A = np.asarray(A, dtype=float)
    if A.shape[0] != basis.shape[0]:
        raise DimensionMismatch(
            f"operand has {A.shape[0]} rows, subspace lives in R^{basis.shape[0]}"
        )
    proj = basis @ (basis.T @ A)
    return A - proj if complement else proj


def pca_factor_estimate(svd: SpectralDecomposition, n) -> np.ndarray:
    """Spectral plug-in for the latent factors, sqrt(n) * U."""
    if svd.left.shape[0] != n:
        raise DimensionMismatch(f"left singular vectors have {svd.left.shape[0]} rows, expected {n}")
    return np.sqrt(n) * svd.left
