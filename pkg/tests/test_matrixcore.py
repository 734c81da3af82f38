import warnings

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from basil.errors import (
    DimensionMismatch,
    EmptyGeneSetMatrix,
    RankDeficientWarning,
    ValidationError,
    ZeroVarianceColumn,
)
from basil.matrixcore import (
    DataMatrix,
    column_space_basis,
    pca_factor_estimate,
    project_onto,
    standardize_columns,
    truncated_svd,
)


def principal_angles_max(A, B):
    return float(np.max(scipy.linalg.subspace_angles(A, B)))


# --- DataMatrix ---------------------------------------------------------------


def test_datamatrix_rejects_bad_shapes_and_values():
    with pytest.raises(ValidationError):
        DataMatrix.from_array(np.ones((1, 3)))
    with pytest.raises(ValidationError):
        DataMatrix.from_array(np.array([[1.0, np.nan], [0.0, 1.0]]))
    with pytest.raises(DimensionMismatch):
        DataMatrix(np.ones((2, 2)), ("a",))
    with pytest.raises(ValidationError):
        DataMatrix(np.ones((2, 2)), ("a", "a"))


def test_select_genes_keeps_order_and_metadata():
    Y = standardize_columns(DataMatrix.from_array(np.arange(12.0).reshape(4, 3) ** 2, ["a", "b", "c"]))
    sub = Y.select_genes(["c", "a"])
    assert sub.gene_ids == ("c", "a")
    np.testing.assert_array_equal(sub.values, Y.values[:, [2, 0]])
    np.testing.assert_array_equal(sub.column_sds, Y.column_sds[[2, 0]])


# --- standardize_columns ---------------------------------------------------------


def test_standardize_symmetric_column():
    Y = DataMatrix.from_array(np.array([[1.0], [2.0], [3.0]]))
    Z = standardize_columns(Y)
    np.testing.assert_allclose(Z.values.ravel(), [-1.0, 0.0, 1.0])
    assert Z.column_means[0] == 2.0
    assert Z.column_sds[0] == 1.0
    assert Z.standardized


def test_standardize_moments(rng):
    Z = standardize_columns(DataMatrix.from_array(rng.normal(3.0, 2.0, (10, 5))))
    assert np.max(np.abs(Z.values.mean(axis=0))) < 1e-12
    np.testing.assert_allclose(Z.values.var(axis=0, ddof=1), 1.0, atol=1e-10)


def test_standardize_idempotent_and_invertible(rng):
    raw = rng.normal(5.0, 3.0, (12, 4))
    Z1 = standardize_columns(DataMatrix.from_array(raw))
    Z2 = standardize_columns(Z1)
    np.testing.assert_allclose(Z2.values, Z1.values, atol=1e-12)
    np.testing.assert_allclose(Z2.values * Z2.column_sds + Z2.column_means, raw, atol=1e-12)


def test_standardize_zero_variance_names_gene():
    Y = DataMatrix.from_array(np.array([[1.0, 4.0], [2.0, 4.0], [3.0, 4.0]]), ["ok", "flat"])
    with pytest.raises(ZeroVarianceColumn, match="flat"):
        standardize_columns(Y)


# --- truncated_svd -------------------------------------------------------------------


def test_svd_diagonal_embedding():
    A = np.zeros((3, 5))
    A[0, 0], A[1, 1], A[2, 2] = 3.0, 2.0, 1.0
    svd = truncated_svd(A, 2)
    np.testing.assert_allclose(svd.singular_values, [3.0, 2.0], atol=1e-12)
    np.testing.assert_allclose(np.abs(svd.left), np.eye(3)[:, :2], atol=1e-12)
    np.testing.assert_allclose(np.abs(svd.right), np.eye(5)[:, :2], atol=1e-12)


def test_svd_rank_one(rng):
    u = rng.standard_normal(8)
    v = rng.standard_normal(13)
    u /= np.linalg.norm(u)
    v /= np.linalg.norm(v)
    svd = truncated_svd(5.0 * np.outer(u, v), 1)
    assert svd.singular_values[0] == pytest.approx(5.0, rel=1e-12)
    assert abs(svd.left[:, 0] @ u) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("shape", [(50, 200), (200, 50), (40, 40)])
def test_svd_matches_dense_oracle(rng, shape):
    A = rng.standard_normal(shape)
    k = 10
    svd = truncated_svd(A, k)
    u, s, vt = np.linalg.svd(A, full_matrices=False)
    np.testing.assert_allclose(svd.singular_values, s[:k], rtol=1e-8)
    assert principal_angles_max(svd.left, u[:, :k]) < 1e-6
    assert principal_angles_max(svd.right, vt[:k].T) < 1e-6
    best = (u[:, :k] * s[:k]) @ vt[:k]
    rel = np.linalg.norm(svd.reconstruct() - best) / np.linalg.norm(best)
    assert rel < 1e-6
    assert np.max(np.abs(svd.left.T @ svd.left - np.eye(k))) < 1e-8
    assert np.max(np.abs(svd.right.T @ svd.right - np.eye(k))) < 1e-8


def test_svd_sign_convention(rng):
    svd = truncated_svd(rng.standard_normal((20, 30)), 4)
    idx = np.argmax(np.abs(svd.right), axis=0)
    assert np.all(svd.right[idx, np.arange(4)] > 0)


def test_svd_degenerate_flag():
    A = np.outer(np.arange(1.0, 6.0), np.arange(1.0, 8.0))
    with pytest.warns(RankDeficientWarning):
        svd = truncated_svd(A, 2)
    assert svd.degenerate


def test_svd_dimension_errors(rng):
    with pytest.raises(DimensionMismatch):
        truncated_svd(rng.standard_normal((4, 6)), 5)
    with pytest.raises(DimensionMismatch):
        truncated_svd(rng.standard_normal((4, 6)), 0)


@given(arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(2, 12)),
              elements=st.floats(-10, 10, allow_nan=False)))
def test_svd_residual_nonincreasing_in_k(A):
    m = min(A.shape)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        svd = truncated_svd(A, m)
    res = [svd.residual_sq_norm(k) for k in range(1, m + 1)]
    assert all(b <= a + 1e-9 * (1 + a) for a, b in zip(res, res[1:]))


@given(st.integers(0, 10_000), st.integers(3, 60), st.integers(3, 60))
def test_svd_agrees_with_dense_svd(seed, n, p):
    A = np.random.default_rng(seed).standard_normal((n, p))
    k = min(n, p) // 2
    svd = truncated_svd(A, k)
    s = np.linalg.svd(A, compute_uv=False)
    np.testing.assert_allclose(svd.singular_values, s[:k], rtol=1e-8)


# --- column_space_basis ------------------------------------------------------------


def test_basis_identity():
    B = column_space_basis(np.eye(3))
    assert B.dim_subspace == 3
    np.testing.assert_allclose(B.basis @ B.basis.T, np.eye(3), atol=1e-12)


def test_basis_duplicate_columns():
    C = np.array([[1, 1], [0, 0], [1, 1], [1, 1]], dtype=float)
    with pytest.warns(RankDeficientWarning):
        B = column_space_basis(C)
    assert B.dim_subspace == 1


def test_basis_fixes_columns(rng):
    C = (rng.random((100, 12)) < 0.1).astype(float)
    C[0] = 1.0
    B = column_space_basis(C)
    assert np.linalg.norm(project_onto(B, C) - C) < 1e-8
    assert np.max(np.abs(B.basis.T @ B.basis - np.eye(B.dim_subspace))) < 1e-8
    assert B.projector_applied_lazily


def test_basis_pinv_apply_matches_lstsq(rng):
    C = (rng.random((40, 6)) < 0.4).astype(float)
    C[:6] += np.eye(6)
    C = np.minimum(C, 1.0)
    A = rng.standard_normal((40, 3))
    B = column_space_basis(C)
    np.testing.assert_allclose(B.pinv_apply(A), np.linalg.pinv(C) @ A, atol=1e-10)


def test_basis_empty():
    with pytest.raises(EmptyGeneSetMatrix):
        column_space_basis(np.zeros((4, 2)))
    with pytest.raises(EmptyGeneSetMatrix):
        column_space_basis(np.zeros((4, 0)))


# --- project_onto ----------------------------------------------------------------------


def test_projection_annihilation_and_orthogonality(rng):
    B = column_space_basis(np.array([[1, 0], [1, 1], [0, 1], [0, 0], [1, 0]], dtype=float))
    inside = B.basis @ rng.standard_normal((B.dim_subspace, 3))
    assert np.max(np.abs(project_onto(B, inside, complement=True))) < 1e-10
    outside = project_onto(B, rng.standard_normal((5, 3)), complement=True)
    assert np.max(np.abs(project_onto(B, outside))) < 1e-10


def test_projection_dimension_check(rng):
    B = column_space_basis(np.eye(3))
    with pytest.raises(DimensionMismatch):
        project_onto(B, rng.standard_normal((4, 2)))


@given(st.integers(0, 10_000), st.integers(2, 40), st.integers(1, 5))
def test_projection_plus_complement_is_identity(seed, p, m):
    g = np.random.default_rng(seed)
    C = (g.random((p, max(1, p // 3))) < 0.5).astype(float)
    C[0, 0] = 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        B = column_space_basis(C)
    A = g.standard_normal((p, m)) * 10
    total = project_onto(B, A) + project_onto(B, A, complement=True)
    assert np.max(np.abs(total - A)) <= 1e-12 * max(1.0, np.max(np.abs(A)))


# --- pca_factor_estimate -----------------------------------------------------------


def test_pca_factor_scaling():
    A = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 1e-3]])
    svd = truncated_svd(A, 1)
    M = pca_factor_estimate(svd, 4)
    assert np.allclose(np.abs(M[:, 0]), 1.0, atol=1e-3)


def test_pca_factor_orthogonality(rng):
    svd = truncated_svd(rng.standard_normal((30, 50)), 5)
    M = pca_factor_estimate(svd, 30)
    assert np.max(np.abs(M.T @ M - 30 * np.eye(5))) < 1e-6
    with pytest.raises(DimensionMismatch):
        pca_factor_estimate(svd, 31)


def test_pca_factor_noiseless_recovery(rng):
    n, p, k = 40, 25, 3
    M0 = np.linalg.qr(rng.standard_normal((n, k)))[0] * np.sqrt(n)
    Y = M0 @ rng.standard_normal((p, k)).T
    M = pca_factor_estimate(truncated_svd(Y, k), n)
    assert principal_angles_max(M, M0) < 1e-6
