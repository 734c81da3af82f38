import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given
from hypothesis import strategies as st

from basil.covariance import LowRankCovariance
from basil.errors import DimensionMismatch, ValidationError


def dense_logpdf_sum(cov, Y):
    return float(np.sum(scipy.stats.multivariate_normal(np.zeros(cov.shape[0]), cov).logpdf(Y)))


@given(st.integers(0, 100_000), st.integers(1, 200), st.integers(0, 10),
       st.floats(0.05, 20.0), st.booleans())
def test_woodbury_matches_dense(seed, p, k, noise, vector_noise):
    g = np.random.default_rng(seed)
    L = g.standard_normal((p, k)) * g.uniform(0.1, 3.0)
    D = g.uniform(0.5, 2.0, p) * noise if vector_noise else noise
    cov = LowRankCovariance(L, D)
    dense = cov.dense()
    sign, logdet = np.linalg.slogdet(dense)
    assert sign > 0
    assert cov.logdet() == pytest.approx(logdet, abs=1e-8)
    Y = g.standard_normal((3, p))
    quad = np.einsum("ij,ji->i", Y, np.linalg.solve(dense, Y.T))
    np.testing.assert_allclose(cov.inv_quad(Y), quad, rtol=1e-10, atol=1e-8)


def test_signed_weights(rng):
    p = 25
    L = rng.standard_normal((p, 4))
    L[:, 2] *= 0.5 / np.linalg.norm(L[:, 2])
    w = np.array([1.0, 0.5, -0.2, 2.0])
    cov = LowRankCovariance(L, 3.0, w)
    dense = (L * w) @ L.T + 3.0 * np.eye(p)
    assert np.min(np.linalg.eigvalsh(dense)) > 0
    np.testing.assert_allclose(cov.dense(), dense)
    assert cov.logdet() == pytest.approx(np.linalg.slogdet(dense)[1], abs=1e-10)
    y = rng.standard_normal(p)
    np.testing.assert_allclose(cov.solve(y), np.linalg.solve(dense, y), atol=1e-10)
    np.testing.assert_allclose(cov.diagonal(), np.diag(dense))


def test_loglik_matches_scipy(rng):
    p = 60
    cov = LowRankCovariance(rng.standard_normal((p, 5)), 0.8)
    Y = rng.standard_normal((7, p)) * 2
    assert cov.loglik(Y) == pytest.approx(dense_logpdf_sum(cov.dense(), Y), abs=1e-8)


def test_identity_at_origin():
    cov = LowRankCovariance(np.zeros((3, 0)), 1.0)
    assert cov.loglik(np.zeros((1, 3))) == pytest.approx(-1.5 * math.log(2 * math.pi), abs=1e-15)
    assert cov.loglik(np.ones(3)) == pytest.approx(-1.5 * math.log(2 * math.pi) - 1.5, abs=1e-15)


def test_correlation_block(rng):
    cov = LowRankCovariance(rng.standard_normal((10, 2)), 0.5)
    rows = [1, 4, 7]
    block = cov.dense()[np.ix_(rows, rows)]
    sd = np.sqrt(np.diag(block))
    np.testing.assert_allclose(cov.correlation(rows), block / np.outer(sd, sd), atol=1e-14)


def test_validation(rng):
    with pytest.raises(ValidationError):
        LowRankCovariance(rng.standard_normal((4, 2)), 0.0)
    with pytest.raises(DimensionMismatch):
        LowRankCovariance(rng.standard_normal((4, 2)), np.ones(3))
    with pytest.raises(DimensionMismatch):
        LowRankCovariance(rng.standard_normal((4, 2)), 1.0, np.ones(3))
    cov = LowRankCovariance(rng.standard_normal((4, 2)), 1.0)
    with pytest.raises(DimensionMismatch):
        cov.loglik(np.ones((2, 5)))
    indefinite = LowRankCovariance(np.eye(4)[:, :1] * 2, 1.0, np.array([-1.0]))
    with pytest.raises(ValidationError):
        indefinite.logdet()
