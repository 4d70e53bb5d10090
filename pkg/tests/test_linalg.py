import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sdcil.linalg import (
    CholFactor,
    InvalidInputError,
    NotPositiveDefiniteError,
    cholesky_decompose,
    covariance_from_embeddings,
    mahalanobis_distance,
    regularize_covariance,
    sample_gaussian,
)


def test_regularize_zero_trace_falls_back_to_eps():
    np.testing.assert_array_equal(regularize_covariance(np.zeros((2, 2)), 1e-4), 1e-4 * np.eye(2))


def test_regularize_identity():
    np.testing.assert_allclose(regularize_covariance(np.eye(3), 1e-4), (1 + 1e-4) * np.eye(3), rtol=0, atol=1e-15)


def test_regularize_trace_scaled():
    # eps = 0.01 * 4 / 2 = 0.02
    np.testing.assert_allclose(regularize_covariance(np.diag([4.0, 0.0]), 0.01), np.diag([4.02, 0.02]), atol=1e-15)


def test_regularize_rejects_nonfinite():
    with pytest.raises(InvalidInputError):
        regularize_covariance(np.array([[1.0, np.nan], [np.nan, 1.0]]))


def test_cholesky_examples():
    np.testing.assert_array_equal(cholesky_decompose(np.eye(3)).lower, np.eye(3))
    np.testing.assert_array_equal(cholesky_decompose(np.diag([4.0, 9.0])).lower, np.diag([2.0, 3.0]))
    L = cholesky_decompose(np.array([[4.0, 2.0], [2.0, 5.0]])).lower
    np.testing.assert_allclose(L, [[2.0, 0.0], [1.0, 2.0]], atol=1e-15)
    np.testing.assert_allclose(L @ L.T, [[4.0, 2.0], [2.0, 5.0]], atol=1e-15)


def test_cholesky_reports_pivot():
    m = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(NotPositiveDefiniteError) as err:
        cholesky_decompose(m)
    assert err.value.pivot == 1
    assert "pivot 1" in str(err.value)


def test_cholesky_reconstruction_random():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 65))
        a = rng.standard_normal((d, d + 2))
        m = a @ a.T + 1e-3 * np.eye(d)
        L = cholesky_decompose(m).lower
        assert np.all(np.diag(L) > 0)
        assert np.array_equal(L, np.tril(L))
        worst = max(worst, np.linalg.norm(L @ L.T - m) / np.linalg.norm(m))
    assert worst < 1e-10


def test_mahalanobis_examples():
    eye = CholFactor(np.eye(2))
    assert mahalanobis_distance(np.array([1.0, 2.0]), np.array([1.0, 2.0]), eye) == 0.0
    assert mahalanobis_distance(np.array([3.0, 4.0]), np.zeros(2), eye) == pytest.approx(5.0, abs=1e-15)
    diag = cholesky_decompose(np.diag([4.0, 1.0]))
    assert mahalanobis_distance(np.array([2.0, 1.0]), np.zeros(2), diag) == pytest.approx(np.sqrt(2.0), abs=1e-15)


def test_mahalanobis_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        mahalanobis_distance(np.zeros(2), np.zeros(3), CholFactor(np.eye(2)))


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 8).flatmap(
        lambda d: st.tuples(
            arrays(np.float64, d, elements=st.floats(-1e3, 1e3)),
            arrays(np.float64, d, elements=st.floats(-1e3, 1e3)),
            arrays(np.float64, (d, d), elements=st.floats(-2, 2)),
        )
    )
)
def test_mahalanobis_symmetry_and_self_distance(args):
    x, y, a = args
    chol = cholesky_decompose(a @ a.T + np.eye(len(x)))
    assert mahalanobis_distance(x, y, chol) == mahalanobis_distance(y, x, chol)
    assert mahalanobis_distance(x, x, chol) == 0.0
    assert mahalanobis_distance(x, y, chol) >= 0.0


def test_covariance_examples():
    assert np.array_equal(covariance_from_embeddings(np.array([[1.0, 2.0]]), np.array([1.0, 2.0])), np.zeros((2, 2)))
    cov = covariance_from_embeddings(np.array([[0.0, 0.0], [2.0, 2.0]]), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(cov, [[1.0, 1.0], [1.0, 1.0]])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 10)), elements=st.floats(-1e3, 1e3)))
def test_covariance_symmetric_nonnegative_diagonal(e):
    cov = covariance_from_embeddings(e, e.mean(axis=0))
    assert np.array_equal(cov, cov.T)
    assert np.all(np.diag(cov) >= 0)


def test_covariance_errors():
    with pytest.raises(InvalidInputError):
        covariance_from_embeddings(np.zeros((0, 3)), np.zeros(3))
    with pytest.raises(InvalidInputError):
        covariance_from_embeddings(np.zeros((2, 3)), np.zeros(2))


def test_sample_gaussian_degenerate_and_empty():
    rng = np.random.default_rng(0)
    mean = np.array([1.0, -2.0])
    s = sample_gaussian(mean, CholFactor(np.zeros((2, 2))), 5, rng)
    assert np.array_equal(s, np.tile(mean, (5, 1)))
    assert sample_gaussian(mean, CholFactor(np.eye(2)), 0, rng).shape == (0, 2)


def test_sample_gaussian_monte_carlo_covariance():
    rng = np.random.default_rng(1234)
    chol = cholesky_decompose(np.diag([1.0, 4.0]))
    s = sample_gaussian(np.zeros(2), chol, 100_000, rng)
    cov = np.cov(s.T, bias=True)
    np.testing.assert_allclose(np.diag(cov), [1.0, 4.0], rtol=0.05)


def test_sample_gaussian_deterministic():
    chol = CholFactor(np.eye(3))
    a = sample_gaussian(np.zeros(3), chol, 10, np.random.default_rng(7))
    b = sample_gaussian(np.zeros(3), chol, 10, np.random.default_rng(7))
    assert np.array_equal(a, b)
