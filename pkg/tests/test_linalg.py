import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from geofp8.linalg import (
    ConvergenceError,
    DimensionError,
    as_matrix,
    make_rng,
    matvec,
    matvec_t,
    random_orthonormal,
    sample_sphere,
    spectral_norm_oracle,
)


def loop_matvec(A, x):
    y = [0.0] * len(A)
    for i, row in enumerate(A):
        for j, a in enumerate(row):
            y[i] += a * x[j]
    return np.array(y)


def test_as_matrix_validates():
    M = as_matrix([1, 2, 3, 4, 5, 6], rows=2, cols=3)
    assert M.shape == (2, 3) and M[1, 0] == 4.0
    assert not M.flags.writeable
    with pytest.raises(DimensionError):
        as_matrix([1, 2, 3], rows=2, cols=2)
    with pytest.raises(ValueError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(ValueError):
        as_matrix([[np.inf]])


def test_matvec_examples():
    assert np.array_equal(matvec(np.eye(3), np.array([1.0, 2, 3])), [1, 2, 3])
    A = np.array([[2.0, 0], [0, 1], [0, 0]])
    assert np.array_equal(matvec(A, np.ones(2)), [2, 1, 0])
    assert np.array_equal(matvec_t(np.eye(3), np.array([1.0, 2, 3])), [1, 2, 3])
    assert np.array_equal(matvec_t(A, np.ones(3)), [2, 1])


def test_matvec_matches_double_loop():
    rng = make_rng(3)
    A, x = rng.standard_normal((8, 5)), rng.standard_normal(5)
    np.testing.assert_allclose(matvec(A, x), loop_matvec(A.tolist(), x.tolist()), rtol=0, atol=1e-15)


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        matvec(np.ones((3, 2)), np.ones(3))
    with pytest.raises(DimensionError):
        matvec_t(np.ones((3, 2)), np.ones(2))


@settings(max_examples=50, deadline=None)
@given(m=st.integers(1, 12), n=st.integers(1, 12), seed=st.integers(0, 2**31))
def test_adjoint_identity(m, n, seed):
    rng = make_rng(seed)
    A, x, y = rng.standard_normal((m, n)), rng.standard_normal(n), rng.standard_normal(m)
    assert matvec(A, x) @ y == pytest.approx(x @ matvec_t(A, y), abs=1e-12)


def test_oracle_examples():
    assert spectral_norm_oracle(np.eye(4)) == pytest.approx(1.0, abs=1e-12)
    A = np.zeros((3, 2))
    A[0, 0], A[1, 1] = 3.0, 1.0
    assert spectral_norm_oracle(A) == pytest.approx(3.0, abs=1e-12)
    assert spectral_norm_oracle(np.zeros((3, 3))) == 0.0


@pytest.mark.parametrize("shape", [(32, 8), (8, 32), (20, 20), (1, 7)])
def test_oracle_matches_svd_and_transpose(shape):
    A = make_rng(11).standard_normal(shape)
    s = spectral_norm_oracle(A)
    assert s == pytest.approx(np.linalg.svd(A, compute_uv=False)[0], rel=1e-10)
    assert spectral_norm_oracle(A.T) == pytest.approx(s, rel=1e-10)


def test_oracle_handles_degenerate_top_singular_values():
    Q1 = random_orthonormal(make_rng(0), 10, 10)
    Q2 = random_orthonormal(make_rng(1), 10, 10)
    A = Q1 @ np.diag([5.0, 5.0, 5.0, 1, 1, 0.5, 0, 0, 0, 0]) @ Q2.T
    assert spectral_norm_oracle(A) == pytest.approx(5.0, rel=1e-12)


def test_oracle_cap_raises_with_estimate():
    A = make_rng(2).standard_normal((6, 6))
    with pytest.raises(ConvergenceError) as info:
        spectral_norm_oracle(A, max_iter=1)
    assert info.value.estimate > 0


def test_sample_sphere_unit_norm_and_determinism():
    u = sample_sphere(make_rng(5), 17)
    assert np.linalg.norm(u) == pytest.approx(1.0, abs=1e-12)
    U = sample_sphere(make_rng(5), 17, 100)
    np.testing.assert_allclose(np.linalg.norm(U, axis=1), 1.0, atol=1e-12)
    assert np.array_equal(sample_sphere(make_rng(9), 4, 3), sample_sphere(make_rng(9), 4, 3))
    assert sample_sphere(make_rng(0), 1)[0] in (-1.0, 1.0)


def test_sample_sphere_symmetry_d2():
    U = sample_sphere(make_rng(21), 2, 100_000)
    assert abs(U[:, 0].mean()) < 0.01


@pytest.mark.slow
def test_sample_sphere_projection_mean_and_beta_fit():
    d, k, n = 1600, 64, 100_000
    rng = make_rng(1)
    V = random_orthonormal(rng, d, k)
    stat = np.concatenate([np.sum((sample_sphere(rng, d, 5000) @ V) ** 2, axis=1) for _ in range(n // 5000)])
    assert stat.mean() == pytest.approx(0.04, abs=0.002)
    assert stats.kstest(stat, stats.beta(k / 2, (d - k) / 2).cdf).pvalue > 0.01


def test_random_orthonormal():
    V = random_orthonormal(make_rng(4), 12, 5)
    np.testing.assert_allclose(V.T @ V, np.eye(5), atol=1e-12)
