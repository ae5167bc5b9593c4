import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from olora_lab.errors import NumericError, RankError, ShapeError, SizeError
from olora_lab.linalg import as_matrix, frobenius_norm, matmul, svd_values, thin_qr


def mgs(w):
    """Modified Gram-Schmidt, used only as an independent oracle."""
    w = np.array(w, dtype=np.float64)
    m, n = w.shape
    q = np.zeros((m, n))
    r = np.zeros((n, n))
    v = w.copy()
    for i in range(n):
        r[i, i] = np.linalg.norm(v[:, i])
        q[:, i] = v[:, i] / r[i, i]
        for j in range(i + 1, n):
            r[i, j] = q[:, i] @ v[:, j]
            v[:, j] -= r[i, j] * q[:, i]
    return q, r


def test_matmul_identity(rng):
    m = rng.standard_normal((3, 5))
    np.testing.assert_array_equal(matmul(np.eye(3), m), m)


def test_matmul_hand_values():
    np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[5], [6]]), [[17], [39]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_as_matrix_rejects_nonfinite():
    with pytest.raises(NumericError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(ShapeError):
        as_matrix([1.0, 2.0])


def test_qr_identity():
    q, r = thin_qr(np.eye(4), 2)
    np.testing.assert_array_equal(q, np.eye(4)[:, :2])
    np.testing.assert_array_equal(r, np.eye(4)[:2, :])


def test_qr_hand_gram_schmidt():
    q, r = thin_qr(np.array([[3.0, 0.0], [4.0, 0.0]]), 1)
    np.testing.assert_allclose(q, [[0.6], [0.8]], atol=1e-15)
    np.testing.assert_allclose(r, [[5.0, 0.0]], atol=1e-15)


def test_qr_orthonormal_matches_mgs(rng):
    w = rng.standard_normal((8, 6))
    q, r = thin_qr(w, 4)
    assert np.linalg.norm(q.T @ q - np.eye(4)) <= 1e-12
    # same span and, with nonnegative diagonals, the same factors as MGS
    q_ref, r_ref = mgs(w)
    np.testing.assert_allclose(q, q_ref[:, :4], atol=1e-12)
    np.testing.assert_allclose(r[:, :4], r_ref[:4, :4], atol=1e-12)


def test_qr_prefix_of_full_factorization(rng):
    w = rng.standard_normal((7, 5))
    q_full, r_full = thin_qr(w, 5)
    for r in range(1, 5):
        q, rr = thin_qr(w, r)
        np.testing.assert_allclose(q, q_full[:, :r], atol=1e-13)
        np.testing.assert_allclose(rr, r_full[:r], atol=1e-13)


def test_qr_upper_trapezoidal_and_signs(rng):
    q, r = thin_qr(rng.standard_normal((9, 12)), 6)
    assert np.all(np.diag(r) >= 0)
    assert np.all(np.tril(r[:, :6], -1) == 0)


@pytest.mark.parametrize("r", [0, 4, -1])
def test_qr_rank_out_of_range(r):
    with pytest.raises(RankError):
        thin_qr(np.ones((3, 3)), r)


def test_qr_nonfinite():
    w = np.eye(3)
    w[1, 1] = np.inf
    with pytest.raises(NumericError):
        thin_qr(w, 1)


def test_qr_zero_column_is_skipped():
    w = np.array([[0.0, 1.0], [0.0, 2.0], [0.0, 3.0]])
    q, r = thin_qr(w, 2)
    np.testing.assert_allclose(q @ r, w, atol=1e-15)


def test_qr_deterministic(rng):
    w = rng.standard_normal((10, 7)).astype(np.float32)
    a = thin_qr(w, 5)
    b = thin_qr(w.copy(), 5)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    assert a[0].dtype == np.float32


@settings(max_examples=60, deadline=None)
@given(m=st.integers(1, 24), n=st.integers(1, 24), seed=st.integers(0, 2 ** 32 - 1),
       data=st.data())
def test_qr_properties(m, n, seed, data):
    w = np.random.default_rng(seed).standard_normal((m, n))
    r = data.draw(st.integers(1, min(m, n)))
    q, rr = thin_qr(w, r)
    assert q.shape == (m, r) and rr.shape == (r, n)
    assert np.linalg.norm(q.T @ q - np.eye(r)) <= 1e-12
    qf, rf = thin_qr(w, min(m, n))
    assert frobenius_norm(w - qf @ rf) <= 1e-12 * frobenius_norm(w)
    # spectrum transport: q has orthonormal columns
    np.testing.assert_allclose(svd_values(q @ rr)[:r], svd_values(rr), atol=1e-10)


def test_svd_diag_and_zero():
    np.testing.assert_allclose(svd_values(np.diag([3.0, 1.0, 2.0])), [3, 2, 1])
    np.testing.assert_array_equal(svd_values(np.zeros((2, 2))), [0, 0])


def test_svd_matches_eigen_oracle(rng):
    m = rng.standard_normal((6, 4))
    oracle = np.sqrt(np.clip(np.linalg.eigvalsh(m.T @ m), 0, None))[::-1]
    np.testing.assert_allclose(svd_values(m), oracle, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 40), n=st.integers(1, 40), seed=st.integers(0, 2 ** 32 - 1))
def test_svd_properties(m, n, seed):
    a = np.random.default_rng(seed).standard_normal((m, n))
    s = svd_values(a)
    assert len(s) == min(m, n)
    assert np.all(s >= 0) and np.all(np.diff(s) <= 0)
    small = a.T @ a if m >= n else a @ a.T
    oracle = np.sqrt(np.clip(np.linalg.eigvalsh(small), 0, None))[::-1]
    np.testing.assert_allclose(s, oracle, atol=1e-8 * max(1.0, oracle[0]))


def test_svd_size_limit():
    with pytest.raises(SizeError):
        svd_values(np.zeros((257, 300)))


def test_frobenius():
    assert frobenius_norm(np.zeros((3, 3))) == 0
    assert frobenius_norm(np.eye(3)) == pytest.approx(np.sqrt(3))
    assert frobenius_norm([[3.0, 4.0]]) == 5.0
