import numpy as np
import pytest

from fedlora.errors import BadRange, NotUnit, RankTooLarge, ZeroVector
from fedlora.linalg import (
    angle_distance,
    derive_rng,
    frob_norm,
    gaussian_matrix,
    make_rng,
    projector_orth,
    truncated_svd,
    unit_normalize,
)


def test_gaussian_matrix_deterministic():
    a = gaussian_matrix(make_rng(7), 2, 2)
    b = gaussian_matrix(make_rng(7), 2, 2)
    assert np.array_equal(a, b)


def test_gaussian_matrix_moments():
    # 3-sigma brackets at n=1000: sd(mean) = 1/sqrt(n), sd(var) ~ sqrt(2/n).
    x = gaussian_matrix(make_rng(7), 1000, 1)
    assert abs(x.mean()) <= 3 / np.sqrt(1000)
    assert abs(x.var() - 1.0) <= 3 * np.sqrt(2 / 1000)


def test_gaussian_matrix_bad_dims():
    with pytest.raises(BadRange):
        gaussian_matrix(make_rng(7), 0, 2)


def test_derive_rng_paths_independent():
    a = derive_rng(3, 1, 0).standard_normal(4)
    b = derive_rng(3, 1, 1).standard_normal(4)
    c = derive_rng(3, 1, 0).standard_normal(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, c)


def test_frob_norm():
    assert frob_norm(np.eye(2)) == pytest.approx(np.sqrt(2))
    assert frob_norm(np.zeros((3, 3))) == 0.0
    assert frob_norm(np.array([[3.0, 4.0]])) == pytest.approx(5.0)


def test_unit_normalize():
    v = unit_normalize(np.array([3.0, 4.0]))
    assert np.allclose(v, [0.6, 0.8], atol=1e-12)
    e1 = np.array([1.0, 0.0, 0.0])
    assert np.array_equal(unit_normalize(e1), e1)
    with pytest.raises(ZeroVector):
        unit_normalize(np.zeros(2))


def test_angle_distance_basic():
    e1 = np.array([1.0, 0.0])
    e2 = np.array([0.0, 1.0])
    assert angle_distance(e1, e1) == pytest.approx(0.0, abs=1e-12)
    assert angle_distance(e1, e2) == pytest.approx(1.0, abs=1e-12)
    mid = np.array([1.0, 1.0]) / np.sqrt(2)
    assert angle_distance(e1, mid) == pytest.approx(1 / np.sqrt(2), abs=1e-12)


def test_angle_distance_symmetric():
    rng = make_rng(11)
    for _ in range(100):
        u = unit_normalize(rng.standard_normal(6))
        v = unit_normalize(rng.standard_normal(6))
        assert abs(angle_distance(u, v) - angle_distance(v, u)) <= 1e-12


def test_angle_distance_requires_unit():
    with pytest.raises(NotUnit):
        angle_distance(np.array([2.0, 0.0]), np.array([1.0, 0.0]))


def test_projection_pythagoras():
    rng = make_rng(13)
    for _ in range(50):
        u = unit_normalize(rng.standard_normal(5))
        v = rng.standard_normal(5)
        ortho = np.linalg.norm(v - u * (u @ v)) ** 2
        assert ortho + (u @ v) ** 2 == pytest.approx(np.linalg.norm(v) ** 2, abs=1e-10)


def test_projector_orth():
    e1 = np.array([1.0, 0.0])
    assert np.allclose(projector_orth(e1), [[0, 0], [0, 1]], atol=1e-15)
    rng = make_rng(17)
    u = unit_normalize(rng.standard_normal(6))
    p = projector_orth(u)
    assert np.linalg.norm(p @ u) <= 1e-12
    assert np.max(np.abs(p @ p - p)) <= 1e-10
    v = rng.standard_normal(6)
    v_perp = unit_normalize(v - u * (u @ v))
    assert np.allclose(p @ v_perp, v_perp, atol=1e-12)
    with pytest.raises(NotUnit):
        projector_orth(np.array([0.5, 0.5]))


def test_truncated_svd_rank_one():
    rng = make_rng(19)
    m = np.outer(rng.standard_normal(6), rng.standard_normal(4))
    u, s, v = truncated_svd(m, 1)
    resid = np.linalg.norm(m - (u * s) @ v.T)
    assert resid <= 1e-8 * np.linalg.norm(m)


def test_truncated_svd_identity_residual():
    u, s, v = truncated_svd(np.eye(4), 2)
    resid = np.linalg.norm(np.eye(4) - (u * s) @ v.T)
    assert resid == pytest.approx(np.sqrt(2), abs=1e-10)


def test_truncated_svd_exact_rank_recovery():
    rng = make_rng(23)
    m = rng.standard_normal((8, 3)) @ rng.standard_normal((3, 8))
    u, s, v = truncated_svd(m, 3)
    assert np.linalg.norm(m - (u * s) @ v.T) <= 1e-6 * np.linalg.norm(m)


def test_truncated_svd_against_lapack_oracle():
    rng = make_rng(29)
    for rows, cols, r in ((10, 7, 3), (6, 9, 2), (5, 5, 5)):
        m = rng.standard_normal((rows, cols))
        u, s, v = truncated_svd(m, r)
        s_ref = np.linalg.svd(m, compute_uv=False)
        assert np.allclose(s, s_ref[:r], atol=1e-9)
        resid = np.linalg.norm(m - (u * s) @ v.T)
        resid_ref = np.sqrt(np.sum(s_ref[r:] ** 2))
        assert resid == pytest.approx(resid_ref, abs=1e-8)
        assert np.max(np.abs(u.T @ u - np.eye(r))) <= 1e-8
        assert np.max(np.abs(v.T @ v - np.eye(r))) <= 1e-8
        assert np.all(np.diff(s) <= 1e-12)


def test_truncated_svd_sign_convention_and_determinism():
    rng = make_rng(31)
    m = rng.standard_normal((7, 7))
    u1, s1, v1 = truncated_svd(m, 3)
    u2, s2, v2 = truncated_svd(m, 3)
    assert np.array_equal(u1, u2) and np.array_equal(s1, s2) and np.array_equal(v1, v2)
    for k in range(3):
        assert u1[np.argmax(np.abs(u1[:, k])), k] >= 0


def test_truncated_svd_zero_matrix_columns_orthonormal():
    u, s, v = truncated_svd(np.zeros((5, 4)), 2)
    assert np.allclose(s, 0.0)
    assert np.max(np.abs(u.T @ u - np.eye(2))) <= 1e-10


def test_truncated_svd_rank_too_large():
    with pytest.raises(RankTooLarge):
        truncated_svd(np.eye(3), 4)
