import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from nonlocal_hom.kernel import (
    Kernel,
    NotCertifiableError,
    ahom_matrix,
    anorm_p,
    from_config,
    gaussian,
    indicator_ball,
    moment,
    polynomial_decay,
    tail_moment,
    truncate,
)


def zero_kernel(dim=1):
    return Kernel(dim=dim, func=lambda x: np.zeros(np.shape(x)[:-1]), support_radius=1.0)


# --- construction invariants


def test_sign_changing_kernel_rejected():
    with pytest.raises(ValueError, match="sign-changing"):
        Kernel(dim=1, func=lambda x: np.cos(3 * x[..., 0]), support_radius=2.0)


def test_support_is_enforced():
    k = Kernel(dim=2, func=lambda x: np.ones(x.shape[:-1]), support_radius=0.5)
    xi = np.array([[0.1, 0.1], [0.6, 0.0], [0.0, -0.51]])
    assert k(xi).tolist() == [1.0, 0.0, 0.0]


@pytest.mark.parametrize("factory", [indicator_ball, gaussian, polynomial_decay])
def test_builtin_kernels_are_radial(factory):
    k = factory(2)
    rng = np.random.default_rng(1)
    xi = rng.normal(size=(200, 2))
    th = rng.uniform(0, 2 * np.pi, 200)
    rot = np.stack([np.cos(th) * xi[:, 0] - np.sin(th) * xi[:, 1], np.sin(th) * xi[:, 0] + np.cos(th) * xi[:, 1]], -1)
    np.testing.assert_allclose(k(xi), k(rot), rtol=1e-12)


def test_unknown_kernel_lists_catalog():
    with pytest.raises(ValueError, match="available"):
        from_config("box", 1)


# --- moment


def test_moment_zero_kernel():
    assert moment(zero_kernel(), 2) == 0.0


def test_moment_indicator_1d():
    # int_{-1}^{1} (1 + xi^2) = 8/3
    assert moment(indicator_ball(1), 2) == pytest.approx(8 / 3, rel=1e-4)


def test_moment_indicator_2d():
    # polar: pi + 2 pi int_0^1 r^3 dr = 3 pi / 2
    assert moment(indicator_ball(2), 2) == pytest.approx(1.5 * math.pi, rel=1e-4)


def test_moment_not_certifiable():
    k = Kernel(dim=1, func=lambda x: np.exp(-np.abs(x[..., 0])))
    with pytest.raises(NotCertifiableError, match="moment not certifiable"):
        moment(k, 2)


def test_heavy_tail_not_certifiable():
    # decay exponent 3 is not above p + d = 3
    with pytest.raises(NotCertifiableError):
        moment(polynomial_decay(1, exponent=3.0), 2)


@pytest.mark.parametrize("dim", [1, 2])
@pytest.mark.parametrize("factory", [indicator_ball, gaussian, polynomial_decay])
def test_quadrature_halving_self_test(factory, dim):
    coarse = moment(factory(dim), 2)
    fine = moment(factory(dim, quadrature_step=5e-3), 2)
    assert abs(coarse / fine - 1) < 1e-4


# --- tail_moment


@pytest.mark.parametrize("p", [1, 2, 3.5])
def test_tail_empty_beyond_support(p):
    assert tail_moment(indicator_ball(1), p, 1.0) == 0.0


def test_tail_indicator():
    # 2 int_{1/2}^1 xi^2 = 7/12
    assert tail_moment(indicator_ball(1), 2, 0.5) == pytest.approx(7 / 12, rel=1e-4)


def test_tail_polynomial_decay_against_adaptive_quadrature():
    k = polynomial_decay(1, exponent=5.0)
    # independent oracle: adaptive quadrature on doubling intervals
    total, a = 0.0, 10.0
    while True:
        piece, _ = integrate.quad(lambda s: s**2 * (1 + s) ** -5, a, 2 * a)
        total += piece
        if piece < 1e-14 * total:
            break
        a *= 2
    oracle = 2 * total
    val = tail_moment(k, 2, 10.0)
    assert val <= oracle * (1 + 1e-6)
    assert val == pytest.approx(oracle, rel=1e-4)


def test_tail_requires_positive_radius():
    with pytest.raises(ValueError):
        tail_moment(indicator_ball(1), 2, 0.0)


# --- truncate


def test_truncate_indicator():
    k = truncate(indicator_ball(2, radius=2.0), 1.0)
    ref = indicator_ball(2, radius=1.0)
    xi = np.random.default_rng(0).uniform(-2.5, 2.5, (2000, 2))
    np.testing.assert_array_equal(k(xi), ref(xi))


def test_truncate_beyond_support_is_identity():
    k = indicator_ball(1)
    assert truncate(k, 1.0) is k
    assert truncate(k, 5.0) is k


def test_truncated_moments_increase():
    k = polynomial_decay(1, exponent=5.0)
    vals = [moment(truncate(k, T), 2) for T in (1.0, 2.0, 4.0, 8.0, 16.0)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < moment(k, 2)


# --- anorm_p and ahom


def test_anorm_zero():
    assert anorm_p(indicator_ball(2), [0.0, 0.0], 3) == 0.0


@pytest.mark.parametrize("p", [2.0, 3.0, 4.0])
@pytest.mark.parametrize("M", [-2.0, 0.5, 1.5])
def test_anorm_1d_factor(p, M):
    assert anorm_p(indicator_ball(1), [M], p) == pytest.approx(2 / (p + 1) * abs(M) ** p, rel=1e-4)


def test_anorm_2d_indicator():
    assert anorm_p(indicator_ball(2), [1.0, 0.0], 2) == pytest.approx(math.pi / 4, rel=1e-4)


def test_ahom_zero_kernel():
    np.testing.assert_array_equal(ahom_matrix(zero_kernel(2)), np.zeros((2, 2)))


def test_ahom_indicator():
    np.testing.assert_allclose(ahom_matrix(indicator_ball(1)), [[2 / 3]], rtol=1e-4)
    np.testing.assert_allclose(ahom_matrix(indicator_ball(2)), math.pi / 4 * np.eye(2), rtol=1e-4, atol=1e-12)


@pytest.mark.parametrize("factory", [indicator_ball, gaussian])
def test_ahom_is_half_hessian(factory):
    k = factory(2, quadrature_step=2e-2)
    A = ahom_matrix(k)
    f = lambda z: anorm_p(k, z, 2)
    h = 1e-2
    H = np.empty((2, 2))
    E = np.eye(2)
    for i in range(2):
        for j in range(2):
            H[i, j] = (f(h * (E[i] + E[j])) - f(h * (E[i] - E[j])) - f(h * (E[j] - E[i])) + f(-h * (E[i] + E[j]))) / (4 * h * h)
    np.testing.assert_allclose(A, H / 2, rtol=1e-5, atol=1e-10)


_K2 = indicator_ball(2, quadrature_step=2e-2)
vec = st.lists(st.floats(-3, 3, allow_nan=False), min_size=2, max_size=2)


@settings(max_examples=25, deadline=None)
@given(vec, vec, st.sampled_from([2.0, 3.0, 4.0]))
def test_anorm_midpoint_convex(z1, z2, p):
    mid = anorm_p(_K2, 0.5 * (np.array(z1) + np.array(z2)), p)
    assert mid <= 0.5 * (anorm_p(_K2, z1, p) + anorm_p(_K2, z2, p)) * (1 + 1e-12) + 1e-12


@settings(max_examples=25, deadline=None)
@given(vec.filter(lambda z: np.hypot(*z) > 1e-2), st.floats(0, 2 * np.pi))
def test_anorm_rotation_invariant(z, th):
    Q = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    a = anorm_p(_K2, z, 2)
    b = anorm_p(_K2, Q @ np.array(z), 2)
    assert b == pytest.approx(a, rel=1e-3)
