import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from amogp.kernels import (
    OutputTaggedPoints,
    RbfParams,
    SmoothingKernelParams,
    cp_cross_cov,
    cp_gram,
    kernel_diag,
    rbf_as_smoothing,
    rbf_eval,
    rbf_gram,
)

# high-precision quadrature values, frozen
ANCHOR = 3.54490770181103205  # 2 sqrt(pi)
CROSS_0 = 1.46883609001488900  # x=0.3, x'=-0.4, (s, l) = (0.7, 0.5) and (1.3, 0.8)


def smoothing(x, scale, ls):
    k = len(ls)
    return 2.0 ** (k / 2) * scale * np.exp(-0.5 * np.sum(np.asarray(x) ** 2 / np.asarray(ls) ** 2))


def convolution(x, x2, s1, l1, s2, l2):
    """Covariance by numerically convolving two smoothing kernels.

    The SE integrand factorises over input dimensions, so a K-dimensional
    integral is a product of 1-d quadratures.
    """
    total = 0.0
    for r in range(len(s1)):
        val = 2.0 ** len(x) * s1[r] * s2[r]
        for k in range(len(x)):
            f = lambda z: np.exp(-0.5 * (x[k] - z) ** 2 / l1[r][k] ** 2 - 0.5 * (x2[k] - z) ** 2 / l2[r][k] ** 2)
            v, _ = integrate.quad(f, -np.inf, np.inf, epsabs=0, epsrel=1e-11, limit=200)
            val *= v
        total += val
    return total


def convolution_2d(x, x2, s1, l1, s2, l2):
    f = lambda z1, z0: smoothing(x - np.array([z0, z1]), s1, l1) * smoothing(x2 - np.array([z0, z1]), s2, l2)
    c = 0.5 * (x + x2)
    w = 12.0 * max(np.max(l1), np.max(l2))
    val, _ = integrate.dblquad(f, c[0] - w, c[0] + w, c[1] - w, c[1] + w, epsabs=0, epsrel=1e-10)
    return val


def test_anchor_value():
    p = SmoothingKernelParams.create(1.0, 1.0)
    assert float(cp_cross_cov(0.0, 0, 0.0, 0, p)) == pytest.approx(ANCHOR, rel=1e-12)
    assert convolution(np.zeros(1), np.zeros(1), [1.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(ANCHOR, rel=1e-9)


def test_frozen_cross_output_value():
    p = SmoothingKernelParams.create([0.7, 1.3], [0.5, 0.8], n_outputs=2)
    assert float(cp_cross_cov(0.3, 0, -0.4, 1, p)) == pytest.approx(CROSS_0, rel=1e-12)
    assert float(cp_cross_cov(-0.4, 1, 0.3, 0, p)) == pytest.approx(CROSS_0, rel=1e-12)


def test_quadrature_random_draws():
    rng = np.random.default_rng(0)
    for _ in range(100):
        K = int(rng.integers(1, 3))
        R = int(rng.integers(1, 3))
        s = rng.uniform(0.3, 2.0, (2, R))
        ls = rng.uniform(0.2, 1.5, (2, R, K))
        p = SmoothingKernelParams(jnp.log(s), jnp.log(ls))
        x, x2 = rng.uniform(-1, 1, K), rng.uniform(-1, 1, K)
        d, d2 = int(rng.integers(2)), int(rng.integers(2))
        ref = convolution(x, x2, s[d], ls[d], s[d2], ls[d2])
        assert float(cp_cross_cov(x, d, x2, d2, p)) == pytest.approx(ref, rel=1e-6)


def test_two_dimensional_convolution_without_factorising():
    rng = np.random.default_rng(5)
    for _ in range(2):
        s = rng.uniform(0.3, 2.0, 2)
        ls = rng.uniform(0.3, 1.0, (2, 2))
        p = SmoothingKernelParams(jnp.log(s)[:, None], jnp.log(ls)[:, None, :])
        x, x2 = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
        ref = convolution_2d(x, x2, s[0], ls[0], s[1], ls[1])
        assert float(cp_cross_cov(x, 0, x2, 1, p)) == pytest.approx(ref, rel=1e-6)


def test_rbf_values():
    p = RbfParams.create(1.5, 0.6)
    assert float(rbf_eval(0.2, 0.5, p)) == pytest.approx(1.5 * np.exp(-0.5 * 0.09 / 0.36), rel=1e-14)
    p2 = RbfParams.create(2.0, [0.5, 2.0], input_dim=2)
    want = 2.0 * np.exp(-0.5 * (0.25 / 0.25 + 1.0 / 4.0))
    assert float(rbf_eval([0.0, 0.0], [0.5, 1.0], p2)) == pytest.approx(want, rel=1e-14)


def test_rbf_as_smoothing_reproduces_rbf():
    p = RbfParams.create(0.8, [0.4, 1.1], input_dim=2)
    q = rbf_as_smoothing(p)
    x = np.random.default_rng(2).uniform(-1, 1, (6, 2))
    a = OutputTaggedPoints.create(x, 0)
    np.testing.assert_allclose(np.asarray(cp_gram(a, a, q)), np.asarray(rbf_gram(x, x, p)), rtol=1e-12)


def test_uncoupled_zeroes_cross_blocks():
    p = SmoothingKernelParams.create([1.0, 2.0], [0.3, 0.4], n_outputs=2)
    pts = OutputTaggedPoints.create(np.linspace(0, 1, 6), [0, 0, 0, 1, 1, 1])
    k = np.asarray(cp_gram(pts, pts, p, coupled=False))
    assert np.all(k[:3, 3:] == 0) and np.all(k[3:, :3] == 0)
    assert np.all(np.abs(np.asarray(cp_gram(pts, pts, p))[:3, 3:]) > 0)


def test_diag_matches_gram():
    p = SmoothingKernelParams.create([1.0, 2.0], [0.3, 0.4], n_outputs=2, n_latent=2)
    pts = OutputTaggedPoints.create(np.linspace(0, 1, 4), [0, 1, 0, 1])
    np.testing.assert_allclose(np.asarray(kernel_diag(pts, p)), np.diag(np.asarray(cp_gram(pts, pts, p))), rtol=1e-13)


def test_validation():
    with pytest.raises(ValueError):
        RbfParams.create(-1.0, 1.0)
    with pytest.raises(ValueError):
        SmoothingKernelParams.create(1.0, 0.0)
    p = SmoothingKernelParams.create(1.0, 1.0, n_outputs=2)
    with pytest.raises(ValueError):
        cp_gram(OutputTaggedPoints.create([0.0], 2), OutputTaggedPoints.create([0.0], 0), p)
    with pytest.raises(ValueError):
        rbf_gram(np.zeros((2, 2)), np.zeros((2, 2)), RbfParams.create())


@given(
    n=st.integers(2, 9),
    D=st.integers(1, 3),
    R=st.integers(1, 2),
    seed=st.integers(0, 2**31 - 1),
)
@settings(max_examples=25, deadline=None)
def test_cp_gram_symmetric_psd(n, D, R, seed):
    rng = np.random.default_rng(seed)
    p = SmoothingKernelParams(jnp.asarray(rng.normal(0, 0.5, (D, R))), jnp.asarray(rng.normal(-1, 0.5, (D, R, 1))))
    pts = OutputTaggedPoints.create(rng.uniform(-2, 2, n), rng.integers(0, D, n))
    k = np.asarray(cp_gram(pts, pts, p))
    np.testing.assert_allclose(k, k.T, rtol=1e-12, atol=1e-14)
    assert np.linalg.eigvalsh(k).min() >= -1e-10 * np.abs(k).max()


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 3), st.floats(0.1, 3))
@settings(max_examples=50, deadline=None)
def test_cross_cov_bounded_by_cauchy_schwarz(x, x2, l1, l2):
    p = SmoothingKernelParams.create([1.0, 0.5], [l1, l2], n_outputs=2)
    c = float(cp_cross_cov(x, 0, x2, 1, p))
    v0 = float(cp_cross_cov(x, 0, x, 0, p))
    v1 = float(cp_cross_cov(x2, 1, x2, 1, p))
    assert c**2 <= v0 * v1 * (1 + 1e-12)
