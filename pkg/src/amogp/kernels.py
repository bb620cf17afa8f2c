"""Covariance functions.

Two kernels are used by the model: a squared-exponential (RBF) kernel for the
per-output alignment and warping layers, and the convolution-process (CP)
kernel of the shared layer. The CP kernel arises from convolving independent
white-noise processes with output-specific SE smoothing kernels

    T_{d,r}(x) = 2^{K/2} * sigma_{d,r} * exp(-0.5 * sum_k x_k^2 / l_{d,r,k}^2),

which gives, with l_hat^2 = l_{d,r,k}^2 + l_{d',r,k}^2,

    cov(f_d(x), f_d'(x')) = sum_r (2 pi)^{K/2} sigma_{d,r} sigma_{d',r}
        * prod_k (2 l_{d,r,k} l_{d',r,k} / l_hat_k)
        * exp(-0.5 * sum_k (x_k - x'_k)^2 / l_hat_k^2).

For d = d' the prefactor is (2 pi)^{K/2} sigma^2 prod_k l_hat_k. All
parameters are stored as logarithms.
"""

from __future__ import annotations

from typing import NamedTuple, Union

import jax
import jax.numpy as jnp
import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class RbfParams(NamedTuple):
    log_variance: jnp.ndarray
    log_lengthscales: jnp.ndarray

    @classmethod
    def create(cls, variance=1.0, lengthscales=1.0, input_dim=1):
        ls = np.broadcast_to(np.asarray(lengthscales, dtype=float), (input_dim,))
        if variance <= 0 or np.any(ls <= 0):
            raise ValueError("RBF variance and lengthscales must be positive")
        return cls(jnp.asarray(np.log(variance)), jnp.asarray(np.log(ls)))

    @property
    def variance(self):
        return jnp.exp(self.log_variance)

    @property
    def lengthscales(self):
        return jnp.exp(self.log_lengthscales)


class SmoothingKernelParams(NamedTuple):
    """Per (output, latent process) smoothing-kernel scales and lengthscales.

    ``log_scales`` has shape (D, R); ``log_lengthscales`` has shape (D, R, K).
    """

    log_scales: jnp.ndarray
    log_lengthscales: jnp.ndarray

    @classmethod
    def create(cls, scales=1.0, lengthscales=1.0, n_outputs=1, n_latent=1, input_dim=1):
        # 1-d inputs are read as one value per output
        s = np.asarray(scales, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        s = np.broadcast_to(s, (n_outputs, n_latent))
        ls = np.asarray(lengthscales, dtype=float)
        if ls.ndim == 1:
            ls = ls[:, None, None]
        ls = np.broadcast_to(ls, (n_outputs, n_latent, input_dim))
        if np.any(s <= 0) or np.any(ls <= 0):
            raise ValueError("smoothing kernel scales and lengthscales must be positive")
        return cls(jnp.asarray(np.log(s)), jnp.asarray(np.log(ls)))

    @property
    def scales(self):
        return jnp.exp(self.log_scales)

    @property
    def lengthscales(self):
        return jnp.exp(self.log_lengthscales)

    @property
    def n_outputs(self):
        return self.log_scales.shape[0]

    @property
    def n_latent(self):
        return self.log_scales.shape[1]

    @property
    def input_dim(self):
        return self.log_lengthscales.shape[2]


class OutputTaggedPoints(NamedTuple):
    coords: jnp.ndarray
    output_index: jnp.ndarray

    @classmethod
    def create(cls, coords, output_index):
        coords = np.asarray(coords, dtype=float)
        if coords.ndim == 1:
            coords = coords[:, None]
        idx = np.broadcast_to(np.asarray(output_index, dtype=np.int32), (coords.shape[0],))
        return cls(jnp.asarray(coords), jnp.asarray(idx))

    @property
    def size(self):
        return self.coords.shape[0]


Kernel = Union[RbfParams, SmoothingKernelParams]


def _as_2d(x):
    x = jnp.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def rbf_gram(x, y, p: RbfParams):
    x, y = _as_2d(x), _as_2d(y)
    if x.shape[1] != p.log_lengthscales.shape[0] or y.shape[1] != x.shape[1]:
        raise ValueError("input dimension does not match the number of lengthscales")
    ls = p.lengthscales
    diff = (x[:, None, :] - y[None, :, :]) / ls
    return p.variance * jnp.exp(-0.5 * jnp.sum(diff**2, axis=-1))


def rbf_eval(x, x2, p: RbfParams):
    """variance * exp(-0.5 * sum_k (x_k - x2_k)^2 / l_k^2)."""
    x = jnp.atleast_1d(jnp.asarray(x, dtype=float))
    x2 = jnp.atleast_1d(jnp.asarray(x2, dtype=float))
    return rbf_gram(x[None, :], x2[None, :], p)[0, 0]


def cp_pair_terms(d1, d2, p: SmoothingKernelParams):
    """Prefactors and combined squared lengthscales for output pairs.

    ``d1`` and ``d2`` are broadcastable integer arrays. Returns ``amp`` with
    shape (..., R) and ``lhat2`` with shape (..., R, K).
    """
    K = p.input_dim
    s1, s2 = p.scales[d1], p.scales[d2]
    l1, l2 = p.lengthscales[d1], p.lengthscales[d2]
    lhat2 = l1**2 + l2**2
    amp = jnp.exp(0.5 * K * LOG_2PI) * s1 * s2 * jnp.prod(2.0 * l1 * l2 / jnp.sqrt(lhat2), axis=-1)
    return amp, lhat2


def _check_outputs(idx, n_outputs):
    if not isinstance(idx, jax.core.Tracer):  # concrete values only
        idx_np = np.asarray(idx)
        if idx_np.size and (idx_np.min() < 0 or idx_np.max() >= n_outputs):
            raise ValueError(f"output index out of range [0, {n_outputs})")


def cp_gram(a: OutputTaggedPoints, b: OutputTaggedPoints, p: SmoothingKernelParams, coupled=True):
    """Cross-covariance matrix of the convolution-process kernel.

    With ``coupled=False`` all cross-output entries are zero, which turns the
    shared layer into D independent GPs.
    """
    _check_outputs(a.output_index, p.n_outputs)
    _check_outputs(b.output_index, p.n_outputs)
    xa, xb = _as_2d(a.coords), _as_2d(b.coords)
    if xa.shape[1] != p.input_dim or xb.shape[1] != p.input_dim:
        raise ValueError("input dimension does not match the smoothing kernel")
    amp, lhat2 = cp_pair_terms(a.output_index[:, None], b.output_index[None, :], p)
    diff2 = (xa[:, None, None, :] - xb[None, :, None, :]) ** 2
    k = jnp.sum(amp * jnp.exp(-0.5 * jnp.sum(diff2 / lhat2, axis=-1)), axis=-1)
    if not coupled:
        k = jnp.where(a.output_index[:, None] == b.output_index[None, :], k, 0.0)
    return k


def cp_cross_cov(x, d, x2, d2, p: SmoothingKernelParams):
    """Covariance between f_d(x) and f_d2(x2)."""
    x = jnp.atleast_1d(jnp.asarray(x, dtype=float))
    x2 = jnp.atleast_1d(jnp.asarray(x2, dtype=float))
    a = OutputTaggedPoints(x[None, :], jnp.asarray([d]))
    b = OutputTaggedPoints(x2[None, :], jnp.asarray([d2]))
    return cp_gram(a, b, p)[0, 0]


def gram(points_a, points_b, kernel: Kernel, coupled=True):
    """Gram matrix between two point sets under either kernel."""
    if isinstance(kernel, SmoothingKernelParams):
        return cp_gram(points_a, points_b, kernel, coupled=coupled)
    xa = points_a.coords if isinstance(points_a, OutputTaggedPoints) else points_a
    xb = points_b.coords if isinstance(points_b, OutputTaggedPoints) else points_b
    return rbf_gram(xa, xb, kernel)


def kernel_diag(points, kernel: Kernel):
    if isinstance(kernel, SmoothingKernelParams):
        amp, _ = cp_pair_terms(points.output_index, points.output_index, kernel)
        return jnp.sum(amp, axis=-1)
    x = points.coords if isinstance(points, OutputTaggedPoints) else _as_2d(points)
    return jnp.full((x.shape[0],), kernel.variance)


def rbf_as_smoothing(p: RbfParams) -> SmoothingKernelParams:
    """Single-output smoothing kernel whose CP covariance equals ``p``."""
    ls = p.lengthscales
    K = ls.shape[0]
    log_scale = 0.5 * (p.log_variance - 0.5 * K * LOG_2PI - jnp.sum(jnp.log(ls)))
    return SmoothingKernelParams(
        jnp.reshape(log_scale, (1, 1)),
        jnp.reshape(jnp.log(ls / jnp.sqrt(2.0)), (1, 1, K)),
    )
