"""Kernel expectations under Gaussian input uncertainty (Psi-statistics).

For inputs a_n ~ N(mu_n, diag(s_n)) and inducing inputs Z these are

    psi0 = E[tr K_ff],   psi1 = E[K_fu],   psi2 = E[K_uf K_fu],

available in closed form for both the CP kernel and its single-output RBF
special case. The expressions are written in terms of input *variances*
rather than precisions so that s = 0 (exact inputs) is handled without
special cases.
"""

from __future__ import annotations

from functools import partial
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from .kernels import (
    OutputTaggedPoints,
    RbfParams,
    SmoothingKernelParams,
    cp_gram,
    cp_pair_terms,
    kernel_diag,
    rbf_gram,
)


class GaussianMoments(NamedTuple):
    """Per-point means and (diagonal) variances."""

    mean: jnp.ndarray
    var: jnp.ndarray

    @classmethod
    def exact(cls, x):
        x = jnp.asarray(x, dtype=float)
        return cls(x, jnp.zeros_like(x))

    @property
    def size(self):
        return self.mean.shape[0]


class PsiTriple(NamedTuple):
    psi0: jnp.ndarray
    psi1: jnp.ndarray
    psi2: jnp.ndarray


def _as_2d(x):
    x = jnp.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def _validate_moments(q):
    if jnp.shape(q.mean) != jnp.shape(q.var):
        raise ValueError("mean and variance arrays must have equal shapes")
    if not isinstance(q.var, jax.core.Tracer) and np.any(np.asarray(q.var) < 0):
        raise ValueError("input variances must be non-negative")


def _psi1(mu, s, z, amp, lhat2):
    # mu, s: (N, K); z: (M, K); amp: (N, M, R); lhat2: (N, M, R, K).
    # The leading axis of amp and lhat2 may be 1 when all points share one
    # output, which keeps the kernel terms off the point axis.
    denom = lhat2 + s[:, None, None, :]
    diff2 = (mu[:, None, None, :] - z[None, :, None, :]) ** 2
    factor = jnp.prod(jnp.sqrt(lhat2 / denom), axis=-1) * jnp.exp(-0.5 * jnp.sum(diff2 / denom, axis=-1))
    return jnp.sum(amp * factor, axis=-1)


def _phi_points(mu, s, z, amp, lhat2):
    """Per-point E[k(a_n, z_i) k(a_n, z_j)], shape (N, M, M)."""
    R = amp.shape[-1]
    out = 0.0
    zi = z[None, :, None, :]
    zj = z[None, None, :, :]
    sn = s[:, None, None, :]
    mun = mu[:, None, None, :]
    for r in range(R):
        for r2 in range(R):
            li = lhat2[:, :, None, r, :]
            lj = lhat2[:, None, :, r2, :]
            lsum = li + lj
            prod = li * lj
            denom = prod + sn * lsum
            centre = (zi * lj + zj * li) / lsum
            expo = (zi - zj) ** 2 / lsum + lsum * (mun - centre) ** 2 / denom
            factor = jnp.prod(jnp.sqrt(prod / denom), axis=-1) * jnp.exp(-0.5 * jnp.sum(expo, axis=-1))
            out = out + amp[:, :, None, r] * amp[:, None, :, r2] * factor
    return out


def _cp_terms(outputs, Z: OutputTaggedPoints, p: SmoothingKernelParams):
    return cp_pair_terms(outputs[:, None], Z.output_index[None, :], p)


def _mask_uncoupled(amp, outputs, Z, coupled):
    if coupled:
        return amp
    same = outputs[:, None] == Z.output_index[None, :]
    return jnp.where(same[..., None], amp, 0.0)


def psi_stats_from_terms(q: GaussianMoments, z, amp, lhat2, weights=None):
    mu, s = _as_2d(q.mean), _as_2d(q.var)
    z = _as_2d(z)
    psi1 = _psi1(mu, s, z, amp, lhat2)
    phi_n = _phi_points(mu, s, z, amp, lhat2)
    if weights is None:
        psi2 = jnp.sum(phi_n, axis=0)
    else:
        psi2 = jnp.einsum("n,nij->ij", weights, phi_n)
    return psi1, psi2


def output_terms(outputs, n, Z: OutputTaggedPoints, p: SmoothingKernelParams, coupled):
    """CP prefactors and lengthscales between points and inducing inputs.

    A scalar ``outputs`` yields terms with a leading axis of length 1.
    """
    outputs = jnp.asarray(outputs, dtype=jnp.int32)
    tags = jnp.reshape(outputs, (1,)) if outputs.ndim == 0 else jnp.broadcast_to(outputs, (n,))
    amp, lhat2 = _cp_terms(tags, Z, p)
    return _mask_uncoupled(amp, tags, Z, coupled), lhat2


def psi_cp(q: GaussianMoments, Z: OutputTaggedPoints, p: SmoothingKernelParams, outputs=0, coupled=True, weights=None):
    """Closed-form Psi-statistics of the convolution-process kernel.

    ``outputs`` tags each point of ``q`` with its output index (a scalar
    tags them all). ``weights`` (optional, per point) scales each point's
    contribution to psi0 and psi2, which is how minibatch rescaling enters.
    """
    _validate_moments(q)
    n = q.mean.shape[0]
    amp, lhat2 = output_terms(outputs, n, Z, p, coupled)
    tags = jnp.broadcast_to(jnp.asarray(outputs, dtype=jnp.int32), (n,))
    diag = kernel_diag(OutputTaggedPoints(_as_2d(q.mean), tags), p)
    psi0 = jnp.sum(diag) if weights is None else jnp.sum(weights * diag)
    psi1, psi2 = psi_stats_from_terms(q, Z.coords, amp, lhat2, weights)
    return PsiTriple(psi0, psi1, psi2)


def _rbf_terms(n, m, p: RbfParams):
    K = p.log_lengthscales.shape[0]
    amp = jnp.broadcast_to(p.variance, (1, m, 1))
    lhat2 = jnp.broadcast_to(p.lengthscales**2, (1, m, 1, K))
    return amp, lhat2


def psi_rbf(q: GaussianMoments, Z, p: RbfParams, weights=None):
    """Closed-form Psi-statistics of the RBF kernel."""
    _validate_moments(q)
    z = _as_2d(Z.coords if isinstance(Z, OutputTaggedPoints) else Z)
    n = q.mean.shape[0]
    amp, lhat2 = _rbf_terms(n, z.shape[0], p)
    psi0 = p.variance * (n if weights is None else jnp.sum(weights))
    psi1, psi2 = psi_stats_from_terms(q, z, amp, lhat2, weights)
    return PsiTriple(psi0, psi1, psi2)


def rbf_input_cross_moment(q: GaussianMoments, Z, p: RbfParams, psi1=None):
    """E[(a_n - mu_n) k(a_n, z_m)] for scalar inputs, shape (N, M).

    Needed when a layer with identity mean function receives uncertain
    inputs: the output then carries a covariance between a_n and the GP part.
    """
    z = _as_2d(Z)[:, 0]
    mu = jnp.reshape(q.mean, (-1,))
    s = jnp.reshape(q.var, (-1,))
    if psi1 is None:
        psi1 = psi_rbf(q, Z, p).psi1
    l2 = p.lengthscales[0] ** 2
    return psi1 * s[:, None] * (z[None, :] - mu[:, None]) / (l2 + s[:, None])


@partial(jax.jit, static_argnums=(5,))
def _mc_moments(a, tags, zc, ztags, kernel, coupled):
    """Per-draw tr K_ff, K_fu and K_uf K_fu for draws ``a`` of shape (C, N, K)."""
    c, n, k = a.shape
    flat = a.reshape(c * n, k)
    if isinstance(kernel, SmoothingKernelParams):
        pts = OutputTaggedPoints(flat, jnp.tile(tags, c))
        kfu = cp_gram(pts, OutputTaggedPoints(zc, ztags), kernel, coupled=coupled).reshape(c, n, -1)
        kff = kernel_diag(pts, kernel).reshape(c, n).sum(axis=1)
    else:
        kfu = rbf_gram(flat, zc, kernel).reshape(c, n, -1)
        kff = jnp.full((c,), kernel.variance * n)
    return kff, kfu, jnp.einsum("cni,cnj->cij", kfu, kfu)


def mc_psi_oracle(q: GaussianMoments, Z, kernel, n_samples, seed, outputs=0, coupled=True, chunk=20000):
    """Monte-Carlo estimates of the Psi-statistics and their standard errors.

    Samples a ~ N(mean, diag(var)) and averages tr K_ff, K_fu and K_uf K_fu.
    Returns ``(estimate, standard_error)``, both :class:`PsiTriple`.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    mean = np.asarray(_as_2d(q.mean))
    var = np.asarray(_as_2d(q.var))
    if np.any(var < 0):
        raise ValueError("input variances must be non-negative")
    n, k = mean.shape
    rng = np.random.default_rng(seed)
    if isinstance(kernel, SmoothingKernelParams):
        tags = jnp.asarray(np.broadcast_to(np.asarray(outputs, dtype=np.int32), (n,)))
        zc, ztags = Z.coords, Z.output_index
    else:
        tags = ztags = None
        zc = jnp.asarray(_as_2d(Z.coords if isinstance(Z, OutputTaggedPoints) else Z))

    # Accumulate around the first draw: exact for degenerate inputs and
    # numerically kinder than raw second moments.
    shift, sums, sq = None, None, None
    done = 0
    while done < n_samples:
        c = min(chunk, n_samples - done)
        a = mean[None] + np.sqrt(var)[None] * rng.standard_normal((c, n, k))
        vals = [np.asarray(v) for v in _mc_moments(jnp.asarray(a), tags, zc, ztags, kernel, coupled)]
        if shift is None:
            shift = [v[0].copy() for v in vals]
            sums = [np.zeros_like(v[0]) for v in vals]
            sq = [np.zeros_like(v[0]) for v in vals]
        for i, v in enumerate(vals):
            dev = v - shift[i]
            sums[i] = sums[i] + dev.sum(axis=0)
            sq[i] = sq[i] + (dev**2).sum(axis=0)
        done += c

    est, err = [], []
    for i in range(3):
        dmean = sums[i] / n_samples
        var_hat = np.maximum(sq[i] / n_samples - dmean**2, 0.0) * n_samples / (n_samples - 1)
        est.append(shift[i] + dmean)
        err.append(np.sqrt(var_hat / n_samples))
    return PsiTriple(*est), PsiTriple(*err)
