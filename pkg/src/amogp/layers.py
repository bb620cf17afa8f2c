"""A single sparse variational GP layer.

Each layer owns inducing inputs ``Z`` and a Gaussian ``q(u) = N(m, S)`` with
``S = L L^T`` held through its lower-triangular factor. The prior over the
inducing outputs is ``N(h(Z), K_uu)`` where ``h`` is the layer's mean
function, so identity-mean layers need no special kernel code.

Inputs to a layer are either exact points (plain arrays) or
:class:`~amogp.psi.GaussianMoments`; uncertain inputs are integrated out
through the Psi-statistics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import jax
import jax.numpy as jnp
import numpy as np

from .kernels import (
    OutputTaggedPoints,
    RbfParams,
    SmoothingKernelParams,
    gram,
    kernel_diag,
)
from .linalg import DEFAULT_JITTER, chol_logdet, chol_solve, robust_cholesky, tri_solve
from .psi import GaussianMoments, psi_cp, psi_rbf, rbf_input_cross_moment
from .psi import _as_2d, _phi_points, _rbf_terms, output_terms

LOG_2PI = float(np.log(2.0 * np.pi))


class InducingSet(NamedTuple):
    """Inducing inputs and the variational distribution q(u) = N(mean, S).

    ``Z`` is an (M, K) array, or :class:`OutputTaggedPoints` for the shared
    layer. Only the strictly lower part of ``chol_offdiag`` is used; the
    diagonal of the factor is ``exp(chol_logdiag)``.
    """

    Z: object
    mean: jnp.ndarray
    chol_offdiag: jnp.ndarray
    chol_logdiag: jnp.ndarray

    @classmethod
    def create(cls, Z, mean, S=None, S_factor=None):
        mean = np.asarray(mean, dtype=float)
        m = mean.shape[0]
        if S_factor is None:
            S = np.eye(m) if S is None else np.asarray(S, dtype=float)
            S_factor = np.linalg.cholesky(S + 1e-12 * np.trace(S) / m * np.eye(m))
        S_factor = np.asarray(S_factor, dtype=float)
        diag = np.diag(S_factor)
        if np.any(diag <= 0):
            raise ValueError("S factor needs a strictly positive diagonal")
        if not isinstance(Z, OutputTaggedPoints):
            Z = jnp.asarray(_as_2d(np.asarray(Z, dtype=float)))
        return cls(Z, jnp.asarray(mean), jnp.asarray(np.tril(S_factor, -1)), jnp.asarray(np.log(diag)))

    @property
    def S_factor(self):
        return jnp.tril(self.chol_offdiag, -1) + jnp.diag(jnp.exp(self.chol_logdiag))

    @property
    def S(self):
        f = self.S_factor
        return f @ f.T

    @property
    def coords(self):
        return self.Z.coords if isinstance(self.Z, OutputTaggedPoints) else self.Z

    @property
    def size(self):
        return self.mean.shape[0]


@dataclass(frozen=True)
class LayerSpec:
    """Static description of a GP layer.

    ``kernel`` is ``"rbf"`` or ``"cp"``; ``mean_function`` is ``"identity"``
    or ``"zero"``. ``coupled=False`` removes cross-output covariance from a
    CP kernel. ``jitter`` is added to K_uu relative to its mean diagonal.
    """

    kernel: str = "rbf"
    mean_function: str = "identity"
    coupled: bool = True
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        if self.kernel not in ("rbf", "cp"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.mean_function not in ("identity", "zero"):
            raise ValueError(f"unknown mean function {self.mean_function!r}")
        if not self.jitter >= 0:
            raise ValueError("jitter must be non-negative")


def mean_fn(spec: LayerSpec, x):
    x = jnp.asarray(x)
    if spec.mean_function == "zero":
        return jnp.zeros(x.shape[0])
    return x[:, 0] if x.ndim == 2 else x


def inducing_gram(spec: LayerSpec, kernel, u: InducingSet):
    kuu = gram(u.Z, u.Z, kernel, coupled=spec.coupled)
    scale = jnp.mean(jnp.diag(kuu))
    return kuu + spec.jitter * scale * jnp.eye(kuu.shape[0])


class Prepared(NamedTuple):
    chol: jnp.ndarray
    alpha: jnp.ndarray  # K_uu^{-1} (m - h(Z))
    kinv_sf: jnp.ndarray  # K_uu^{-1} S_factor
    m_tilde: jnp.ndarray


def prepare(spec: LayerSpec, kernel, u: InducingSet) -> Prepared:
    chol, _ = robust_cholesky(inducing_gram(spec, kernel, u))
    m_tilde = u.mean - mean_fn(spec, u.coords)
    return Prepared(chol, chol_solve(chol, m_tilde), chol_solve(chol, u.S_factor), m_tilde)


class Expectations(NamedTuple):
    """Kernel expectations for a group of input points.

    ``psi0`` and ``psi2`` are weighted sums over points; ``psi1`` and
    ``cross`` are per point. ``psi2`` is ``None`` for exact inputs, where it
    equals psi1^T W psi1.
    """

    psi0: jnp.ndarray
    psi1: jnp.ndarray
    psi2: Optional[jnp.ndarray]
    cross: Optional[jnp.ndarray]
    kdiag: jnp.ndarray


def _tagged(x, outputs):
    x = _as_2d(x)
    outputs = jnp.broadcast_to(jnp.asarray(outputs, dtype=jnp.int32), (x.shape[0],))
    return OutputTaggedPoints(x, outputs)


def expectations(spec: LayerSpec, kernel, u: InducingSet, inputs, outputs=0, weights=None) -> Expectations:
    exact = not isinstance(inputs, GaussianMoments)
    x = inputs if exact else inputs.mean
    n = jnp.shape(x)[0]
    w = jnp.ones(n) if weights is None else weights
    pts = _tagged(x, outputs) if spec.kernel == "cp" else _as_2d(x)
    kdiag = kernel_diag(pts, kernel)
    if exact:
        kxu = gram(pts, u.Z, kernel, coupled=spec.coupled)
        return Expectations(jnp.sum(w * kdiag), kxu, None, None, kdiag)
    if spec.kernel == "cp":
        block = _own_block(spec, u, outputs)
        if block is None:
            psi = psi_cp(inputs, u.Z, kernel, outputs=outputs, coupled=spec.coupled, weights=w)
        else:
            psi = _psi_cp_block(inputs, u.Z, kernel, outputs, w, block)
        cross = None
    else:
        psi = psi_rbf(inputs, u.coords, kernel, weights=w)
        cross = None
        if spec.mean_function == "identity":
            cross = rbf_input_cross_moment(inputs, u.coords, kernel, psi1=psi.psi1)
    return Expectations(psi.psi0, psi.psi1, psi.psi2, cross, kdiag)


def _own_block(spec, u, outputs):
    """Static index range of the inducing points tagged ``outputs``.

    Only for uncoupled CP layers with a single concrete output and concrete,
    contiguous tags: all other inducing points then have zero covariance
    with the inputs and can be skipped. Returns None otherwise.
    """
    if spec.coupled or not isinstance(outputs, (int, np.integer)):
        return None
    tags = u.Z.output_index
    if isinstance(tags, jax.core.Tracer):
        return None
    idx = np.flatnonzero(np.asarray(tags) == outputs)
    if idx.size == 0 or idx[-1] - idx[0] + 1 != idx.size:
        return None
    return int(idx[0]), int(idx[-1]) + 1


def _psi_cp_block(inputs, Z, kernel, outputs, w, block):
    lo, hi = block
    m = Z.coords.shape[0]
    sub = OutputTaggedPoints(Z.coords[lo:hi], Z.output_index[lo:hi])
    psi = psi_cp(inputs, sub, kernel, outputs=outputs, coupled=True, weights=w)
    psi1 = jnp.zeros((psi.psi1.shape[0], m)).at[:, lo:hi].set(psi.psi1)
    psi2 = jnp.zeros((m, m)).at[lo:hi, lo:hi].set(psi.psi2)
    return psi._replace(psi1=psi1, psi2=psi2)


def _phi_points_for(spec, kernel, u, inputs, outputs):
    mu, s = _as_2d(inputs.mean), _as_2d(inputs.var)
    z = _as_2d(u.coords)
    if spec.kernel == "cp":
        amp, lhat2 = output_terms(outputs, mu.shape[0], u.Z, kernel, spec.coupled)
    else:
        amp, lhat2 = _rbf_terms(mu.shape[0], z.shape[0], kernel)
    return _phi_points(mu, s, z, amp, lhat2)


def layer_marginal(spec: LayerSpec, kernel, u: InducingSet, noise, inputs, outputs=0, return_clips=False, chunk=256):
    """Moment-matched marginal of the layer output at each input point.

    Exact inputs give the usual sparse-GP predictive marginal; uncertain
    inputs give the same moments with kernel matrices replaced by their
    expectations. ``noise`` (the layer's noise variance) is added. Negative
    variances from round-off are clipped to zero and counted.
    """
    prep = prepare(spec, kernel, u)
    exact = not isinstance(inputs, GaussianMoments)
    x = inputs if exact else inputs.mean
    n = jnp.shape(x)[0]
    if exact or n <= chunk:
        mean, var = _marginal_block(spec, kernel, u, prep, inputs, outputs)
    else:
        tags = jnp.asarray(outputs, dtype=jnp.int32)
        if tags.ndim:
            tags = jnp.broadcast_to(tags, (n,))
        parts = [
            _marginal_block(
                spec, kernel, u, prep,
                GaussianMoments(inputs.mean[i:i + chunk], inputs.var[i:i + chunk]),
                tags[i:i + chunk] if tags.ndim else tags,
            )
            for i in range(0, n, chunk)
        ]
        mean = jnp.concatenate([p[0] for p in parts])
        var = jnp.concatenate([p[1] for p in parts])
    clipped = jnp.sum(var < 0)
    out = GaussianMoments(mean, jnp.maximum(var, 0.0) + noise)
    return (out, clipped) if return_clips else out


def _marginal_block(spec, kernel, u, prep, inputs, outputs):
    exact = not isinstance(inputs, GaussianMoments)
    ex = expectations(spec, kernel, u, inputs, outputs)
    x = inputs if exact else inputs.mean
    mean = mean_fn(spec, x) + ex.psi1 @ prep.alpha
    if exact:
        v = tri_solve(prep.chol, ex.psi1.T)
        q_diag = jnp.sum(v**2, axis=0)
        s_diag = jnp.sum((ex.psi1 @ prep.kinv_sf) ** 2, axis=1)
        return mean, ex.kdiag - q_diag + s_diag
    phi_n = _phi_points_for(spec, kernel, u, inputs, outputs)
    kinv = chol_solve(prep.chol, jnp.eye(prep.chol.shape[0]))
    b = jnp.outer(prep.alpha, prep.alpha) + prep.kinv_sf @ prep.kinv_sf.T
    var = ex.kdiag + jnp.einsum("nij,ij->n", phi_n, b - kinv) - (ex.psi1 @ prep.alpha) ** 2
    if spec.mean_function == "identity":
        var = var + jnp.reshape(inputs.var, (-1,)) + 2.0 * ex.cross @ prep.alpha
    return mean, var


def kl_gaussian(u: InducingSet, prior_mean, prior_cov):
    """KL(q(u) || N(prior_mean, prior_cov))."""
    prior_cov = jnp.asarray(prior_cov)
    if prior_cov.shape != (u.size, u.size):
        raise ValueError("prior covariance does not match the inducing set")
    chol, _ = robust_cholesky(prior_cov)
    return _kl(chol, u.mean - prior_mean, u.S_factor, u.chol_logdiag)


def _kl(chol, diff, s_factor, s_logdiag):
    m = chol.shape[0]
    a = tri_solve(chol, s_factor)
    b = tri_solve(chol, diff)
    return 0.5 * (jnp.sum(a**2) + jnp.sum(b**2) - m + chol_logdet(chol) - 2.0 * jnp.sum(s_logdiag))


def layer_kl(spec: LayerSpec, kernel, u: InducingSet, prep: Optional[Prepared] = None):
    prep = prepare(spec, kernel, u) if prep is None else prep
    return _kl(prep.chol, prep.m_tilde, u.S_factor, u.chol_logdiag)


def layer_trace_terms(spec: LayerSpec, kernel, u: InducingSet, noise, inputs, outputs=0, weights=None):
    """The two regularisation terms a layer contributes to the bound.

    Returns ``((psi0 - tr(Phi K^-1)) / 2 noise,
    tr((Phi - Psi^T Psi) K^-1 (m m^T + S) K^-1) / 2 noise)`` with exact Gram
    matrices standing in for the expectations when inputs are exact. The
    mean ``m`` is taken relative to the prior mean at ``Z``.
    """
    prep = prepare(spec, kernel, u)
    ex = expectations(spec, kernel, u, inputs, outputs, weights)
    w = jnp.ones(ex.psi1.shape[0]) if weights is None else weights
    pieces = _penalties(spec, prep, ex, w, inputs)
    return pieces["trace"] / (2.0 * noise), pieces["coupling"] / (2.0 * noise)


def _penalties(spec, prep, ex: Expectations, w, inputs):
    """Un-normalised bound pieces for one group of points (see model.elbo)."""
    psi_alpha = ex.psi1 @ prep.alpha
    psi_g = ex.psi1 @ prep.kinv_sf
    s_diag = jnp.sum(psi_g**2, axis=1)
    if ex.psi2 is None:
        v = tri_solve(prep.chol, ex.psi1.T)
        trace = ex.psi0 - jnp.sum(w * jnp.sum(v**2, axis=0))
        coupling = jnp.zeros(())
        mean_coupling = jnp.zeros(())
    else:
        trace = ex.psi0 - jnp.trace(chol_solve(prep.chol, ex.psi2))
        phi_b = prep.alpha @ ex.psi2 @ prep.alpha + jnp.sum((ex.psi2 @ prep.kinv_sf) * prep.kinv_sf)
        coupling = phi_b - jnp.sum(w * (psi_alpha**2 + s_diag))
        if spec.mean_function == "identity":
            s = jnp.reshape(inputs.var, (-1,))
            mean_coupling = jnp.sum(w * (s + 2.0 * ex.cross @ prep.alpha))
        else:
            mean_coupling = jnp.zeros(())
    return {
        "psi_alpha": psi_alpha,
        "s_diag": s_diag,
        "trace": trace,
        "coupling": coupling,
        "mean_coupling": mean_coupling,
    }


def layer_pieces(spec: LayerSpec, kernel, u: InducingSet, inputs, outputs=0, weights=None, prep=None):
    """Everything a bound needs from one layer for one group of points.

    Returns ``(mean, s_diag, pieces)`` where ``mean`` is the propagated mean
    h(mu) + Psi K^-1 (m - h(Z)), ``s_diag`` is diag(Psi K^-1 S K^-1 Psi^T) and
    ``pieces`` holds the weighted un-normalised trace, coupling and
    mean-function coupling sums.
    """
    prep = prepare(spec, kernel, u) if prep is None else prep
    ex = expectations(spec, kernel, u, inputs, outputs, weights)
    w = jnp.ones(ex.psi1.shape[0]) if weights is None else weights
    pieces = _penalties(spec, prep, ex, w, inputs)
    x = inputs.mean if isinstance(inputs, GaussianMoments) else inputs
    mean = mean_fn(spec, x) + pieces["psi_alpha"]
    return mean, pieces["s_diag"], pieces
