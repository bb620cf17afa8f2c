"""Dense linear-algebra helpers shared by the kernel, layer and model code."""

from __future__ import annotations

import jax
import jax.numpy as jnp
from jax.scipy.linalg import cho_solve, solve_triangular

DEFAULT_JITTER = 1e-6
MAX_ESCALATIONS = 7


class NotPositiveDefiniteError(ValueError):
    """Raised when a matrix stays indefinite after every jitter escalation."""


def _jitter_ladder(base_jitter):
    return jnp.array([0.0] + [base_jitter * 10.0**k for k in range(MAX_ESCALATIONS)])


def _find_jitter(m, base_jitter):
    # Runs on a gradient-free copy; the factor itself is recomputed below so
    # that reverse-mode differentiation never sees the while loop.
    ladder = _jitter_ladder(base_jitter)
    eye = jnp.eye(m.shape[-1], dtype=m.dtype)

    def failed(idx):
        chol = jnp.linalg.cholesky(m + ladder[jnp.minimum(idx, MAX_ESCALATIONS)] * eye)
        return ~jnp.all(jnp.isfinite(chol))

    def cond(idx):
        return (idx <= MAX_ESCALATIONS) & failed(idx)

    idx = jax.lax.while_loop(cond, lambda i: i + 1, jnp.asarray(0))
    return jnp.where(idx <= MAX_ESCALATIONS, ladder[jnp.minimum(idx, MAX_ESCALATIONS)], jnp.nan)


def robust_cholesky(m, base_jitter=DEFAULT_JITTER):
    """Lower Cholesky factor of ``m + jitter * I`` with escalating jitter.

    Tries jitter 0, then ``base_jitter * 10**k`` for k = 0..6 and returns the
    first factor that succeeds together with the jitter used. Eagerly this
    raises :class:`NotPositiveDefiniteError` on failure; under tracing the
    factor is all-NaN instead so callers can detect it downstream.
    """
    m = jnp.asarray(m)
    m = 0.5 * (m + m.T)
    jitter = jax.lax.stop_gradient(_find_jitter(jax.lax.stop_gradient(m), base_jitter))
    chol = jnp.linalg.cholesky(m + jitter * jnp.eye(m.shape[-1], dtype=m.dtype))
    chol = jnp.where(jnp.isfinite(jitter), chol, jnp.nan)
    if not isinstance(jitter, jax.core.Tracer):
        if not bool(jnp.isfinite(jitter)):
            raise NotPositiveDefiniteError(
                f"matrix of size {m.shape[0]} is not positive definite after "
                f"{MAX_ESCALATIONS} jitter escalations"
            )
        jitter = float(jitter)
    return chol, jitter


def trace_product(a, b):
    """tr(a @ b) without forming the product."""
    a = jnp.asarray(a)
    b = jnp.asarray(b)
    if a.shape != b.shape[::-1] or a.ndim != 2:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return jnp.sum(a * b.T)


def chol_solve(chol, b):
    return cho_solve((chol, True), b)


def tri_solve(chol, b):
    """Solve ``chol @ x = b`` for lower-triangular ``chol``."""
    return solve_triangular(chol, b, lower=True)


def chol_logdet(chol):
    return 2.0 * jnp.sum(jnp.log(jnp.diag(chol)))
