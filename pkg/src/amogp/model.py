"""The aligned multi-output GP hierarchy.

Each output d is modelled as

    y_d = g_d(f_d(a_d(x))) + eps_d

with a per-output alignment GP a_d, a shared convolution-process layer f and
a per-output warping g_d. Alignments and warpings may be frozen to the
identity; warpings may also be a trainable affine map. The shared layer keeps
one inducing set per output, all under one joint CP prior.

Parameters live in a plain pytree (``AmoGpModel.params``) so the bound can be
differentiated with JAX; the static structure lives in :class:`Layout`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import partial
from typing import NamedTuple, Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .kernels import OutputTaggedPoints, RbfParams, SmoothingKernelParams, cp_gram, gram, rbf_gram
from .layers import (
    InducingSet,
    LayerSpec,
    inducing_gram,
    layer_kl,
    layer_marginal,
    layer_pieces,
    mean_fn,
    prepare,
)
from .linalg import robust_cholesky
from .psi import GaussianMoments

FORMAT_VERSION = "amogp-v1"
LOG_2PI = float(np.log(2.0 * np.pi))

ALIGNMENT_KINDS = ("gp", "identity")
WARPING_KINDS = ("gp", "identity", "linear")


@dataclass(frozen=True)
class Layout:
    """Static model structure.

    ``alignment[d]`` is ``"gp"`` or ``"identity"``; ``warping[d]`` is
    ``"gp"``, ``"identity"`` or ``"linear"``. Identity layers are frozen and
    carry no trainable parameters; a frozen alignment passes its input
    through with fixed noise variance ``frozen_alignment_noise``.
    ``jitter`` is the relative diagonal jitter on every K_uu; it bounds the
    conditioning the optimiser sees and loosens the bound only slightly.
    """

    n_outputs: int
    alignment: tuple
    warping: tuple
    coupled: bool = True
    n_latent: int = 1
    frozen_alignment_noise: float = 0.0
    jitter: float = 1e-4

    def __post_init__(self):
        if self.n_outputs < 1:
            raise ValueError("need at least one output")
        if len(self.alignment) != self.n_outputs or len(self.warping) != self.n_outputs:
            raise ValueError("one alignment and one warping kind per output")
        for kind in self.alignment:
            if kind not in ALIGNMENT_KINDS:
                raise ValueError(f"unknown alignment kind {kind!r}")
        for kind in self.warping:
            if kind not in WARPING_KINDS:
                raise ValueError(f"unknown warping kind {kind!r}")
        if self.frozen_alignment_noise < 0:
            raise ValueError("frozen alignment noise must be non-negative")
        if not self.jitter >= 0:
            raise ValueError("jitter must be non-negative")


def alignment_spec(layout: Layout) -> LayerSpec:
    return LayerSpec("rbf", "identity", jitter=layout.jitter)


warping_spec = alignment_spec


def shared_spec(layout: Layout) -> LayerSpec:
    return LayerSpec("cp", "zero", coupled=layout.coupled, jitter=layout.jitter)


def shared_inducing(params, layout: Layout) -> InducingSet:
    """The shared layer's inducing set with output tags attached.

    Parameters store plain coordinates, M per output in output order, so
    that every leaf of the parameter tree is differentiable; q(u) is a full
    joint Gaussian over all D * M inducing outputs.
    """
    u = params["shared"]["inducing"]
    m = u.Z.shape[0] // layout.n_outputs
    tags = np.repeat(np.arange(layout.n_outputs, dtype=np.int32), m)
    return InducingSet(OutputTaggedPoints(u.Z, tags), u.mean, u.chol_offdiag, u.chol_logdiag)


@dataclass
class LabeledDataset:
    """Per-output inputs and targets with optional held-out masks.

    ``test_masks[d]`` marks points of output d that are held out; training
    uses the complement.
    """

    X: list
    y: list
    test_masks: Optional[list] = None

    def __post_init__(self):
        self.X = [np.asarray(x, dtype=float).reshape(-1) for x in self.X]
        self.y = [np.asarray(v, dtype=float).reshape(-1) for v in self.y]
        if len(self.X) != len(self.y):
            raise ValueError("inputs and targets need the same number of outputs")
        if self.test_masks is None:
            self.test_masks = [np.zeros(len(x), dtype=bool) for x in self.X]
        self.test_masks = [np.asarray(m, dtype=bool).reshape(-1) for m in self.test_masks]
        for x, v, m in zip(self.X, self.y, self.test_masks):
            if len(x) != len(v) or len(x) != len(m):
                raise ValueError("inputs, targets and masks must have matching lengths")
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
                raise ValueError("dataset contains non-finite values")

    @property
    def n_outputs(self):
        return len(self.X)

    def train(self, d):
        keep = ~self.test_masks[d]
        return self.X[d][keep], self.y[d][keep]

    def test(self, d):
        m = self.test_masks[d]
        return self.X[d][m], self.y[d][m]

    @property
    def n_train(self):
        return sum(int(np.sum(~m)) for m in self.test_masks)


@dataclass(frozen=True)
class ModelConfig:
    """Initial values used by :func:`build_model`."""

    n_inducing_alignment: int = 50
    n_inducing_shared: int = 50
    n_inducing_warping: int = 50
    alignment_variance: float = 0.1
    alignment_lengthscale: float = 1.0
    alignment_noise: float = 1e-3
    shared_scale: float = 1.0
    shared_lengthscale: float = 0.1
    shared_noise: float = 1e-3
    warping_variance: float = 0.1
    warping_lengthscale: float = 1.0
    observation_noise: float = 0.01
    s_init_fraction: float = 0.01


class Batch(NamedTuple):
    X: tuple
    y: tuple
    w: tuple


@dataclass
class AmoGpModel:
    layout: Layout
    params: dict

    @property
    def n_outputs(self):
        return self.layout.n_outputs

    def replace_params(self, params):
        return AmoGpModel(self.layout, params)

    def elbo(self, data, batch=None):
        return elbo(self, data, batch)

    def predict(self, X_star, d):
        return predict(self, X_star, d)

    def decompose(self, X_star, d):
        return decompose(self, X_star, d)


def _gp_layer(spec: LayerSpec, kernel, Z, mean, s_fraction):
    Z = np.asarray(Z, dtype=float).reshape(-1, 1)
    u0 = InducingSet.create(Z, mean, S=np.eye(len(Z)))
    kuu = np.asarray(inducing_gram(spec, kernel, u0))
    return InducingSet.create(Z, mean, S_factor=np.sqrt(s_fraction) * np.linalg.cholesky(kuu))


def _range(x, pad=0.0):
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lo - pad * span, hi + pad * span


def build_model(data: LabeledDataset, layout: Layout, config: ModelConfig = ModelConfig()) -> AmoGpModel:
    """Initialise a model: inducing inputs equally spaced over the observed
    ranges, q(u) mean at the prior mean, S a small multiple of K_uu."""
    D = layout.n_outputs
    if data.n_outputs != D:
        raise ValueError("dataset and layout disagree on the number of outputs")
    all_x = np.concatenate([data.train(d)[0] for d in range(D)])
    alignment = []
    for d in range(D):
        if layout.alignment[d] == "identity":
            alignment.append(None)
            continue
        kern = RbfParams.create(config.alignment_variance, config.alignment_lengthscale)
        Z = np.linspace(*_range(data.train(d)[0]), config.n_inducing_alignment)
        u = _gp_layer(alignment_spec(layout), kern, Z, Z, config.s_init_fraction)
        alignment.append({"kernel": kern, "inducing": u, "log_noise": jnp.asarray(np.log(config.alignment_noise))})

    cp = SmoothingKernelParams.create(config.shared_scale, config.shared_lengthscale, n_outputs=D, n_latent=layout.n_latent)
    spec_f = shared_spec(layout)
    m = config.n_inducing_shared
    Zs = np.tile(np.linspace(*_range(all_x), m), D)
    tagged = OutputTaggedPoints.create(Zs, np.repeat(np.arange(D), m))
    kuu = np.asarray(inducing_gram(spec_f, cp, InducingSet.create(tagged, np.zeros(D * m))))
    chol = np.asarray(robust_cholesky(kuu)[0])
    u_f = InducingSet.create(Zs, np.zeros(D * m), S_factor=np.sqrt(config.s_init_fraction) * chol)
    shared = {"kernel": cp, "inducing": u_f, "log_noise": jnp.asarray(np.log(config.shared_noise))}

    warping = []
    for d in range(D):
        kind = layout.warping[d]
        if kind == "identity":
            warping.append(None)
        elif kind == "linear":
            warping.append({"scale": jnp.asarray(1.0), "offset": jnp.asarray(0.0)})
        else:
            kern = RbfParams.create(config.warping_variance, config.warping_lengthscale)
            Z = np.linspace(*_range(data.train(d)[1], pad=0.1), config.n_inducing_warping)
            warping.append({"kernel": kern, "inducing": _gp_layer(warping_spec(layout), kern, Z, Z, config.s_init_fraction)})

    params = {
        "alignment": tuple(alignment),
        "shared": shared,
        "warping": tuple(warping),
        "log_obs_noise": jnp.full((D,), np.log(config.observation_noise)),
    }
    return AmoGpModel(layout, params)


# --------------------------------------------------------------------------
# Evidence lower bound


def _gauss_loglik(y, mean, var):
    return -0.5 * (LOG_2PI + jnp.log(var)) - 0.5 * (y - mean) ** 2 / var


def _affine(params, layout, d):
    if layout.warping[d] == "linear":
        w = params["warping"][d]
        return w["scale"], w["offset"]
    return jnp.asarray(1.0), jnp.asarray(0.0)


def _elbo_terms(params, layout: Layout, batch: Batch):
    """Signed contributions to the bound, keyed by name, in a fixed order."""
    D = layout.n_outputs
    terms = {}
    spec_f = shared_spec(layout)
    shared = params["shared"]
    u_f = shared_inducing(params, layout)
    prep_f = prepare(spec_f, shared["kernel"], u_f)
    noise_f = jnp.exp(shared["log_noise"])

    for d in range(D):
        x, y, w = batch.X[d], batch.y[d], batch.w[d]
        noise_y = jnp.exp(params["log_obs_noise"][d])

        if layout.alignment[d] == "identity":
            if layout.frozen_alignment_noise > 0:
                q_a = GaussianMoments(x, jnp.full_like(x, layout.frozen_alignment_noise))
            else:
                q_a = x
            terms[f"alignment_trace/{d}"] = jnp.zeros(())
        else:
            la = params["alignment"][d]
            noise_a = jnp.exp(la["log_noise"])
            mean_a, s_a, pa = layer_pieces(alignment_spec(layout), la["kernel"], la["inducing"], x, weights=w)
            terms[f"alignment_trace/{d}"] = -pa["trace"] / (2.0 * noise_a)
            q_a = GaussianMoments(mean_a, noise_a + s_a)

        mean_f, s_f, pf = layer_pieces(spec_f, shared["kernel"], u_f, q_a, outputs=d, weights=w, prep=prep_f)
        if layout.warping[d] == "gp":
            terms[f"shared_trace/{d}"] = -pf["trace"] / (2.0 * noise_f)
            terms[f"shared_coupling/{d}"] = -pf["coupling"] / (2.0 * noise_f)
            lg = params["warping"][d]
            q_f = GaussianMoments(mean_f, noise_f + s_f)
            mean_g, s_g, pg = layer_pieces(warping_spec(layout), lg["kernel"], lg["inducing"], q_f, weights=w)
            terms[f"fit/{d}"] = jnp.sum(w * _gauss_loglik(y, mean_g, noise_y))
            terms[f"variance_fit/{d}"] = -(jnp.sum(w * s_g) + pg["mean_coupling"]) / (2.0 * noise_y)
            terms[f"warping_trace/{d}"] = -pg["trace"] / (2.0 * noise_y)
            terms[f"warping_coupling/{d}"] = -pg["coupling"] / (2.0 * noise_y)
        else:
            # identity or affine warping: merge the shared-layer noise into
            # the likelihood exactly, so the shared layer is the last GP
            scale, offset = _affine(params, layout, d)
            total = scale**2 * noise_f + noise_y
            c = scale**2 / (2.0 * total)
            terms[f"shared_trace/{d}"] = -c * pf["trace"]
            terms[f"shared_coupling/{d}"] = -c * pf["coupling"]
            terms[f"fit/{d}"] = jnp.sum(w * _gauss_loglik(y, scale * mean_f + offset, total))
            terms[f"variance_fit/{d}"] = -c * jnp.sum(w * s_f)

    for d in range(D):
        if layout.alignment[d] == "gp":
            la = params["alignment"][d]
            terms[f"alignment_kl/{d}"] = -layer_kl(alignment_spec(layout), la["kernel"], la["inducing"])
    terms["shared_kl"] = -layer_kl(spec_f, shared["kernel"], u_f, prep_f)
    for d in range(D):
        if layout.warping[d] == "gp":
            lg = params["warping"][d]
            terms[f"warping_kl/{d}"] = -layer_kl(warping_spec(layout), lg["kernel"], lg["inducing"])
    return terms


def _elbo_value(params, layout, batch):
    terms = _elbo_terms(params, layout, batch)
    total = jnp.zeros(())
    for v in terms.values():
        total = total + v
    return total, terms


elbo_value = jax.jit(_elbo_value, static_argnums=1)


def make_batch(data: LabeledDataset, indices=None, pad_to=None) -> Batch:
    """Training arrays per output with per-point weights.

    ``indices`` select from the concatenation of all outputs' training points
    (output 0 first). Selected points are weighted N / |batch| so that
    data-sum terms are unbiased. ``pad_to`` pads every output to a fixed
    length with zero-weight points, keeping array shapes static.
    """
    D = data.n_outputs
    trains = [data.train(d) for d in range(D)]
    sizes = [len(t[0]) for t in trains]
    n_total = sum(sizes)
    if indices is None:
        sel = [np.arange(s) for s in sizes]
        weight = 1.0
    else:
        indices = np.asarray(indices, dtype=int)
        if indices.size == 0:
            raise ValueError("empty batch")
        if np.any(indices < 0) or np.any(indices >= n_total):
            raise ValueError("batch index out of range")
        offsets = np.cumsum([0] + sizes)
        sel = [np.sort(indices[(indices >= offsets[d]) & (indices < offsets[d + 1])] - offsets[d]) for d in range(D)]
        weight = n_total / indices.size
    X, Y, W = [], [], []
    for d in range(D):
        x, y = trains[d]
        xs, ys = x[sel[d]], y[sel[d]]
        ws = np.full(len(xs), weight)
        if pad_to is not None and len(xs) < pad_to:
            extra = pad_to - len(xs)
            xs = np.concatenate([xs, np.full(extra, x[0])])
            ys = np.concatenate([ys, np.full(extra, y[0])])
            ws = np.concatenate([ws, np.zeros(extra)])
        X.append(jnp.asarray(xs))
        Y.append(jnp.asarray(ys))
        W.append(jnp.asarray(ws))
    return Batch(tuple(X), tuple(Y), tuple(W))


def elbo(model: AmoGpModel, data: LabeledDataset, batch=None):
    """Evidence lower bound and its named terms.

    ``batch`` is an optional array of indices into the concatenated training
    points; data-sum terms are then rescaled by N / |batch|.
    """
    if data.n_outputs != model.n_outputs:
        raise ValueError("dataset and model disagree on the number of outputs")
    total, terms = elbo_value(model.params, model.layout, make_batch(data, batch))
    return float(total), {k: float(v) for k, v in terms.items()}


# --------------------------------------------------------------------------
# Prediction


class Decomposition(NamedTuple):
    alignment: GaussianMoments
    shared: GaussianMoments
    warping: GaussianMoments


def _alignment_marginal(params, layout, x, d):
    if layout.alignment[d] == "identity":
        return GaussianMoments(x, jnp.full_like(x, layout.frozen_alignment_noise))
    la = params["alignment"][d]
    return layer_marginal(alignment_spec(layout), la["kernel"], la["inducing"], jnp.exp(la["log_noise"]), x)


def _shared_marginal(params, layout, q_a, d):
    shared = params["shared"]
    u_f = shared_inducing(params, layout)
    return layer_marginal(shared_spec(layout), shared["kernel"], u_f, jnp.exp(shared["log_noise"]), q_a, outputs=d)


def _warping_marginal(params, layout, q_f, d):
    """Noiseless warping output."""
    kind = layout.warping[d]
    if kind == "gp":
        lg = params["warping"][d]
        return layer_marginal(warping_spec(layout), lg["kernel"], lg["inducing"], 0.0, q_f)
    scale, offset = _affine(params, layout, d)
    return GaussianMoments(scale * q_f.mean + offset, scale**2 * q_f.var)


def _add_noise(params, q, d):
    return GaussianMoments(q.mean, q.var + jnp.exp(params["log_obs_noise"][d]))


@partial(jax.jit, static_argnums=(1, 3))
def _decompose(params, layout, x, d):
    q_a = _alignment_marginal(params, layout, x, d)
    q_f = _shared_marginal(params, layout, q_a, d)
    q_g = _warping_marginal(params, layout, q_f, d)
    return Decomposition(q_a, q_f, _add_noise(params, q_g, d)), q_g


def _check_output(model, d):
    if not 0 <= d < model.n_outputs:
        raise ValueError(f"output index {d} out of range")


def decompose(model: AmoGpModel, X_star, d) -> Decomposition:
    """Per-layer moments for output d at ``X_star``.

    Each entry includes that layer's noise, i.e. it is exactly what the next
    layer receives; ``warping`` is the final noisy prediction.
    """
    _check_output(model, d)
    x = jnp.asarray(np.asarray(X_star, dtype=float).reshape(-1))
    dec, _ = _decompose(model.params, model.layout, x, d)
    return dec


def predict(model: AmoGpModel, X_star, d):
    """Approximate predictive moments for output d.

    Returns ``(noiseless, noisy)`` :class:`GaussianMoments`.
    """
    _check_output(model, d)
    x = jnp.asarray(np.asarray(X_star, dtype=float).reshape(-1))
    dec, noiseless = _decompose(model.params, model.layout, x, d)
    return noiseless, dec.warping


def continue_layer(model: AmoGpModel, q, d, layer):
    """Push moments through one named layer (``"shared"`` or ``"warping"``).

    The warping result includes observation noise.
    """
    if layer == "shared":
        return _shared_marginal(model.params, model.layout, q, d)
    if layer == "warping":
        return _add_noise(model.params, _warping_marginal(model.params, model.layout, q, d), d)
    raise ValueError(f"unknown layer {layer!r}")


def test_log_likelihood(model: AmoGpModel, data: LabeledDataset, d=None, mask=None):
    """Mean Gaussian predictive log density over held-out points.

    ``d`` restricts to one output; ``mask`` overrides the dataset's test mask
    (only with ``d`` given).
    """
    outputs = range(model.n_outputs) if d is None else [d]
    values = []
    for o in outputs:
        m = data.test_masks[o] if mask is None else np.asarray(mask, dtype=bool)
        if not np.any(m):
            continue
        x, y = data.X[o][m], data.y[o][m]
        _, noisy = predict(model, x, o)
        values.append(np.asarray(_gauss_loglik(jnp.asarray(y), noisy.mean, noisy.var)))
    if not values:
        raise ValueError("empty test set")
    return float(np.mean(np.concatenate(values)))


test_log_likelihood.__test__ = False  # keep pytest from collecting it


# --------------------------------------------------------------------------
# Sampling


def _psd_sqrt(cov):
    vals, vecs = np.linalg.eigh(0.5 * (cov + np.swapaxes(cov, -1, -2)))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))[..., None, :]


def _sample_gp_layer(spec, kernel, u: InducingSet, inputs, rng, tags=None, coupled=True):
    """Draw one function per row of ``inputs`` (S, n) from the layer's
    sparse posterior, jointly over the n points of the row."""
    S, n = inputs.shape
    z = np.asarray(u.coords)
    kuu = np.asarray(inducing_gram(spec, kernel, u))
    chol = np.linalg.cholesky(kuu)
    sf = np.asarray(u.S_factor)
    mean_u = np.asarray(u.mean)
    u_draws = mean_u[None] + rng.standard_normal((S, len(mean_u))) @ sf.T
    hz = np.asarray(mean_fn(spec, jnp.asarray(z)))
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, (u_draws - hz[None]).T)).T

    flat = inputs.reshape(-1, 1)
    if spec.kernel == "cp":
        ftags = np.tile(np.asarray(tags), S)
        pts = OutputTaggedPoints(jnp.asarray(flat), jnp.asarray(ftags, dtype=jnp.int32))
        kxu = np.asarray(cp_gram(pts, u.Z, kernel, coupled=coupled)).reshape(S, n, -1)
        t1 = OutputTaggedPoints(jnp.asarray(inputs[..., None]), jnp.asarray(np.broadcast_to(tags, (S, n)), dtype=jnp.int32))
        kxx = np.asarray(jax.vmap(lambda c, t: cp_gram(OutputTaggedPoints(c, t), OutputTaggedPoints(c, t), kernel, coupled=coupled))(t1.coords, t1.output_index))
    else:
        kxu = np.asarray(rbf_gram(jnp.asarray(flat), jnp.asarray(z), kernel)).reshape(S, n, -1)
        kxx = np.asarray(jax.vmap(lambda c: rbf_gram(c, c, kernel))(jnp.asarray(inputs[..., None])))
    v = np.linalg.solve(chol[None], np.swapaxes(kxu, 1, 2))
    cond_cov = kxx - np.swapaxes(v, 1, 2) @ v
    cond_mean = np.einsum("snm,sm->sn", kxu, alpha)
    if spec.mean_function == "identity":
        cond_mean = cond_mean + inputs
    eps = rng.standard_normal((S, n))
    return cond_mean + np.einsum("sij,sj->si", _psd_sqrt(cond_cov), eps)


def sample_functions(model: AmoGpModel, X_star, d, n_samples, seed, chunk=1000):
    """Noiseless joint samples of output d along ``X_star``.

    Per sample, inducing outputs are drawn from q(u) at every layer and each
    layer's function is drawn jointly at the (sampled) inputs it receives.
    Intermediate layer noise is included; the final observation noise is not.
    Returns an array of shape (n_samples, len(X_star)).
    """
    _check_output(model, d)
    x = np.asarray(X_star, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ValueError("X_star must be finite")
    if np.any(np.diff(x) < 0):
        raise ValueError("X_star must be sorted")
    rng = np.random.default_rng(seed)
    params, layout = model.params, model.layout
    out = []
    done = 0
    while done < n_samples:
        S = min(chunk, n_samples - done)
        a = np.broadcast_to(x, (S, len(x))).copy()
        if layout.alignment[d] == "identity":
            if layout.frozen_alignment_noise > 0:
                a = a + np.sqrt(layout.frozen_alignment_noise) * rng.standard_normal(a.shape)
        else:
            la = params["alignment"][d]
            a = _sample_gp_layer(alignment_spec(layout), la["kernel"], la["inducing"], a, rng)
            a = a + np.sqrt(float(jnp.exp(la["log_noise"]))) * rng.standard_normal(a.shape)
        shared = params["shared"]
        u_f = shared_inducing(params, layout)
        f = _sample_gp_layer(shared_spec(layout), shared["kernel"], u_f, a, rng, tags=np.full(len(x), d), coupled=layout.coupled)
        f = f + np.sqrt(float(jnp.exp(shared["log_noise"]))) * rng.standard_normal(f.shape)
        if layout.warping[d] == "gp":
            lg = params["warping"][d]
            g = _sample_gp_layer(warping_spec(layout), lg["kernel"], lg["inducing"], f, rng)
        else:
            scale, offset = _affine(params, layout, d)
            g = float(scale) * f + float(offset)
        out.append(g)
        done += S
    return np.concatenate(out, axis=0)


# --------------------------------------------------------------------------
# Serialisation


def _to_plain(tree):
    if tree is None:
        return None
    if isinstance(tree, RbfParams):
        return {"type": "rbf", "log_variance": _to_plain(tree.log_variance), "log_lengthscales": _to_plain(tree.log_lengthscales)}
    if isinstance(tree, SmoothingKernelParams):
        return {"type": "cp", "log_scales": _to_plain(tree.log_scales), "log_lengthscales": _to_plain(tree.log_lengthscales)}
    if isinstance(tree, InducingSet):
        return {
            "type": "inducing",
            "Z": _to_plain(tree.Z),
            "mean": _to_plain(tree.mean),
            "chol_offdiag": _to_plain(jnp.tril(tree.chol_offdiag, -1)),
            "chol_logdiag": _to_plain(tree.chol_logdiag),
        }
    if isinstance(tree, dict):
        return {k: _to_plain(v) for k, v in tree.items()}
    if isinstance(tree, (tuple, list)):
        return [_to_plain(v) for v in tree]
    arr = np.asarray(tree, dtype=float)
    return {"shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}


def _from_plain(obj, top=True):
    if obj is None:
        return None
    if isinstance(obj, list):
        return tuple(_from_plain(v, False) for v in obj)
    if "shape" in obj and "data" in obj:
        return jnp.asarray(np.asarray(obj["data"], dtype=float).reshape(obj["shape"]))
    kind = obj.get("type")
    if kind == "rbf":
        return RbfParams(_from_plain(obj["log_variance"]), _from_plain(obj["log_lengthscales"]))
    if kind == "cp":
        return SmoothingKernelParams(_from_plain(obj["log_scales"]), _from_plain(obj["log_lengthscales"]))
    if kind == "inducing":
        return InducingSet(_from_plain(obj["Z"]), _from_plain(obj["mean"]), _from_plain(obj["chol_offdiag"]), _from_plain(obj["chol_logdiag"]))
    return {k: _from_plain(v, False) for k, v in obj.items()}


def to_document(model: AmoGpModel, producer=None) -> dict:
    lay = model.layout
    doc = {
        "format": FORMAT_VERSION,
        "layout": {
            "n_outputs": lay.n_outputs,
            "alignment": list(lay.alignment),
            "warping": list(lay.warping),
            "coupled": lay.coupled,
            "n_latent": lay.n_latent,
            "frozen_alignment_noise": lay.frozen_alignment_noise,
            "jitter": lay.jitter,
        },
        "frozen_identity": {
            "alignment": [k == "identity" for k in lay.alignment],
            "warping": [k == "identity" for k in lay.warping],
        },
        "params": _to_plain(model.params),
    }
    if producer:
        doc["producer"] = producer
    return doc


def from_document(doc: dict) -> AmoGpModel:
    if doc.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format {doc.get('format')!r}")
    lay = doc["layout"]
    layout = Layout(
        int(lay["n_outputs"]),
        tuple(lay["alignment"]),
        tuple(lay["warping"]),
        coupled=bool(lay["coupled"]),
        n_latent=int(lay["n_latent"]),
        frozen_alignment_noise=float(lay["frozen_alignment_noise"]),
        jitter=float(lay["jitter"]),
    )
    params = _from_plain(doc["params"])
    return AmoGpModel(layout, params)


def save_model(model: AmoGpModel, path, producer=None):
    with open(path, "w") as fh:
        json.dump(to_document(model, producer), fh, indent=1)
        fh.write("\n")


def load_model(path) -> AmoGpModel:
    with open(path) as fh:
        return from_document(json.load(fh))
