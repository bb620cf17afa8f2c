"""Maximum a-posteriori fitting of the bound and gradient verification."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import jax
import jax.numpy as jnp
import numpy as np
import optax
from jax.flatten_util import ravel_pytree

from .model import AmoGpModel, LabeledDataset, _elbo_value, make_batch, predict

FAMILIES = ("lengthscale", "variance", "inducing_inputs", "inducing_mean", "s_factor", "noise", "affine")

_LEAF_FAMILY = {
    "log_lengthscales": "lengthscale",
    "log_variance": "variance",
    "log_scales": "variance",
    "Z": "inducing_inputs",
    "mean": "inducing_mean",
    "chol_offdiag": "s_factor",
    "chol_logdiag": "s_factor",
    "log_noise": "noise",
    "log_obs_noise": "noise",
    "scale": "affine",
    "offset": "affine",
}


class NumericalAbort(RuntimeError):
    """Training produced a non-finite objective.

    ``model`` holds the last parameters with a finite objective and
    ``trace`` the history up to that point.
    """

    def __init__(self, message, model=None, trace=None):
        super().__init__(message)
        self.model = model
        self.trace = trace


@dataclass(frozen=True)
class LogNormalPrior:
    """Log-normal prior on a positive hyperparameter.

    ``median=None`` for lengthscales means ``range_multiple`` times the range
    of the layer's input data. ``strength`` scales the log density; 0
    disables the prior.
    """

    median: Optional[float] = None
    log_sd: float = 0.5
    range_multiple: float = 2.0
    strength: float = 1.0


@dataclass(frozen=True)
class LayerPriors:
    lengthscale: LogNormalPrior = LogNormalPrior()
    variance: LogNormalPrior = LogNormalPrior(median=0.1)


@dataclass(frozen=True)
class TrainConfig:
    step_size: float = 0.01
    batch_size: Optional[int] = None
    max_steps: int = 5000
    seed: int = 0
    alignment_priors: LayerPriors = LayerPriors()
    warping_priors: LayerPriors = LayerPriors()
    convergence_tol: float = 0.0
    convergence_window: int = 50
    freeze_shared_lengthscale_steps: int = 1000
    log_every: int = 50

    def __post_init__(self):
        if not self.step_size >= 0:
            raise ValueError("step size must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")
        if self.convergence_window < 1 or self.log_every < 1:
            raise ValueError("window and logging interval must be positive")


@dataclass
class TrainTrace:
    elbo: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    log_steps: list = field(default_factory=list)
    terms: list = field(default_factory=list)
    param_norms: list = field(default_factory=list)
    clip_counts: list = field(default_factory=list)
    converged: bool = False

    def __len__(self):
        return len(self.elbo)

    def to_csv(self, path, header_comment=None):
        names = list(self.terms[0]) if self.terms else []
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(["step", "elbo", "objective", "param_norm", "clipped"] + names)
            for i, step in enumerate(self.log_steps):
                row = [step, repr(self.elbo[step]), repr(self.objective[step]), repr(self.param_norms[i]), self.clip_counts[i]]
                w.writerow(row + [repr(self.terms[i][k]) for k in names])


# --------------------------------------------------------------------------
# Hyperpriors


def _lognormal(value_log, median, prior: LogNormalPrior):
    # log density of a log-normal, evaluated at exp(value_log)
    if prior.strength == 0:
        return jnp.zeros(())
    sd = prior.log_sd
    z = (value_log - math.log(median)) / sd
    logpdf = -value_log - math.log(sd * math.sqrt(2.0 * math.pi)) - 0.5 * z**2
    return prior.strength * jnp.sum(logpdf)


def _span(x):
    x = np.asarray(x)
    s = float(np.max(x) - np.min(x)) if x.size else 0.0
    return s if s > 0 else 1.0


def prior_medians(model: AmoGpModel, data: LabeledDataset, config: TrainConfig):
    """Resolve lengthscale prior medians per output: alignment from the
    input range, warping from the target range."""
    out = {"alignment": [], "warping": []}
    for d in range(model.n_outputs):
        x, y = data.train(d)
        for key, values, pri in (("alignment", x, config.alignment_priors), ("warping", y, config.warping_priors)):
            ls = pri.lengthscale
            out[key].append(ls.median if ls.median is not None else ls.range_multiple * _span(values))
    return out


def _hyperprior(params, layout, config: TrainConfig, medians):
    total = jnp.zeros(())
    for d in range(layout.n_outputs):
        for key, kind, pri in (
            ("alignment", layout.alignment[d], config.alignment_priors),
            ("warping", layout.warping[d], config.warping_priors),
        ):
            if kind != "gp":
                continue
            kern = params[key][d]["kernel"]
            total = total + _lognormal(kern.log_lengthscales, medians[key][d], pri.lengthscale)
            total = total + _lognormal(kern.log_variance, pri.variance.median, pri.variance)
    return total


def hyperprior_logdensity(model: AmoGpModel, config: TrainConfig, data: Optional[LabeledDataset] = None):
    """Sum of log-normal log densities on alignment and warping lengthscales
    and signal variances. ``data`` is needed only for range-based medians."""
    if data is None:
        medians = {
            "alignment": [config.alignment_priors.lengthscale.median] * model.n_outputs,
            "warping": [config.warping_priors.lengthscale.median] * model.n_outputs,
        }
        active = [config.alignment_priors.lengthscale, config.warping_priors.lengthscale]
        if any(m is None and pri.strength != 0 for v, pri in zip(medians.values(), active) for m in v):
            raise ValueError("range-based prior medians need the training data")
    else:
        medians = prior_medians(model, data, config)
    return float(_hyperprior(model.params, model.layout, config, medians))


# --------------------------------------------------------------------------
# Parameter bookkeeping


def _leaf_names(params):
    paths, _ = jax.tree_util.tree_flatten_with_path(params)
    names = []
    for path, _leaf in paths:
        last = path[-1]
        key = getattr(last, "name", None) or getattr(last, "key", None)
        if key is None and hasattr(last, "idx"):
            # tuples of per-output values: use the enclosing name
            for p in reversed(path):
                k = getattr(p, "name", None) or getattr(p, "key", None)
                if k is not None:
                    key = k
                    break
        names.append((jax.tree_util.keystr(path), key))
    return names


def parameter_families(params):
    """Family label per flat parameter, aligned with ``ravel_pytree``.

    Entries that never influence the model (the unused upper triangle and
    diagonal of stored S factors) are labelled ``None``.
    """
    leaves = jax.tree_util.tree_leaves(params)
    labels = []
    for (path, key), leaf in zip(_leaf_names(params), leaves):
        fam = _LEAF_FAMILY.get(key)
        arr = np.asarray(leaf)
        if key == "chol_offdiag":
            mask = np.tril(np.ones(arr.shape, dtype=bool), -1)
            labels.extend(fam if ok else None for ok in mask.reshape(-1))
        else:
            labels.extend([fam] * arr.size)
    return labels


def _frozen_mask(params, freeze_shared_lengthscales):
    """Multiplicative gradient mask (pytree) for the two-phase schedule."""
    mask = jax.tree_util.tree_map(jnp.ones_like, params)
    if freeze_shared_lengthscales:
        kern = mask["shared"]["kernel"]
        mask["shared"]["kernel"] = kern._replace(log_lengthscales=jnp.zeros_like(kern.log_lengthscales))
    return mask


# --------------------------------------------------------------------------
# Fitting


def _batch_indices(rng, n_total, size):
    return np.sort(rng.choice(n_total, size=size, replace=False))


def make_objective(model: AmoGpModel, data: LabeledDataset, config: TrainConfig):
    """Negative (ELBO + log hyperprior) as a function of params and batch."""
    layout = model.layout
    medians = prior_medians(model, data, config)

    def objective(params, batch):
        value, terms = _elbo_value(params, layout, batch)
        prior = _hyperprior(params, layout, config, medians)
        return -(value + prior), (value, terms)

    return objective


def fit(model: AmoGpModel, data: LabeledDataset, config: TrainConfig = TrainConfig()):
    """Adam ascent on ELBO + log hyperpriors.

    For the first ``freeze_shared_lengthscale_steps`` steps the shared-layer
    lengthscales receive no updates. Stops after ``max_steps`` or when the
    mean ELBO over the last window changes by less than
    ``convergence_tol`` (relative) against the window before it.
    """
    if data.n_outputs != model.n_outputs:
        raise ValueError("dataset and model disagree on the number of outputs")
    n_total = data.n_train
    if config.batch_size is not None and config.batch_size > n_total:
        raise ValueError(f"batch size {config.batch_size} exceeds the {n_total} training points")
    rng = np.random.default_rng(config.seed)
    objective = make_objective(model, data, config)
    opt = optax.adam(config.step_size, b1=0.9, b2=0.999, eps=1e-8)

    @jax.jit
    def step(params, opt_state, batch, mask):
        (loss, (value, terms)), grads = jax.value_and_grad(objective, has_aux=True)(params, batch)
        grads = jax.tree_util.tree_map(lambda g, m: g * m, grads, mask)
        updates, opt_state = opt.update(grads, opt_state, params)
        return optax.apply_updates(params, updates), opt_state, loss, value, terms

    full = make_batch(data)
    pad = None if config.batch_size is None else config.batch_size
    params = model.params
    opt_state = opt.init(params)
    masks = (_frozen_mask(params, True), _frozen_mask(params, False))
    trace = TrainTrace()
    w = config.convergence_window

    for it in range(config.max_steps):
        if config.batch_size is None:
            batch = full
        else:
            batch = make_batch(data, _batch_indices(rng, n_total, config.batch_size), pad_to=pad)
        mask = masks[0] if it < config.freeze_shared_lengthscale_steps else masks[1]
        new_params, new_state, loss, value, terms = step(params, opt_state, batch, mask)
        if not (np.isfinite(float(loss)) and all(np.all(np.isfinite(np.asarray(l))) for l in jax.tree_util.tree_leaves(new_params))):
            raise NumericalAbort(
                f"non-finite objective or parameters at step {it}",
                model=model.replace_params(params),
                trace=trace,
            )
        # the recorded value belongs to the parameters before this update
        trace.elbo.append(float(value))
        trace.objective.append(float(-loss))
        if it % config.log_every == 0:
            _log(trace, it, params, model, data, terms)
        params, opt_state = new_params, new_state
        if config.convergence_tol > 0 and len(trace.elbo) >= 2 * w:
            recent = np.mean(trace.elbo[-w:])
            before = np.mean(trace.elbo[-2 * w:-w])
            if abs(recent - before) <= config.convergence_tol * max(abs(before), 1e-12):
                trace.converged = True
                break
    return model.replace_params(params), trace


def _log(trace, it, params, model, data, terms):
    trace.log_steps.append(it)
    trace.terms.append({k: float(v) for k, v in terms.items()})
    flat, _ = ravel_pytree(params)
    trace.param_norms.append(float(jnp.linalg.norm(flat)))
    clipped = 0
    m = model.replace_params(params)
    for d in range(model.n_outputs):
        x = data.X[d]
        noiseless, _ = predict(m, x, d)
        clipped += int(np.sum(np.asarray(noiseless.var) <= 0))
    trace.clip_counts.append(clipped)


# --------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradientReport:
    indices: np.ndarray
    families: list
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray

    @property
    def max_rel_error(self):
        return float(np.max(self.rel_errors)) if len(self.rel_errors) else 0.0


def _ridders(central, h, shrink=1.4, levels=10):
    # Neville tableau over steps h, h/shrink, ...; keeps the entry with the
    # smallest error estimate and stops once higher orders start to diverge
    table = np.empty((levels, levels))
    table[0, 0] = central(h)
    best, err = table[0, 0], np.inf
    for k in range(1, levels):
        h /= shrink
        table[0, k] = central(h)
        fac = shrink**2
        for j in range(1, k + 1):
            table[j, k] = (table[j - 1, k] * fac - table[j - 1, k - 1]) / (fac - 1.0)
            fac *= shrink**2
            e = max(abs(table[j, k] - table[j - 1, k]), abs(table[j, k] - table[j - 1, k - 1]))
            if e <= err:
                best, err = table[j, k], e
        if abs(table[k, k] - table[k - 1, k - 1]) >= 2.0 * err:
            break
    return best


def relative_error(a, b, floor=1.0):
    """|a - b| / max(|a|, |b|, floor); the floor keeps near-zero gradients
    from dominating through pure round-off."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _select(families, n_params, rng):
    by_family = {}
    for i, f in enumerate(families):
        if f is not None:
            by_family.setdefault(f, []).append(i)
    chosen = []
    present = sorted(by_family)
    per = max(1, n_params // max(len(present), 1))
    for f in present:
        idx = np.asarray(by_family[f])
        chosen.extend(rng.choice(idx, size=min(per, len(idx)), replace=False).tolist())
    rest = np.setdiff1d(np.flatnonzero([f is not None for f in families]), chosen)
    if len(chosen) < n_params and len(rest):
        chosen.extend(rng.choice(rest, size=min(n_params - len(chosen), len(rest)), replace=False).tolist())
    return np.sort(np.asarray(chosen, dtype=int))


def gradient_check(
    model: AmoGpModel,
    data: LabeledDataset,
    epsilon: float = 1e-3,
    n_params: int = 30,
    seed: int = 0,
    objective: Optional[Callable] = None,
    subset=None,
    floor: float = 1.0,
):
    """Compare autodiff gradients with central finite differences.

    By default the checked function is the full-batch ELBO in the stored
    (log / unconstrained) parameterisation. ``objective`` substitutes any
    scalar function of the flat parameter vector. Parameters are drawn at
    random from every family present unless ``subset`` lists flat indices.
    Each numeric derivative is a Richardson-extrapolated sequence of central
    differences starting at step ``epsilon`` (Ridders' scheme), which copes
    with both strongly curved directions and round-off in large objectives.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    flat, unravel = ravel_pytree(model.params)
    families = parameter_families(model.params)
    if objective is None:
        batch = make_batch(data)
        layout = model.layout

        def objective(v):
            return _elbo_value(unravel(v), layout, batch)[0]

    f = jax.jit(objective)
    grad = np.asarray(jax.jit(jax.grad(objective))(flat))
    if subset is None:
        subset = _select(families, n_params, np.random.default_rng(seed))
    subset = np.asarray(subset, dtype=int)

    def central(i, h):
        e = jnp.zeros_like(flat).at[i].set(h)
        return (float(f(flat + e)) - float(f(flat - e))) / (2.0 * h)

    numeric = np.array([_ridders(lambda h: central(i, h), epsilon) for i in subset])
    analytic = grad[subset]
    return GradientReport(subset, [families[i] for i in subset], analytic, numeric, relative_error(analytic, numeric, floor))
