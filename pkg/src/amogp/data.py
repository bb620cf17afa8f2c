"""Synthetic two-output data with known alignment and warping, baseline
model layouts, and the CSV formats used by the command-line tool."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import AmoGpModel, LabeledDataset, Layout, ModelConfig, build_model

BASELINE_KINDS = ("shallow_gp", "mo_gp", "dgp3")


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings.

    The latent signal is exp(-decay * t) * sin(frequency * t). Output 1 is
    sigmoid(slope * latent) on the identity alignment; output 2 is the
    latent evaluated at t**2. ``gap_1`` and ``gap_2`` are held out of
    outputs 1 and 2.
    """

    n_points: int = 500
    noise_sd: float = 0.05
    gap_1: tuple = (0.7, 0.8)
    gap_2: tuple = (0.35, 0.65)
    seed: int = 0
    decay: float = 2.0
    frequency: float = 6.0 * np.pi
    slope: float = 4.0

    def __post_init__(self):
        if self.n_points < 10:
            raise ValueError("n_points must be at least 10")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        for name in ("gap_1", "gap_2"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo < hi <= 1.0:
                raise ValueError(f"{name} must be an interval inside [0, 1], got ({lo}, {hi})")


@dataclass
class GroundTruth:
    """Noise-free decomposition at the sampled inputs of each output."""

    x: list
    alignment: list
    shared: list
    y: list
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)


def latent(t, spec: SyntheticSpec):
    t = np.asarray(t, dtype=float)
    return np.exp(-spec.decay * t) * np.sin(spec.frequency * t)


def true_alignment(t, d):
    t = np.asarray(t, dtype=float)
    return t if d == 0 else t**2


def true_warping(f, d, spec: SyntheticSpec):
    f = np.asarray(f, dtype=float)
    if d == 0:
        return 1.0 / (1.0 + np.exp(-spec.slope * f))
    return f


def _inputs_with_gap(rng, n, gap):
    # exact counts: round(n * width) points inside the gap, the rest outside
    lo, hi = gap
    n_in = int(round(n * (hi - lo)))
    inside = rng.uniform(lo, hi, n_in)
    u = rng.uniform(0.0, 1.0 - (hi - lo), n - n_in)
    outside = np.where(u < lo, u, u + (hi - lo))
    x = np.concatenate([inside, outside])
    order = np.argsort(x, kind="stable")
    x = x[order]
    return x, (x >= lo) & (x <= hi)


def generate_artificial(spec: SyntheticSpec = SyntheticSpec()):
    """Draw the two-output dataset; returns ``(LabeledDataset, GroundTruth)``.

    Points inside each output's gap become that output's test set, so the
    default settings train on 450 and 350 points.
    """
    rng = np.random.default_rng(spec.seed)
    X, Y, masks = [], [], []
    truth = GroundTruth([], [], [], [], spec)
    for d, gap in enumerate((spec.gap_1, spec.gap_2)):
        x, in_gap = _inputs_with_gap(rng, spec.n_points, gap)
        a = true_alignment(x, d)
        f = latent(a, spec)
        clean = true_warping(f, d, spec)
        y = clean + spec.noise_sd * rng.standard_normal(len(x))
        X.append(x)
        Y.append(y)
        masks.append(in_gap)
        truth.x.append(x)
        truth.alignment.append(a)
        truth.shared.append(f)
        truth.y.append(clean)
    return LabeledDataset(X, Y, masks), truth


# --------------------------------------------------------------------------
# Baselines


def baseline_layout(kind: str, n_outputs: int, n_latent: int = 1) -> Layout:
    if kind == "shallow_gp":
        return Layout(n_outputs, ("identity",) * n_outputs, ("identity",) * n_outputs, coupled=False, n_latent=n_latent)
    if kind == "mo_gp":
        return Layout(n_outputs, ("identity",) * n_outputs, ("identity",) * n_outputs, coupled=True, n_latent=n_latent)
    if kind == "dgp3":
        return Layout(n_outputs, ("gp",) * n_outputs, ("gp",) * n_outputs, coupled=False, n_latent=n_latent)
    raise ValueError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")


def amogp_layout(n_outputs: int = 2, n_latent: int = 1) -> Layout:
    """Default aligned layout: the first alignment and the second warping
    are frozen to the identity, all other layers are GPs."""
    alignment = ("identity",) + ("gp",) * (n_outputs - 1)
    warping = ("gp",) * (n_outputs - 1) + ("identity",) if n_outputs > 1 else ("gp",)
    return Layout(n_outputs, alignment, warping, coupled=True, n_latent=n_latent)


def make_baseline(kind: str, data: LabeledDataset, config: ModelConfig = ModelConfig(), n_latent: int = 1) -> AmoGpModel:
    """shallow_gp: independent single-layer GPs; mo_gp: the coupled shared
    layer alone; dgp3: independent three-layer deep GPs."""
    return build_model(data, baseline_layout(kind, data.n_outputs, n_latent), config)


# --------------------------------------------------------------------------
# CSV


def _comment(producer):
    return f"# generated by {producer}\n" if producer else ""


def _rows(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_dataset_csv(data: LabeledDataset, path, producer=None):
    with open(path, "w", newline="") as fh:
        fh.write(_comment(producer))
        w = csv.writer(fh)
        w.writerow(["output_index", "x", "y", "split"])
        for d in range(data.n_outputs):
            for x, y, t in zip(data.X[d], data.y[d], data.test_masks[d]):
                w.writerow([d, repr(float(x)), repr(float(y)), "test" if t else "train"])


def read_dataset_csv(path, n_outputs: Optional[int] = None) -> LabeledDataset:
    rows = _rows(path)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    required = {"output_index", "x", "y"}
    if not required.issubset(rows[0]):
        raise ValueError(f"{path}: expected columns {sorted(required)} (plus optional split)")
    idx = np.array([int(r["output_index"]) for r in rows])
    D = int(idx.max()) + 1 if n_outputs is None else n_outputs
    if idx.min() < 0 or idx.max() >= D:
        raise ValueError(f"{path}: output_index outside [0, {D})")
    X, Y, M = [], [], []
    for d in range(D):
        sel = [r for r, i in zip(rows, idx) if i == d]
        X.append([float(r["x"]) for r in sel])
        Y.append([float(r["y"]) for r in sel])
        M.append([(r.get("split") or "train").strip() == "test" for r in sel])
    return LabeledDataset(X, Y, M)


def write_truth_csv(truth: GroundTruth, path, producer=None):
    with open(path, "w", newline="") as fh:
        fh.write(_comment(producer))
        w = csv.writer(fh)
        w.writerow(["output_index", "x", "alignment", "shared", "y_true"])
        for d in range(len(truth.x)):
            for vals in zip(truth.x[d], truth.alignment[d], truth.shared[d], truth.y[d]):
                w.writerow([d] + [repr(float(v)) for v in vals])


def read_truth_csv(path) -> GroundTruth:
    rows = _rows(path)
    idx = np.array([int(r["output_index"]) for r in rows])
    truth = GroundTruth([], [], [], [])
    for d in range(int(idx.max()) + 1):
        sel = [r for r, i in zip(rows, idx) if i == d]
        truth.x.append(np.array([float(r["x"]) for r in sel]))
        truth.alignment.append(np.array([float(r["alignment"]) for r in sel]))
        truth.shared.append(np.array([float(r["shared"]) for r in sel]))
        truth.y.append(np.array([float(r["y_true"]) for r in sel]))
    return truth
