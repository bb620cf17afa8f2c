"""YAML run configuration for the command-line tool.

A run file names a dataset, a list of models (the aligned model and any
baselines), initial values and training settings. Relative paths are
resolved against the directory holding the run file. See
``configs/artificial.yaml`` for a commented example.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .data import BASELINE_KINDS, SyntheticSpec, amogp_layout, baseline_layout
from .model import Layout, ModelConfig
from .training import LayerPriors, LogNormalPrior, TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelEntry:
    name: str
    layout: Layout


@dataclass
class RunConfig:
    data_path: Optional[Path]
    synthetic: Optional[SyntheticSpec]
    output_dir: Path
    models: list
    init: ModelConfig
    train: TrainConfig
    source: Optional[Path] = None
    extra: dict = field(default_factory=dict)


def _only_known(section, allowed, where):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _dataclass_from(cls, section, where):
    section = section or {}
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = [f.name for f in dataclasses.fields(cls)]
    _only_known(section, names, where)
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _frequency(value):
    if isinstance(value, str) and value.strip().endswith("pi"):
        head = value.strip()[:-2].strip() or "1"
        return float(head) * 3.141592653589793
    return float(value)


def _synthetic(section):
    section = dict(section or {})
    for key in ("gap_1", "gap_2"):
        if key in section:
            section[key] = tuple(float(v) for v in section[key])
    if "frequency" in section:
        section["frequency"] = _frequency(section["frequency"])
    return _dataclass_from(SyntheticSpec, section, "data.generate")


def _priors(section, where):
    section = section or {}
    _only_known(section, ["lengthscale", "variance"], where)
    ls = _dataclass_from(LogNormalPrior, section.get("lengthscale"), f"{where}.lengthscale")
    var_section = dict(section.get("variance") or {})
    var_section.setdefault("median", 0.1)
    var = _dataclass_from(LogNormalPrior, var_section, f"{where}.variance")
    return LayerPriors(ls, var)


def _train(section):
    section = dict(section or {})
    priors = section.pop("priors", {}) or {}
    _only_known(priors, ["alignment", "warping"], "train.priors")
    cfg = _dataclass_from(TrainConfig, section, "train")
    return dataclasses.replace(
        cfg,
        alignment_priors=_priors(priors.get("alignment"), "train.priors.alignment"),
        warping_priors=_priors(priors.get("warping"), "train.priors.warping"),
    )


def _layout(entry, n_outputs, where):
    allowed = ["name", "baseline", "alignment", "warping", "coupled", "n_latent", "frozen_alignment_noise", "jitter"]
    _only_known(entry, allowed, where)
    n_latent = int(entry.get("n_latent", 1))
    if "baseline" in entry:
        kind = entry["baseline"]
        if kind not in BASELINE_KINDS:
            raise ConfigError(f"{where}: unknown baseline {kind!r}; expected one of {list(BASELINE_KINDS)}")
        layout = baseline_layout(kind, n_outputs, n_latent)
    else:
        layout = amogp_layout(n_outputs, n_latent)
        try:
            layout = dataclasses.replace(
                layout,
                alignment=tuple(entry.get("alignment", layout.alignment)),
                warping=tuple(entry.get("warping", layout.warping)),
                coupled=bool(entry.get("coupled", True)),
            )
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    try:
        return dataclasses.replace(
            layout,
            frozen_alignment_noise=float(entry.get("frozen_alignment_noise", layout.frozen_alignment_noise)),
            jitter=float(entry.get("jitter", layout.jitter)),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_run_config(doc: dict, base_dir: Path = Path(".")) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run file must be a mapping")
    _only_known(doc, ["schema_version", "data", "output_dir", "n_outputs", "models", "init", "train"], "run file")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {doc.get('schema_version')!r}")
    data = doc.get("data") or {}
    _only_known(data, ["path", "generate"], "data")
    if ("path" in data) == ("generate" in data):
        raise ConfigError("data needs exactly one of 'path' or 'generate'")
    data_path = synthetic = None
    if "path" in data:
        data_path = (base_dir / data["path"]).resolve()
    else:
        synthetic = _synthetic(data["generate"])
    n_outputs = int(doc.get("n_outputs", 2))
    entries = doc.get("models") or [{"name": "amogp"}]
    models = []
    for i, entry in enumerate(entries):
        where = f"models[{i}]"
        if not isinstance(entry, dict) or "name" not in entry:
            raise ConfigError(f"{where} needs a name")
        models.append(ModelEntry(str(entry["name"]), _layout(entry, n_outputs, where)))
    names = [m.name for m in models]
    if len(set(names)) != len(names):
        raise ConfigError("model names must be unique")
    return RunConfig(
        data_path=data_path,
        synthetic=synthetic,
        output_dir=(base_dir / doc.get("output_dir", "run")).resolve(),
        models=models,
        init=_dataclass_from(ModelConfig, doc.get("init"), "init"),
        train=_train(doc.get("train")),
        extra={"n_outputs": n_outputs},
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    cfg = parse_run_config(doc, path.parent)
    cfg.source = path
    return cfg
