"""YAML experiment configuration.

Example::

    dataset: mnist            # mnist | fashion-mnist
    data_root: data           # directory holding <dataset>/ with the four IDX files
    architecture: dense       # dense | cnn
    mode: standard            # standard | adversarial
    epochs: 40
    train_subset: 10000       # omit or null for the full training set
    seed: 0                   # master seed; every stream is derived from it
    tracked: {train: 1000, test: 1000}
    optimizer: {lr: 0.01, momentum: 0.9, batch_size: 64}
    pgd:
      epsilon: 0.3            # l-inf radius as a fraction of the [0, 1] pixel range
      step_size: 0.075        # same units; default epsilon / 4
      steps: 10
      random_start: true
    deepfool: {max_iterations: 50, overshoot: 0.02, candidates: null}
    margins: {max_retries: 10, histogram_bins: 50}

``MARGINTRACK_DATA_ROOT``, when set, replaces ``data_root``.
"""

from __future__ import annotations

import os
from pathlib import Path

import yaml

from .attacks import DeepFoolConfig, PgdConfig
from .harness import DEFAULT_EPSILON, ExperimentConfig, OptimizerConfig

DATA_ROOT_ENV = "MARGINTRACK_DATA_ROOT"

_TOP = {"dataset", "data_root", "architecture", "mode", "epochs", "train_subset", "seed",
        "tracked", "optimizer", "pgd", "deepfool", "margins"}
_SECTIONS = {
    "tracked": {"train", "test"},
    "optimizer": {"lr", "momentum", "batch_size"},
    "pgd": {"epsilon", "step_size", "steps", "random_start", "clip_min", "clip_max"},
    "deepfool": {"max_iterations", "overshoot", "candidates"},
    "margins": {"max_retries", "histogram_bins"},
}
# PyYAML reads "1e-3" (no decimal point) as a string
_FLOATS = {"lr", "momentum", "epsilon", "step_size", "clip_min", "clip_max", "overshoot"}


class ConfigInvalid(ValueError):
    pass


def _coerce(sec):
    out = dict(sec)
    for k, v in sec.items():
        if k in _FLOATS and isinstance(v, str):
            try:
                out[k] = float(v)
            except ValueError:
                raise ConfigInvalid(f"{k} must be a number, got {v!r}") from None
    return out


def _section(raw, name):
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigInvalid(f"'{name}' must be a mapping")
    unknown = set(sec) - _SECTIONS[name]
    if unknown:
        raise ConfigInvalid(f"unknown keys in '{name}': {sorted(unknown)}")
    return _coerce(sec)


def config_from_dict(raw, env=None) -> ExperimentConfig:
    env = os.environ if env is None else env
    if not isinstance(raw, dict):
        raise ConfigInvalid("config must be a mapping at the top level")
    unknown = set(raw) - _TOP
    if unknown:
        raise ConfigInvalid(f"unknown keys: {sorted(unknown)}")
    tracked = _section(raw, "tracked")
    margins = _section(raw, "margins")
    dataset = raw.get("dataset", "mnist")
    if dataset not in DEFAULT_EPSILON:
        raise ConfigInvalid(f"dataset must be one of {sorted(DEFAULT_EPSILON)}, got {dataset!r}")
    pgd = dict(_section(raw, "pgd"))
    pgd.setdefault("epsilon", DEFAULT_EPSILON[dataset])
    kw = {k: raw[k] for k in ("architecture", "mode", "epochs", "train_subset", "seed") if k in raw}
    data_root = env.get(DATA_ROOT_ENV) or raw.get("data_root", "data")
    try:
        return ExperimentConfig(
            dataset=dataset,
            data_root=str(data_root),
            tracked_train=tracked.get("train", 1000),
            tracked_test=tracked.get("test", 1000),
            optimizer=OptimizerConfig(**_section(raw, "optimizer")),
            pgd=PgdConfig(**pgd),
            deepfool=DeepFoolConfig(**_section(raw, "deepfool")),
            max_retries=margins.get("max_retries", 10),
            histogram_bins=margins.get("histogram_bins", 50),
            **kw,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(str(exc)) from exc


def load_config(path, env=None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigInvalid(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"{path} is not valid YAML: {exc}") from exc
    return config_from_dict(raw if raw is not None else {}, env)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Inverse of :func:`config_from_dict` (ignoring the env override)."""
    return {
        "dataset": cfg.dataset, "data_root": cfg.data_root, "architecture": cfg.architecture,
        "mode": cfg.mode, "epochs": cfg.epochs, "train_subset": cfg.train_subset, "seed": cfg.seed,
        "tracked": {"train": cfg.tracked_train, "test": cfg.tracked_test},
        "optimizer": {"lr": cfg.optimizer.lr, "momentum": cfg.optimizer.momentum,
                      "batch_size": cfg.optimizer.batch_size},
        "pgd": {"epsilon": cfg.pgd.epsilon, "step_size": cfg.pgd.step_size, "steps": cfg.pgd.steps,
                "random_start": cfg.pgd.random_start, "clip_min": cfg.pgd.clip_min,
                "clip_max": cfg.pgd.clip_max},
        "deepfool": {"max_iterations": cfg.deepfool.max_iterations,
                     "overshoot": cfg.deepfool.overshoot, "candidates": cfg.deepfool.candidates},
        "margins": {"max_retries": cfg.max_retries, "histogram_bins": cfg.histogram_bins},
    }
