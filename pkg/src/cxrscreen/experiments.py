"""Synthetic bias audits: population confound, severity ordering, binary CV.

Each experiment generates a synthetic dataset, splits it with the dataset
module, trains the reference classifier and scores the held-out test set.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import metrics as M
from .dataset import SEVERITY_SETTINGS, Manifest, kfold_plan, stratified_split
from .imgcore import normalize_intensity
from .pipeline import PreprocessConfig, preprocess_image
from .synth import dataset_specs, generate_image
from .trainer import TrainConfig, features, predict, train


@dataclass(frozen=True)
class AuditConfig:
    side: int = 64
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    train: TrainConfig = TrainConfig(epochs=60, patience=5, learning_rate=2e-3, input_side=16)
    preprocess: PreprocessConfig | None = None


def _prepare(images, cfg: AuditConfig):
    if cfg.preprocess is None:
        return [normalize_intensity(img) for img in images]
    return [preprocess_image(img, cfg.preprocess)[0] for img in images]


def synth_arm(n_per_class, mode, task, seed, cfg: AuditConfig):
    pairs = dataset_specs(n_per_class, mode, task, seed, cfg.side)
    manifest = Manifest([rec for rec, _ in pairs])
    images = _prepare([generate_image(spec).image for _, spec in pairs], cfg)
    return manifest, images


def evaluate_split(manifest: Manifest, images, split, config: TrainConfig) -> M.FoldReport:
    labels = manifest.label_indices(split.classes)
    params, _ = train(split, images, labels, config)
    test = split.indices("test")
    x = np.stack([features(images[i], config.input_side) for i in test])
    return M.fold_report(np.asarray(labels)[test], predict(params, x))


def _with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    return replace(config, seed=seed)


def population_experiment(cfg: AuditConfig = AuditConfig(), n_train: int = 400,
                          n_test: int = 100) -> dict:
    """Confounded (paediatric normals vs adult COVID) against deconfounded (all adult).

    ``n_train`` and ``n_test`` are totals per arm; a further 10% of the
    training count is generated for early-stopping validation.
    """
    per_class_train = n_train // 2
    per_class_test = n_test // 2
    per_class_val = max(1, per_class_train // 10)
    n = per_class_train + per_class_val + per_class_test
    arms = {}
    for mode in ("confounded", "deconfounded"):
        folds = []
        for seed in cfg.seeds:
            manifest, images = synth_arm(n, mode, "covid", seed, cfg)
            split = stratified_split(manifest, seed=seed,
                                     counts=(per_class_train, per_class_val, per_class_test))
            folds.append(evaluate_split(manifest, images, split, _with_seed(cfg.train, seed)))
        arms[mode] = _summary(folds)
    arms["gap"] = arms["confounded"]["aggregate"]["accuracy"]["mean"] - \
        arms["deconfounded"]["aggregate"]["accuracy"]["mean"]
    return arms


def severity_experiment(cfg: AuditConfig = AuditConfig(), scale: int = 2) -> dict:
    """Normal vs each severity tier with the published split sizes times ``scale``."""
    out = {}
    for setting, (tier, counts) in SEVERITY_SETTINGS.items():
        scaled = tuple(c * scale for c in counts)
        folds = []
        for seed in cfg.seeds:
            manifest, images = synth_arm(sum(scaled), "deconfounded", f"severity:{setting}", seed, cfg)
            split = stratified_split(manifest, seed=seed, counts=scaled)
            folds.append(evaluate_split(manifest, images, split, _with_seed(cfg.train, seed)))
        out[tier] = _summary(folds)
    accs = [out[t]["aggregate"]["accuracy"]["mean"] for t, _ in SEVERITY_SETTINGS.values()]
    out["monotone"] = all(a < b for a, b in zip(accs, accs[1:]))
    return out


def binary_experiment(cfg: AuditConfig = AuditConfig(), n_per_class: int = 200, k: int = 5,
                      seed: int = 0) -> dict:
    """k-fold CV of normal vs COVID on a single deconfounded synthetic set."""
    manifest, images = synth_arm(n_per_class, "deconfounded", "covid", seed, cfg)
    plan = kfold_plan(manifest, k=k, seed=seed)
    folds = [evaluate_split(manifest, images, plan.split(f), _with_seed(cfg.train, seed))
             for f in range(k)]
    return _summary(folds)


def _summary(folds) -> dict:
    return M.report_json(folds)


EXPERIMENTS = {
    "population": population_experiment,
    "severity": severity_experiment,
    "binary": binary_experiment,
}
