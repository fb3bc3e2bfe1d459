"""Command-line entry point: ``cxrscreen <subcommand> [flags]``.

Every subcommand writes its artifacts under ``--out`` together with a
``run.json`` recording the effective configuration. Settings resolve as
built-in defaults, then the ``--config`` TOML file (top-level keys, then a
table named after the subcommand), then explicit flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import metrics as M
from .dataset import (
    FoldPlan, Manifest, SplitPlan, compute_class_weights, dedup, kfold_plan, parse_manifest,
    reconcile_registry, save_json, stratified_split,
)
from .enhance import ClaheParams
from .experiments import EXPERIMENTS, AuditConfig
from .imgcore import ImageIOError, load_image, save_image
from .markers import MarkerParams, detect_markers
from .pipeline import PreprocessConfig, preprocess_image
from .synth import corner_marker, dataset_specs, generate_image
from .trainer import AugmentParams, ModelParams, TrainConfig, features, predict, train

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# Defaults per subcommand. Keys double as flag names (underscores become dashes).
DEFAULTS: dict[str, dict] = {
    "synth": {"out": None, "seed": 0, "n": 50, "mode": "confounded", "task": "covid", "side": 64,
              "markers": 0.0},
    "preprocess": {"manifest": None, "out": None, "tiles": 8, "clip": 2.0, "radius": 3,
                   "no_normalize": False, "no_clahe": False, "no_markers": False, "jobs": 1},
    "detect-markers": {"manifest": None, "out": None, "highpass": False, "jobs": 1},
    "curate": {"manifest": None, "out": None, "covid_label": "covid19"},
    "split": {"manifest": None, "out": None, "seed": 0, "fractions": [0.7, 0.1, 0.2]},
    "kfold": {"manifest": None, "out": None, "seed": 0, "folds": 5, "val_frac": 0.1},
    "train": {"manifest": None, "split": None, "out": None, "seed": 0},
    "evaluate": {"manifest": None, "out": None, "seed": 0, "folds": 5, "val_frac": 0.1,
                 "plan": None, "model": None, "split": None},
    "audit": {"out": None, "seed": 0, "experiment": "population", "n_seeds": 5, "side": 64},
}
_TRAIN_KEYS = {"epochs": 30, "learning_rate": 1e-3, "batch_size": 8, "patience": 3,
               "input_side": 28, "class_weights": True, "augment": False}
for _cmd in ("train", "evaluate"):
    DEFAULTS[_cmd].update(_TRAIN_KEYS)
REQUIRED = {
    "synth": ("out",), "preprocess": ("manifest", "out"), "detect-markers": ("manifest", "out"),
    "curate": ("manifest", "out"), "split": ("manifest", "out"), "kfold": ("manifest", "out"),
    "train": ("manifest", "split", "out"), "evaluate": ("manifest", "out"), "audit": ("out",),
}


def _flag(p, name, **kw):
    p.add_argument("--" + name.replace("_", "-"), dest=name, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cxrscreen", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _flag(p, "config", help="TOML file supplying any flag")
        _flag(p, "out", help="output directory")
        return p

    p = add("synth", "generate a synthetic radiograph dataset")
    _flag(p, "seed", type=int)
    _flag(p, "n", type=int, help="images per class")
    _flag(p, "mode", choices=["confounded", "deconfounded"])
    _flag(p, "task", help="covid | population | severity:1..4")
    _flag(p, "side", type=int)
    _flag(p, "markers", type=float, help="fraction of images given a corner text marker")

    p = add("preprocess", "normalise, CLAHE and marker removal over a manifest")
    _flag(p, "manifest")
    _flag(p, "tiles", type=int, help="CLAHE tile grid (square)")
    _flag(p, "clip", type=float, help="CLAHE clip limit")
    _flag(p, "radius", type=int, help="inpainting radius")
    for skip in ("no_normalize", "no_clahe", "no_markers"):
        _flag(p, skip, action="store_true")
    _flag(p, "jobs", type=int)

    p = add("detect-markers", "write detected marker boxes per image")
    _flag(p, "manifest")
    _flag(p, "highpass", action="store_true")
    _flag(p, "jobs", type=int)

    p = add("curate", "deduplicate and reconcile against the source registry")
    _flag(p, "manifest")
    _flag(p, "covid_label")

    p = add("split", "stratified train/val/test split")
    _flag(p, "manifest")
    _flag(p, "seed", type=int)
    _flag(p, "fractions", type=_floats, help="train,val,test")

    p = add("kfold", "k-fold cross-validation plan")
    _flag(p, "manifest")
    _flag(p, "seed", type=int)
    _flag(p, "folds", type=int)
    _flag(p, "val_frac", type=float)

    for name, help_ in (("train", "train the reference classifier on a split"),
                        ("evaluate", "cross-validated fold reports and aggregate")):
        p = add(name, help_)
        _flag(p, "manifest")
        _flag(p, "seed", type=int)
        _flag(p, "split", help="split.json from the split subcommand")
        _flag(p, "epochs", type=int)
        _flag(p, "learning_rate", type=float)
        _flag(p, "batch_size", type=int)
        _flag(p, "patience", type=int)
        _flag(p, "input_side", type=int)
        _flag(p, "class_weights", action=argparse.BooleanOptionalAction)
        _flag(p, "augment", action=argparse.BooleanOptionalAction)
        if name == "evaluate":
            _flag(p, "folds", type=int)
            _flag(p, "val_frac", type=float)
            _flag(p, "plan", help="folds.json from the kfold subcommand")
            _flag(p, "model", help="model.json to score on --split's test partition")

    p = add("audit", "synthetic bias experiments")
    _flag(p, "experiment", choices=sorted(EXPERIMENTS))
    _flag(p, "seed", type=int)
    _flag(p, "n_seeds", type=int)
    _flag(p, "side", type=int)
    return parser


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",")]


def resolve(command: str, flags: dict) -> dict:
    """Merge defaults, the optional TOML file and explicit flags."""
    cfg = dict(DEFAULTS[command])
    config_path = flags.pop("config", None)
    if config_path is not None:
        with open(config_path, "rb") as fh:
            doc = tomllib.load(fh)
        # Top-level keys are shared by all subcommands; unknown ones are skipped.
        for key, value in doc.items():
            key = key.replace("-", "_")
            if not isinstance(value, dict) and key in cfg:
                cfg[key] = value
        for key, value in doc.get(command, {}).items():
            key = key.replace("-", "_")
            if key not in cfg:
                raise UsageError(f"unknown setting {key!r} for {command}")
            cfg[key] = value
    cfg.update(flags)
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if command == "evaluate" and cfg.get("model") is not None and cfg.get("split") is None:
        missing.append("split")
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + m.replace("_", "-")
                                                                     for m in missing))
    return cfg


# --- subcommands ----------------------------------------------------------------


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(cfg) -> dict:
    out = _out_dir(cfg)
    pairs = dataset_specs(cfg["n"], cfg["mode"], cfg["task"], cfg["seed"], cfg["side"])
    (out / "images").mkdir(exist_ok=True)
    truth = {}
    for rec, spec in pairs:
        rng = np.random.default_rng([spec.seed, 7])
        if rng.random() < cfg["markers"]:
            box, text = corner_marker(spec.side, rng)
            spec = dataclasses.replace(spec, marker=box, marker_text=text)
        result = generate_image(spec)
        save_image(result.image, out / rec.path)
        if result.marker_box is not None:
            truth[rec.path] = [result.marker_box.__dict__]
    manifest = Manifest([rec for rec, _ in pairs], out)
    manifest.write_csv(out / "manifest.csv")
    save_json(truth, out / "markers_truth.json")
    return {"images": len(pairs), "manifest": str(out / "manifest.csv")}


def _output_name(manifest: Manifest, i: int) -> str:
    p = Path(manifest[i].path)
    if p.is_absolute():
        p = Path("images") / f"{i:06d}_{p.name}"
    return str(p.with_suffix(".png"))


def _preprocess_one(args):
    src, dst, config = args
    img, found = preprocess_image(load_image(src), config)
    save_image(img, dst)
    return [b.__dict__ for b in found.boxes] if found else []


def _detect_one(args):
    src, params = args
    return [b.__dict__ for b in detect_markers(load_image(src), params).boxes]


def _map(fn, jobs, items):
    # Results come back in input order either way, so output is independent of jobs.
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def cmd_preprocess(cfg) -> dict:
    manifest = parse_manifest(cfg["manifest"])
    out = _out_dir(cfg)
    config = PreprocessConfig(
        normalize=not cfg["no_normalize"],
        clahe=not cfg["no_clahe"],
        remove_markers=not cfg["no_markers"],
        clahe_params=ClaheParams(tiles_x=cfg["tiles"], tiles_y=cfg["tiles"], clip_limit=cfg["clip"]),
        radius=cfg["radius"],
    )
    jobs = []
    records = []
    for i, rec in enumerate(manifest):
        name = _output_name(manifest, i)
        (out / name).parent.mkdir(parents=True, exist_ok=True)
        jobs.append((manifest.image_path(i), out / name, config))
        records.append(dataclasses.replace(rec, path=name))
    boxes = _map(_preprocess_one, cfg["jobs"], jobs)
    Manifest(records, out).write_csv(out / "manifest.csv")
    save_json({r.path: b for r, b in zip(records, boxes)}, out / "markers.json")
    return {"images": len(records), "markers": sum(len(b) for b in boxes)}


def cmd_detect_markers(cfg) -> dict:
    manifest = parse_manifest(cfg["manifest"])
    out = _out_dir(cfg)
    params = MarkerParams(highpass=cfg["highpass"])
    boxes = _map(_detect_one, cfg["jobs"], [(manifest.image_path(i), params) for i in range(len(manifest))])
    save_json({r.path: b for r, b in zip(manifest, boxes)}, out / "markers.json")
    return {"images": len(manifest), "markers": sum(len(b) for b in boxes)}


def cmd_curate(cfg) -> dict:
    manifest = parse_manifest(cfg["manifest"])
    out = _out_dir(cfg)
    kept, dropped = dedup(manifest)
    # Rewrite paths so the curated manifest resolves from the output directory.
    records = [dataclasses.replace(r, path=os.path.relpath(kept.image_path(i), out))
               for i, r in enumerate(kept)]
    Manifest(records, out).write_csv(out / "manifest.csv")
    report = {"kept": len(kept), "dropped": dropped,
              "registry": reconcile_registry(kept, cfg["covid_label"])}
    save_json(report, out / "curate.json")
    return {"kept": len(kept), "dropped": len(dropped)}


def cmd_split(cfg) -> dict:
    manifest = parse_manifest(cfg["manifest"])
    out = _out_dir(cfg)
    plan = stratified_split(manifest, tuple(cfg["fractions"]), cfg["seed"])
    save_json(plan.to_json(manifest), out / "split.json")
    return {"counts": {c: list(v) for c, v in plan.counts().items()}}


def cmd_kfold(cfg) -> dict:
    manifest = parse_manifest(cfg["manifest"])
    out = _out_dir(cfg)
    plan = kfold_plan(manifest, cfg["folds"], cfg["val_frac"], cfg["seed"])
    save_json(plan.to_json(manifest), out / "folds.json")
    return {"folds": plan.k}


def _train_config(cfg) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["learning_rate"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        patience=cfg["patience"], seed=cfg["seed"], input_side=cfg["input_side"],
        augment=AugmentParams() if cfg["augment"] else None,
    )


def _load_all(manifest: Manifest) -> list[np.ndarray]:
    return [load_image(manifest.image_path(i)) for i in range(len(manifest))]


def _fit(manifest, images, split: SplitPlan, cfg) -> tuple[ModelParams, dict]:
    config = _train_config(cfg)
    labels = manifest.label_indices(split.classes)
    if cfg["class_weights"]:
        tr = split.indices("train")
        counts = np.bincount(np.asarray(labels)[tr], minlength=len(split.classes))
        config = dataclasses.replace(config, weights=compute_class_weights(counts.clip(min=1)))
    else:
        config = dataclasses.replace(config, weights=np.ones(len(split.classes)))
    params, history = train(split, images, labels, config)
    return params, history.to_json()


def _score(manifest, images, split: SplitPlan, params: ModelParams, side: int) -> M.FoldReport:
    labels = np.asarray(manifest.label_indices(split.classes))
    test = split.indices("test")
    x = np.stack([features(images[i], side) for i in test])
    return M.fold_report(labels[test], predict(params, x))


def cmd_train(cfg) -> dict:
    manifest = parse_manifest(cfg["manifest"])
    out = _out_dir(cfg)
    split = SplitPlan.from_json(json.loads(Path(cfg["split"]).read_text()), manifest)
    params, history = _fit(manifest, _load_all(manifest), split, cfg)
    model = {"classes": split.classes, "input_side": cfg["input_side"], "params": params.to_json()}
    save_json(model, out / "model.json")
    save_json(history, out / "history.json")
    return {"best_epoch": history["best_epoch"], "stopped_epoch": history["stopped_epoch"]}


def cmd_evaluate(cfg) -> dict:
    manifest = parse_manifest(cfg["manifest"])
    out = _out_dir(cfg)
    images = _load_all(manifest)
    if cfg["model"] is not None:
        model = json.loads(Path(cfg["model"]).read_text())
        split = SplitPlan.from_json(json.loads(Path(cfg["split"]).read_text()), manifest)
        fold = _score(manifest, images, split, ModelParams.from_json(model["params"]),
                      model["input_side"])
        report = {"folds": [fold.to_json()]}
    else:
        if cfg["plan"] is not None:
            plan = FoldPlan.from_json(json.loads(Path(cfg["plan"]).read_text()), manifest)
        else:
            plan = kfold_plan(manifest, cfg["folds"], cfg["val_frac"], cfg["seed"])
        folds = []
        for f in range(plan.k):
            split = plan.split(f)
            params, _ = _fit(manifest, images, split, cfg)
            folds.append(_score(manifest, images, split, params, cfg["input_side"]))
        report = M.report_json(folds)
        (out / "table.txt").write_text(M.format_table(folds) + "\n")
    save_json(report, out / "report.json")
    return {"folds": len(report["folds"]),
            "accuracy": report.get("aggregate", {}).get("accuracy", report["folds"][0]["accuracy"])}


def cmd_audit(cfg) -> dict:
    out = _out_dir(cfg)
    if cfg["n_seeds"] < 2:
        raise UsageError("--n-seeds must be at least 2 to aggregate")
    base = AuditConfig()
    audit = AuditConfig(side=cfg["side"], seeds=tuple(cfg["seed"] + i for i in range(cfg["n_seeds"])),
                        train=base.train, preprocess=base.preprocess)
    fn = EXPERIMENTS[cfg["experiment"]]
    if cfg["experiment"] == "binary":
        report = fn(audit, seed=cfg["seed"])
    else:
        report = fn(audit)
    settings = dataclasses.asdict(audit)
    cfg["resolved"] = settings
    report = {"experiment": cfg["experiment"], "settings": settings, "result": report}
    save_json(report, out / "report.json")
    return _audit_summary(report)


def _audit_summary(report) -> dict:
    res = report["result"]
    if "aggregate" in res:
        return {"accuracy": res["aggregate"]["accuracy"]}
    return {k: (v["aggregate"]["accuracy"]["mean"] if isinstance(v, dict) else v) for k, v in res.items()}


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "detect-markers": cmd_detect_markers,
    "curate": cmd_curate, "split": cmd_split, "kfold": cmd_kfold, "train": cmd_train,
    "evaluate": cmd_evaluate, "audit": cmd_audit,
}


def _error_json(exc: BaseException) -> dict:
    err = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("path", "line", "label", "needed", "available"):
        if getattr(exc, attr, None) is not None:
            err[attr] = getattr(exc, attr)
    if isinstance(exc, (FileNotFoundError, IsADirectoryError)) and exc.filename:
        err["path"] = str(exc.filename)
    return err


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        ns = vars(build_parser().parse_args(argv))
        command = ns.pop("command")
        cfg = resolve(command, ns)
        summary = COMMANDS[command](cfg)
        run = {"command": command, "argv": argv, "config": cfg, "version": __version__,
               "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
        save_json(run, Path(cfg["out"]) / "run.json")
    except UsageError as exc:
        print(json.dumps({"error": "UsageError", "message": str(exc)}), file=sys.stderr)
        return 2
    except (ImageIOError, ValueError, OSError, KeyError, tomllib.TOMLDecodeError) as exc:
        print(json.dumps(_error_json(exc)), file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
