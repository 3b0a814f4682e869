"""Command-line entry point: ``claresnet <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import hsz
from . import rng as rngs
from .datapipe import SpectralPCA, SplitError, build_patchset, stratified_split

log = logging.getLogger("claresnet")

DATA_ENV = "CLARESNET_DATA"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

CUBE_FILE = "cube.hsz"
LABELS_FILE = "labels.hsz"
PCA_FILE = "pca.json"
SPLIT_FILE = "split.json"


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# --------------------------------------------------------------------------- config


def _check_types(cls, doc: dict, section: str) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"{section}: expected an object")
    out = {}
    known = {f.name: f for f in fields(cls)}
    for key, value in doc.items():
        if key not in known:
            raise ConfigError(f"{section}.{key}: unknown field")
        default = known[key].default
        ok = True
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(default, tuple):
            ok = isinstance(value, list)
        elif isinstance(default, str):
            ok = isinstance(value, str)
        if not ok:
            raise ConfigError(f"{section}.{key}: expected {type(default).__name__}, got {value!r}")
        out[key] = value
    return out


def load_run_config(path, n_classes: int | None = None):
    """Parse ``{"model": {...}, "train": {...}, "patch_size": 11}``."""
    from .model import ModelConfig
    from .training import TrainConfig

    doc = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    unknown = set(doc) - {"model", "train", "patch_size"}
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown top-level field")
    model_doc = _check_types(ModelConfig, doc.get("model", {}), "model")
    train_doc = _check_types(TrainConfig, doc.get("train", {}), "train")
    if n_classes is not None:
        declared = model_doc.setdefault("n_classes", n_classes)
        if declared < n_classes:
            raise ConfigError(f"model.n_classes: {declared} is below the {n_classes} classes in the labels")
    patch_size = doc.get("patch_size", 11)
    if not isinstance(patch_size, int) or patch_size < 7 or patch_size % 2 == 0:
        raise ConfigError(f"patch_size: must be an odd integer >= 7, got {patch_size!r}")
    try:
        model_cfg = ModelConfig(**model_doc)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    try:
        train_cfg = TrainConfig(**train_doc)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"train: {exc}") from exc
    return model_cfg, train_cfg, patch_size


# --------------------------------------------------------------------------- helpers


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _data_dir(arg) -> Path:
    value = arg or os.environ.get(DATA_ENV)
    if not value:
        raise ConfigError(f"data: pass --data or set {DATA_ENV}")
    return Path(value)


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing input file: {path}")
    return path


def _write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_data(data_dir: Path):
    cube = hsz.load_cube(_require(data_dir / CUBE_FILE))
    labels = hsz.load_labels(_require(data_dir / LABELS_FILE))
    split = hsz.load_split(_require(data_dir / SPLIT_FILE))
    if labels.shape != cube.shape[:2]:
        raise DataError(f"label map {labels.shape} does not match cube {cube.shape[:2]}")
    return cube, labels, split


def _seed_torch(seed: int) -> None:
    import torch

    torch.manual_seed(rngs.torch_seed(seed))


def _model_from_checkpoint(ckpt, n_bands: int | None = None):
    from .model import CLAReSNet, ModelConfig

    cfg = ModelConfig.from_dict(ckpt.model_config)
    if n_bands is not None:
        expected = ckpt.extra.get("n_bands")
        if expected is not None and expected != n_bands:
            raise DataError(f"checkpoint was trained on {expected} bands, data has {n_bands}")
        if n_bands > cfg.max_bands:
            raise DataError(f"data has {n_bands} bands, model supports at most {cfg.max_bands}")
    model = CLAReSNet(cfg)
    try:
        model.load_state_dict(ckpt.model_state)
    except RuntimeError as exc:
        raise DataError(f"checkpoint does not match its declared architecture: {exc}") from exc
    model.eval()
    return model


# --------------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from .synth import make_scene

    cube, labels = make_scene(args.classes, args.size, args.bands, args.seed, args.snr, args.noise_std)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hsz.save_cube(out / CUBE_FILE, cube)
    hsz.save_labels(out / LABELS_FILE, labels)
    counts = np.bincount(labels.ravel(), minlength=args.classes + 1)
    print(f"wrote {out / CUBE_FILE} {cube.shape}; labeled pixels per class: {counts[1:].tolist()}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cube = hsz.load_cube(_require(Path(args.cube)))
    labels = hsz.load_labels(_require(Path(args.labels)))
    if labels.shape != cube.shape[:2]:
        raise DataError(f"label map {labels.shape} does not match cube {cube.shape[:2]}")
    if args.components > cube.shape[-1]:
        raise ConfigError(f"components: {args.components} exceeds the {cube.shape[-1]} bands of the cube")
    pca = SpectralPCA(args.components, fit_on=args.fit_on).fit(cube, labels)
    reduced = pca.transform(cube)
    split = stratified_split(labels, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hsz.save_cube(out / CUBE_FILE, reduced)
    hsz.save_labels(out / LABELS_FILE, labels)
    _write_json(out / PCA_FILE, pca.to_dict())
    hsz.save_split(out / SPLIT_FILE, split)
    print(f"reduced cube {reduced.shape}; split train/val/test = "
          f"{len(split.train)}/{len(split.val)}/{len(split.test)}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import CLAReSNet, parameter_report
    from .training import (history_csv, load_checkpoint, restore_train_state, save_checkpoint,
                           train)

    data_dir = _data_dir(args.data)
    cube, labels, split = _load_data(data_dir)
    model_cfg, train_cfg, patch_size = load_run_config(args.config, int(labels.max()))
    if cube.shape[-1] > model_cfg.max_bands:
        raise ConfigError(f"model.max_bands: {model_cfg.max_bands} < {cube.shape[-1]} bands in the data")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    inputs = {name: data_dir / name for name in (CUBE_FILE, LABELS_FILE, SPLIT_FILE)}
    manifest = {
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "patch_size": patch_size,
        "seed": train_cfg.seed,
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in inputs.items()},
        "outputs": {k: str(out / k) for k in ("best.ckpt", "last.ckpt", "history.csv")},
    }
    _write_json(out / "manifest.json", manifest)

    train_set = build_patchset(cube, labels, split.train, patch_size)
    val_set = build_patchset(cube, labels, split.val, patch_size)

    _seed_torch(train_cfg.seed)
    model = CLAReSNet(model_cfg)
    print(parameter_report(model))
    state = None
    if args.resume:
        resume_path = Path(args.resume) if args.resume is not True else out / "last.ckpt"
        ckpt = load_checkpoint(_require(resume_path))
        if ckpt.model_config != model_cfg.to_dict():
            raise ConfigError("model: config differs from the checkpoint being resumed")
        state = restore_train_state(model, ckpt, train_cfg)
        log.info("resumed from %s at epoch %d (optimizer step %d)", resume_path, state.epoch,
                 state.optimizer.step_count)

    tag = {"patch_size": patch_size, "n_bands": int(cube.shape[-1])}

    def on_epoch(best, last):
        for ck in (best, last):
            if ck is not None:
                ck.extra.update(tag)
        if best is not None and best.epoch == last.epoch:
            save_checkpoint(out / "best.ckpt", best)
        save_checkpoint(out / "last.ckpt", last)
        (out / "history.csv").write_text(history_csv(last.extra["history"]))

    best, last, history = train(model, train_set, val_set, train_cfg, state=state, on_epoch=on_epoch)
    if best is not None:
        best.extra.update(tag)
        save_checkpoint(out / "best.ckpt", best)
    last.extra.update(tag)
    save_checkpoint(out / "last.ckpt", last)
    (out / "history.csv").write_text(history_csv(history))
    print(f"finished {len(history)} epochs; best val_acc "
          f"{max(r['val_acc'] for r in history):.4f}; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import metrics_report, pr_curve
    from .training import load_checkpoint, predict_logits

    import torch

    data_dir = _data_dir(args.data)
    cube, labels, split = _load_data(data_dir)
    ckpt = load_checkpoint(_require(Path(args.checkpoint)))
    model = _model_from_checkpoint(ckpt, cube.shape[-1])
    if labels.max() > model.cfg.n_classes:
        raise DataError(f"labels go up to {labels.max()}, checkpoint has {model.cfg.n_classes} classes")
    patch_size = ckpt.extra.get("patch_size", 11)
    data = build_patchset(cube, labels, split[args.split], patch_size)
    logits, emb = predict_logits(model, data.patches, args.batch_size, embed=True)
    probs = torch.softmax(logits.double(), dim=-1).numpy()
    emb = emb.numpy()
    report = metrics_report(data.labels, probs, emb)

    out = Path(args.out)
    (out / "pr").mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", report)
    for c in range(1, probs.shape[1] + 1):
        positives = data.labels == c
        if not positives.any():
            continue
        curve = pr_curve(probs[:, c - 1], positives)
        rows = ["threshold,precision,recall"]
        rows += [f"{t!r},{p!r},{r!r}" for t, p, r in zip(curve.thresholds.tolist(),
                                                         curve.precision.tolist(), curve.recall.tolist())]
        (out / "pr" / f"class_{c:02d}.csv").write_text("\n".join(rows) + "\n")
    hsz.save(out / "embeddings.hsz", emb.astype(np.float32))
    hsz.save(out / "embedding_labels.hsz", data.labels.astype(np.int32))
    print(f"{args.split}: OA {report['oa']:.4f}  BA {report['ba']:.4f}  kappa {report['kappa']}  "
          f"MCC {report['mcc']:.4f}  ARI {report['ari']:.4f}")
    return EXIT_OK


def cmd_map(args) -> int:
    from .maps import colorize, pgm16_bytes, ppm_bytes, predict_scene, uncertainty_image
    from .training import load_checkpoint

    cube = hsz.load_cube(_require(Path(args.cube)))
    ckpt = load_checkpoint(_require(Path(args.checkpoint)))
    model = _model_from_checkpoint(ckpt, cube.shape[-1])
    probs = predict_scene(model, cube, ckpt.extra.get("patch_size", 11), args.batch_size)
    class_map = probs.argmax(axis=-1).astype(np.int32) + 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "classmap.ppm").write_bytes(ppm_bytes(colorize(class_map)))
    hsz.save(out / "classmap.hsz", class_map)
    (out / "uncertainty.pgm").write_bytes(pgm16_bytes(uncertainty_image(probs)))
    if args.labels:
        labels = hsz.load_labels(_require(Path(args.labels)))
        if labels.shape != class_map.shape:
            raise DataError(f"label map {labels.shape} does not match cube {class_map.shape}")
        (out / "groundtruth.ppm").write_bytes(ppm_bytes(colorize(labels)))
    print(f"wrote maps of {class_map.shape[0]}x{class_map.shape[1]} to {out}")
    return EXIT_OK


def cmd_params(args) -> int:
    from .model import CLAReSNet, parameter_report

    model_cfg, _, _ = load_run_config(args.config)
    print(parameter_report(CLAReSNet(model_cfg)))
    return EXIT_OK


# --------------------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="claresnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic labeled scene")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--size", type=int, default=48)
    s.add_argument("--bands", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--snr", type=float, default=1.0, help="signal scale; 0 makes classes identical")
    s.add_argument("--noise-std", type=float, default=0.3)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="standardize, PCA-reduce and split a scene")
    s.add_argument("--cube", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--components", type=int, default=30)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fit-on", choices=("scene", "labeled"), default="scene")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train on a preprocessed data directory")
    s.add_argument("--data", help=f"preprocessed data dir (default: ${DATA_ENV})")
    s.add_argument("--config", help="JSON file with 'model', 'train' and 'patch_size' sections")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", nargs="?", const=True, default=None,
                   help="resume from a checkpoint (default: OUT/last.ckpt)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="metrics, PR curves and embeddings for one split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help=f"preprocessed data dir (default: ${DATA_ENV})")
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--out", required=True)
    s.add_argument("--batch-size", type=int, default=32)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("map", help="full-scene classification and uncertainty maps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--cube", required=True, help="preprocessed (reduced) cube")
    s.add_argument("--labels", help="optional ground truth, rendered alongside")
    s.add_argument("--out", required=True)
    s.add_argument("--batch-size", type=int, default=32)
    s.set_defaults(func=cmd_map)

    s = sub.add_parser("params", help="report the trainable parameter count")
    s.add_argument("--config")
    s.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    from .hsz import HszFormatError
    from .training import CheckpointFormatError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SplitError, HszFormatError, CheckpointFormatError, FileNotFoundError,
            OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
