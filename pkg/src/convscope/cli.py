"""Command-line entry point: ``convscope <command> [flags]``.

Every command accepts ``--config FILE`` (ini-style, ``[common]`` plus one
section per command); explicit flags override file values. Each run writes
``run.json`` into its output directory with the merged config, seed,
``git describe`` and the paths it produced. ``convscope replay run.json``
re-executes a run from that file alone.

Layers are addressed by 1-based stage number (``--layer 2`` is the second
conv stage) unless stated otherwise.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time

import numpy as np

from . import __version__
from .arch import ArchitectureError, preset, load_architecture
from .data import QUADRANT_TEXTURES, SHAPE_CLASSES, quadrant_dataset, shapes_dataset
from .io import (CodecError, CorruptionError, ManifestError, VersionError, atomic_write, load_config, load_image,
                 load_landmarks, load_manifest, load_split, save_checkpoint, save_feature_matrix, save_image,
                 write_manifest)
from .layers import ParameterError
from .model import Model
from .tensor import ShapeError
from .trainer import TrainConfig, TrainingDiverged, train

log = logging.getLogger("convscope")


class UsageError(Exception):
    pass


# exit codes per error category
CATEGORIES = [
    (UsageError, "usage", 2),
    ((ArchitectureError,), "spec", 4),
    ((CorruptionError, VersionError), "checkpoint", 5),
    ((ManifestError, CodecError, FileNotFoundError, LookupError), "input", 3),
    ((ParameterError, ShapeError, ValueError), "parameter", 3),
    (TrainingDiverged, "training", 6),
]


# -- argument surface -----------------------------------------------------------------------

def _ints(text: str) -> list:
    return [int(t) for t in str(text).replace(" ", "").split(",") if t]


def _floats(text: str) -> list:
    text = str(text).replace(" ", "")
    if ":" in text:  # start:stop:step, stop inclusive
        a, b, s = (float(v) for v in text.split(":"))
        return [float(v) for v in np.round(np.arange(a, b + s / 2, s), 10)]
    return [float(t) for t in text.split(",") if t]


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _init_std(text):
    return None if str(text).lower() in ("he", "fan-in", "none") else float(text)


# name -> (type, default, help); None default means "not set"
OPTIONS = {
    "common": {
        "out": (str, None, "output directory"),
        "seed": (int, 0, "random seed"),
        "log_level": (str, "info", "logging level"),
    },
    "make-data": {
        "kind": (str, "shapes", "shapes | quadrant"),
        "per_class": (int, 500, "training images per class (quadrant: total / 4)"),
        "val_per_class": (int, 20, "validation images per class"),
        "test_per_class": (int, 100, "test images per class"),
        "size": (int, 32, "image side in px"),
    },
    "train": {
        "data": (str, None, "dataset manifest JSON"),
        "arch": (str, "desk", "preset name or architecture file"),
        "classes": (int, None, "override classifier width (default: manifest class count)"),
        "epochs": (int, 5, "epochs"),
        "lr": (float, 1e-2, "learning rate"),
        "momentum": (float, 0.9, "momentum"),
        "batch": (int, 64, "minibatch size"),
        "init_std": (_init_std, "he", "weight init std, or 'he' for fan-in scaling"),
        "input_scale": (float, 1 / 64, "multiplier applied after mean subtraction"),
        "rms_radius": (float, 0.1, "conv filter RMS cap"),
        "target": (int, None, "resize target before cropping (default: input size)"),
        "crops": (str, "10crop", "10crop | center training crops"),
        "snapshots": (_ints, "", "epochs to snapshot, e.g. 1,2,5"),
    },
    "eval": {
        "checkpoint": (str, None, "checkpoint file"),
        "data": (str, None, "dataset manifest JSON"),
        "split": (str, "test", "split to evaluate"),
        "crops": (str, "center", "center | 10crop"),
    },
    "viz": {
        "checkpoint": (str, None, "checkpoint file"),
        "data": (str, None, "dataset manifest JSON"),
        "split": (str, "val", "split searched for top activations"),
        "layer": (int, 1, "stage number"),
        "maps": (int, 16, "number of feature maps (random subset)"),
        "map_seed": (int, 0, "seed choosing the map subset"),
        "topk": (int, 9, "activations per map"),
    },
    "evolve": {
        "checkpoints": (str, None, "comma-separated snapshot files, in epoch order"),
        "data": (str, None, "dataset manifest JSON"),
        "split": (str, "val", "split searched for the strongest activation"),
        "layer": (int, 1, "stage number"),
        "maps": (int, 8, "number of feature maps"),
        "map_seed": (int, 0, "seed choosing the maps"),
    },
    "occlude": {
        "checkpoint": (str, None, "checkpoint file"),
        "image": (str, None, "PNG/PPM image (or use --data/--index)"),
        "data": (str, None, "dataset manifest JSON"),
        "split": (str, "test", "split holding --index"),
        "index": (int, 0, "image index within the split"),
        "label": (int, None, "true class (default: the image label, else the prediction)"),
        "layer": (int, 5, "stage whose map is summed"),
        "map": (str, "strongest", "map index or 'strongest'"),
        "size": (int, None, "occluder side in px (default 25 percent of the input)"),
        "stride": (int, 4, "occluder stride in px"),
        "fill": (float, 0.0, "fill in mean-subtracted space"),
    },
    "correspond": {
        "checkpoint": (str, None, "checkpoint file"),
        "data": (str, None, "dataset manifest JSON"),
        "split": (str, "test", "split holding the annotated images"),
        "landmarks": (str, None, "annotation JSON (default: the manifest's)"),
        "parts": (str, None, "comma-separated part names (default: all annotated)"),
        "layer": (int, 5, "stage number"),
        "random_trials": (int, 10, "random-region baselines"),
    },
    "invariance": {
        "checkpoint": (str, None, "checkpoint file"),
        "data": (str, None, "dataset manifest JSON"),
        "split": (str, "test", "split to sample"),
        "count": (int, 5, "images"),
        "kind": (str, "translate", "translate | scale | rotate"),
        "values": (_floats, "-8:8:2", "sweep values, list or start:stop:step"),
        "layers": (_ints, "1,7", "stage numbers"),
        "order": (int, 1, "resampling: 1 bilinear, 0 nearest"),
    },
    "transfer": {
        "checkpoint": (str, None, "checkpoint file"),
        "data": (str, None, "dataset manifest JSON"),
        "train_split": (str, "train", "split for head training"),
        "test_split": (str, "test", "split for evaluation"),
        "layer": (str, "7", "stage number, or 'input'"),
        "head": (str, "softmax", "softmax | svm"),
        "counts": (_ints, "", "images per class to sweep (default: all)"),
        "folds": (int, 5, "folds per count"),
        "head_epochs": (int, 100, "head training epochs"),
        "head_lr": (float, 0.1, "head learning rate"),
        "svm_c": (float, 1.0, "svm regularization constant"),
        "save_features": (_bool, False, "also write the feature matrices"),
    },
    "ablate": {
        "arch": (str, "desk", "preset name or architecture file"),
        "edit": (str, None, "edits separated by ';', e.g. 'remove 3,4; resize 6=512'"),
        "data": (str, None, "optional manifest: train the revised model from scratch"),
        "epochs": (int, 5, "epochs when training"),
        "lr": (float, 1e-2, "learning rate when training"),
        "batch": (int, 64, "minibatch size when training"),
    },
}
HELP = {
    "make-data": "write a synthetic PNG dataset and its manifest",
    "train": "train a network from scratch",
    "eval": "top-1 / top-5 error and per-class accuracy",
    "viz": "top-k activations of feature maps projected to pixels",
    "evolve": "project the same maps across training snapshots",
    "occlude": "occlusion sensitivity maps for one image",
    "correspond": "part-occlusion sign consistency across images",
    "invariance": "feature distance under translation, scale or rotation",
    "transfer": "frozen-feature heads and training-size sweeps",
    "ablate": "edit stages of an architecture, optionally retrain",
}
REQUIRED = {
    "train": ["data"], "eval": ["checkpoint", "data"], "viz": ["checkpoint", "data"],
    "evolve": ["checkpoints", "data"], "occlude": ["checkpoint"], "correspond": ["checkpoint", "data"],
    "invariance": ["checkpoint", "data"], "transfer": ["checkpoint", "data"], "ablate": ["edit"],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="convscope", description="Train, inspect and probe small convolutional networks.")
    p.add_argument("--version", action="version", version=f"convscope {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for cmd in [c for c in OPTIONS if c != "common"]:
        sp = sub.add_parser(cmd, help=HELP[cmd])
        sp.add_argument("--config", default=None, help="ini-style config file")
        for name, (_, default, help_) in {**OPTIONS["common"], **OPTIONS[cmd]}.items():
            sp.add_argument("--" + name.replace("_", "-"), dest=name, default=None,
                            help=f"{help_} (default: {default})")
    rp = sub.add_parser("replay", help="re-run from a run.json")
    rp.add_argument("manifest")
    rp.add_argument("--out", default=None, help="output directory (default: a sibling of the original)")
    return p


def merge_config(cmd: str, ns: argparse.Namespace) -> dict:
    """Defaults < config file < explicit flags, converted to typed values."""
    spec = {**OPTIONS["common"], **OPTIONS[cmd]}
    merged = {k: v[1] for k, v in spec.items()}
    if getattr(ns, "config", None):
        if not os.path.exists(ns.config):
            raise UsageError(f"config file {ns.config} not found")
        for key, value in load_config(ns.config, cmd).items():
            key = key.replace("-", "_")
            if key not in spec:
                raise UsageError(f"unknown key {key!r} in {ns.config}")
            merged[key] = value
    for key in spec:
        value = getattr(ns, key, None)
        if value is not None:
            merged[key] = value
    out = {}
    for key, (typ, _, _) in spec.items():
        value = merged[key]
        if value is None or (value == "" and typ is not _ints):
            out[key] = None
            continue
        try:
            # strings come from flags, files and defaults; anything else is already typed
            out[key] = typ(value) if isinstance(value, str) else value
        except (TypeError, ValueError):
            raise UsageError(f"--{key.replace('_', '-')}: bad value {value!r}") from None
    for key in REQUIRED.get(cmd, []):
        if out.get(key) is None:
            raise UsageError(f"{cmd}: --{key.replace('_', '-')} is required")
    if out["out"] is None:
        out["out"] = os.path.join("runs", cmd)
    return out


def git_describe() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"


def write_run_manifest(cmd: str, cfg: dict, outputs: list, started: float) -> str:
    path = os.path.join(cfg["out"], "run.json")
    doc = {"command": cmd, "version": __version__, "config": cfg, "seed": cfg["seed"],
           "git_describe": git_describe(), "outputs": sorted(set(outputs)),
           "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
           "seconds": round(time.time() - started, 3)}
    atomic_write(path, (json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n").encode())
    return path


# -- shared helpers ----------------------------------------------------------------------------

def _model(path) -> Model:
    m = Model.load(path)
    if m.prep is None:
        raise ManifestError(f"{path}: checkpoint carries no preprocessing buffers")
    return m


def _split(manifest_path, split, model: Model | None = None, target: int | None = None):
    man = load_manifest(manifest_path)
    t = target or (model.prep.target if model is not None else None)
    return man, load_split(man, split, t)


def _stage_layer(arch, stage: int) -> int:
    return arch.stage_output(stage)


# -- commands -------------------------------------------------------------------------------------

def cmd_make_data(cfg: dict) -> list:
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    size = cfg["size"]
    seed = cfg["seed"]
    if cfg["kind"] == "shapes":
        names = SHAPE_CLASSES
        parts = {"train": shapes_dataset(cfg["per_class"], size, seed),
                 "val": shapes_dataset(cfg["val_per_class"], size, seed + 1),
                 "test": shapes_dataset(cfg["test_per_class"], size, seed + 2)}
    elif cfg["kind"] == "quadrant":
        names = QUADRANT_TEXTURES
        k = len(names)
        parts = {"train": quadrant_dataset(cfg["per_class"] * k, size, seed)[0],
                 "val": quadrant_dataset(cfg["val_per_class"] * k, size, seed + 1)[0],
                 "test": quadrant_dataset(cfg["test_per_class"] * k, size, seed + 2)[0]}
    else:
        raise UsageError(f"--kind must be shapes or quadrant, got {cfg['kind']!r}")
    classes = {n: [] for n in names}
    splits = {}
    for split, ds in parts.items():
        splits[split] = []
        for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
            rel = f"{split}/{names[lab]}-{i:05d}.png"
            os.makedirs(os.path.join(out, split), exist_ok=True)
            save_image(img, os.path.join(out, rel))
            classes[names[lab]].append(rel)
            splits[split].append(rel)
    path = os.path.join(out, "manifest.json")
    write_manifest(path, classes, splits, ".")
    log.info("wrote %d images and %s", sum(len(v) for v in splits.values()), path)
    return [path]


def _train_to(arch, cfg: dict, man, tcfg: TrainConfig) -> tuple:
    target = tcfg.target or arch.input_shape[1]
    train_set = load_split(man, "train", target)
    val_set = load_split(man, "val", target) if man.splits.get("val") else None
    os.makedirs(cfg["out"], exist_ok=True)
    log_path = os.path.join(cfg["out"], "train_log.csv")
    res = train(arch, train_set, tcfg, val_set, out_dir=cfg["out"], log_path=log_path)
    ck_path = os.path.join(cfg["out"], "model.ckpt")
    digest = save_checkpoint(res.to_checkpoint(), ck_path)
    log.info("checkpoint %s sha256 %s", ck_path, digest)
    return res, [ck_path, log_path, *res.snapshots.values()], digest


def cmd_train(cfg: dict) -> list:
    man = load_manifest(cfg["data"])
    man.validate(eval_splits=[s for s in ("val",) if man.splits.get(s)], decode=False)
    classes = cfg["classes"] or len(man.class_names)
    arch = load_architecture(cfg["arch"])
    if arch.classes != classes:
        arch = preset(cfg["arch"], classes) if cfg["arch"] in ("desk", "imagenet") else arch
    if arch.classes != classes:
        raise ArchitectureError(f"architecture has {arch.classes} classes but the data has {classes}")
    tcfg = TrainConfig(lr=cfg["lr"], momentum=cfg["momentum"], batch=cfg["batch"], weight_init_std=cfg["init_std"],
                       input_scale=cfg["input_scale"], rms_radius=cfg["rms_radius"], max_epochs=cfg["epochs"],
                       seed=cfg["seed"], snapshot_epochs=cfg["snapshots"] or [], target=cfg["target"],
                       crops=cfg["crops"])
    res, outputs, digest = _train_to(arch, cfg, man, tcfg)
    cfg["checkpoint_sha256"] = digest
    return outputs


def cmd_eval(cfg: dict) -> list:
    from .transfer import per_class_accuracy

    model = _model(cfg["checkpoint"])
    man, ds = _split(cfg["data"], cfg["split"], model)
    if cfg["crops"] == "10crop":
        x = model.prep(ds.images, "eval10")
        probs = model.proba(x).reshape(len(ds), 10, -1).mean(axis=1)
    elif cfg["crops"] == "center":
        probs = model.proba(model.inputs(ds.images))
    else:
        raise UsageError("--crops must be center or 10crop")
    ranked = np.argsort(-probs, axis=1, kind="stable")
    top1 = float(np.mean(ranked[:, 0] != ds.labels))
    top5 = float(np.mean(~np.any(ranked[:, :5] == ds.labels[:, None], axis=1)))
    mean_pc, per_class = per_class_accuracy(ranked[:, 0], ds.labels, model.arch.classes, ds.class_names)
    doc = {"split": cfg["split"], "images": len(ds), "top1_error": top1, "top5_error": top5,
           "mean_per_class_accuracy": mean_pc, "per_class_accuracy": dict(zip(ds.class_names, per_class.tolist()))}
    path = os.path.join(cfg["out"], "metrics.json")
    atomic_write(path, json.dumps(doc, indent=1).encode())
    print(f"top1 error {top1:.4f}  top5 error {top5:.4f}  mean per-class acc {mean_pc:.4f}")
    return [path]


def _pick_maps(n_maps: int, count: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    return sorted(int(v) for v in rng.choice(n_maps, size=min(count, n_maps), replace=False))


def cmd_viz(cfg: dict) -> list:
    from .deconvnet import ActivationSelection, crop_box, project, render_grid, top_k
    from .network import net_forward

    model = _model(cfg["checkpoint"])
    man, ds = _split(cfg["data"], cfg["split"], model)
    layer = _stage_layer(model.arch, cfg["layer"])
    x = model.inputs(ds.images)
    n_maps = model.arch.shapes()[layer][0]
    maps = _pick_maps(n_maps, cfg["maps"], cfg["map_seed"])
    outputs = []
    index_lines = []
    for m in maps:
        best = top_k(model.arch, model.params, x, layer, m, cfg["topk"], ds.ids)
        projs, patches, entries = [], [], []
        for e in best:
            rec = net_forward(model.arch, model.params, x[e.index : e.index + 1])
            pr = project(model.arch, model.params, rec, ActivationSelection(layer, m, e.coord), e.image_id)
            raw = ds.images[e.index]
            projs.append(crop_box(pr.image, pr.box))
            patches.append(crop_box(raw, pr.box))
            entries.append({"image_id": e.image_id, "coord": list(e.coord), "value": e.value, "box": list(pr.box)})
        path = os.path.join(cfg["out"], f"stage{cfg['layer']}-map{m:04d}.png")
        render_grid(projs, patches, path=path)
        outputs.append(path)
        index_lines.append(json.dumps({"stage": cfg["layer"], "layer": layer, "map": m, "grid": os.path.basename(path),
                                       "truncated": best.truncated, "entries": entries}))
    idx = os.path.join(cfg["out"], "index.jsonl")
    atomic_write(idx, ("\n".join(index_lines) + "\n").encode())
    return outputs + [idx]


def cmd_evolve(cfg: dict) -> list:
    from .deconvnet import ActivationSelection, map_maxima, project, render_grid
    from .network import net_forward

    paths = [p for p in cfg["checkpoints"].split(",") if p]
    models = [_model(p) for p in paths]
    arch = models[0].arch
    if any(m.arch != arch for m in models):
        raise ArchitectureError("snapshots do not share one architecture")
    man, ds = _split(cfg["data"], cfg["split"], models[0])
    layer = _stage_layer(arch, cfg["layer"])
    maps = _pick_maps(arch.shapes()[layer][0], cfg["maps"], cfg["map_seed"])
    outputs, lines = [], []
    for m in maps:
        projs = []
        row = []
        for path, model in zip(paths, models):
            x = model.inputs(ds.images)
            values, coords = map_maxima(arch, model.params, x, layer, m)
            i = int(np.argmax(values))
            rec = net_forward(arch, model.params, x[i : i + 1])
            pr = project(arch, model.params, rec, ActivationSelection(layer, m, coords[i]), ds.ids[i])
            projs.append(pr.image)
            row.append({"checkpoint": path, "image_id": ds.ids[i], "coord": list(coords[i]), "value": float(values[i])})
        out = os.path.join(cfg["out"], f"stage{cfg['layer']}-map{m:04d}-evolution.png")
        render_grid(projs, layout=(1, len(projs)), path=out)
        outputs.append(out)
        lines.append(json.dumps({"map": m, "grid": os.path.basename(out), "snapshots": row}))
    idx = os.path.join(cfg["out"], "index.jsonl")
    atomic_write(idx, ("\n".join(lines) + "\n").encode())
    return outputs + [idx]


def cmd_occlude(cfg: dict) -> list:
    from .probes import occlusion_sweep, write_occlusion_report

    model = _model(cfg["checkpoint"])
    names = None
    if cfg["image"]:
        raw = load_image(cfg["image"])
        label = cfg["label"]
    elif cfg["data"]:
        man, ds = _split(cfg["data"], cfg["split"], model)
        if not 0 <= cfg["index"] < len(ds):
            raise UsageError(f"--index {cfg['index']} outside split of {len(ds)} images")
        raw = ds.images[cfg["index"]]
        label = cfg["label"] if cfg["label"] is not None else int(ds.labels[cfg["index"]])
        names = ds.class_names
    else:
        raise UsageError("occlude: give --image or --data")
    x = model.inputs([raw])[0]
    if label is None:
        label = int(model.proba(x[None]).argmax())
    map_index = cfg["map"] if cfg["map"] == "strongest" else int(cfg["map"])
    rep = occlusion_sweep(model, x, label, _stage_layer(model.arch, cfg["layer"]), map_index, cfg["size"],
                          cfg["stride"], cfg["fill"])
    paths = write_occlusion_report(rep, cfg["out"], class_names=names)
    print(f"baseline p={rep.baseline[0]:.4f}; min p={rep.prob_map.min():.4f} at centre {rep.argmin_centre()}")
    return list(paths.values())


def cmd_correspond(cfg: dict) -> list:
    from .probes import correspondence_score, feature_difference, occlude_part, resolve_part

    model = _model(cfg["checkpoint"])
    man, ds = _split(cfg["data"], cfg["split"], model)
    lm_path = cfg["landmarks"] or (man.path(man.landmarks) if man.landmarks else None)
    if lm_path is None:
        raise UsageError("correspond: no annotation file (--landmarks or manifest 'landmarks')")
    marks = load_landmarks(lm_path)
    layer = _stage_layer(model.arch, cfg["layer"])
    if model.prep.target != model.prep.crop:
        raise UsageError("correspond needs target == crop so annotations address network pixels")
    parts = cfg["parts"].split(",") if cfg["parts"] else sorted({p for v in marks.values() for p in v})
    rng = np.random.default_rng(cfg["seed"])
    h, w = model.arch.input_shape[1:]
    rows = ["part,layer,images,mean,std"]
    for part in parts:
        idx = [i for i, iid in enumerate(ds.ids) if iid in marks and part in marks[iid]]
        if len(idx) < 2:
            raise LookupError(f"part {part!r} is annotated in fewer than 2 images of split {cfg['split']!r}")
        x = model.inputs(ds.images[idx])
        eps = [feature_difference(model, xi, occlude_part(xi, part, 0.0, ds.ids[i], marks), layer)
               for xi, i in zip(x, idx)]
        res = correspondence_score(eps, layer=layer, part=part)
        rows.append(f"{part},{cfg['layer']},{len(idx)},{res.mean:.6f},{res.std:.6f}")
        for t in range(cfg["random_trials"]):
            eps = []
            for xi, i in zip(x, idx):
                y0, x0, y1, x1 = resolve_part(part, ds.ids[i], marks)
                ph, pw = y1 - y0, x1 - x0
                ry, rx = int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1))
                eps.append(feature_difference(model, xi, occlude_part(xi, (ry, rx, ry + ph, rx + pw)), layer))
            r = correspondence_score(eps, layer=layer, part=f"random-{part}")
            rows.append(f"random-{part}-{t},{cfg['layer']},{len(idx)},{r.mean:.6f},{r.std:.6f}")
    path = os.path.join(cfg["out"], "correspondence.csv")
    atomic_write(path, ("\n".join(rows) + "\n").encode())
    return [path]


def cmd_invariance(cfg: dict) -> list:
    from .probes import feature_spread, invariance_sweep, write_invariance_csv

    model = _model(cfg["checkpoint"])
    man, ds = _split(cfg["data"], cfg["split"], model)
    x = model.inputs(ds.images)
    rng = np.random.default_rng(cfg["seed"])
    pick = np.sort(rng.choice(len(ds), size=min(cfg["count"], len(ds)), replace=False))
    layers = [_stage_layer(model.arch, s) for s in cfg["layers"]]
    curves = invariance_sweep(model, x[pick], ds.labels[pick], layers, cfg["kind"], cfg["values"], cfg["order"])
    path = os.path.join(cfg["out"], f"invariance-{cfg['kind']}.csv")
    write_invariance_csv(curves, path, [ds.ids[i] for i in pick],
                         {l: f"stage{s}" for s, l in zip(cfg["layers"], layers)})
    spread = {str(s): feature_spread(model, x, l) for s, l in zip(cfg["layers"], layers)}
    sp = os.path.join(cfg["out"], "spread.json")
    atomic_write(sp, json.dumps({"stage_spread": spread}, indent=1).encode())
    return [path, sp]


def cmd_transfer(cfg: dict) -> list:
    from .transfer import HeadConfig, extract_features, size_sweep, write_sweep_csv

    model = _model(cfg["checkpoint"])
    man = load_manifest(cfg["data"])
    man.validate(eval_splits=[cfg["test_split"]], decode=False)
    tr = load_split(man, cfg["train_split"], model.prep.target)
    te = load_split(man, cfg["test_split"], model.prep.target)
    layer = "input" if cfg["layer"] == "input" else _stage_layer(model.arch, int(cfg["layer"]))
    ftr = extract_features(model, tr, layer)
    fte = extract_features(model, te, layer)
    outputs = []
    if cfg["save_features"]:
        for name, f in (("train", ftr), ("test", fte)):
            p = os.path.join(cfg["out"], f"features-{name}.bin")
            save_feature_matrix(p, f.features, f.layer, bytes.fromhex(model.source) if model.source else b"")
            outputs.append(p)
    counts = cfg["counts"] or [int(np.bincount(tr.labels).min())]
    hyper = HeadConfig(lr=cfg["head_lr"], epochs=cfg["head_epochs"], C=cfg["svm_c"], seed=cfg["seed"])
    points = size_sweep(ftr, fte, counts, cfg["folds"], cfg["head"], hyper, cfg["seed"], man.class_names)
    path = os.path.join(cfg["out"], f"transfer-{cfg['head']}-layer{cfg['layer']}.csv")
    write_sweep_csv(points, path)
    for p in points:
        print(f"{p.count:5d}/class  acc {p.mean:.4f} +- {p.std:.4f}")
    return outputs + [path]


def cmd_ablate(cfg: dict) -> list:
    from .transfer import ablate

    arch = load_architecture(cfg["arch"])
    edits = [e.strip() for e in cfg["edit"].split(";") if e.strip()]
    new = ablate(arch, edits)
    os.makedirs(cfg["out"], exist_ok=True)
    path = os.path.join(cfg["out"], "architecture.txt")
    atomic_write(path, new.to_text().encode())
    print(f"parameters: {arch.param_count()} -> {new.param_count()}")
    outputs = [path]
    if cfg["data"]:
        man = load_manifest(cfg["data"])
        tcfg = TrainConfig(lr=cfg["lr"], batch=cfg["batch"], max_epochs=cfg["epochs"], seed=cfg["seed"],
                           weight_init_std=None, input_scale=1 / 64)
        res, outs, digest = _train_to(new, cfg, man, tcfg)
        outputs.extend(outs)
    return outputs


COMMANDS = {"make-data": cmd_make_data, "train": cmd_train, "eval": cmd_eval, "viz": cmd_viz,
            "evolve": cmd_evolve, "occlude": cmd_occlude, "correspond": cmd_correspond,
            "invariance": cmd_invariance, "transfer": cmd_transfer, "ablate": cmd_ablate}


def run(cmd: str, cfg: dict) -> int:
    logging.basicConfig(level=getattr(logging, str(cfg["log_level"]).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    os.makedirs(cfg["out"], exist_ok=True)
    started = time.time()
    outputs = COMMANDS[cmd](cfg)
    write_run_manifest(cmd, cfg, outputs, started)
    return 0


def _replay(ns) -> tuple:
    with open(ns.manifest, encoding="utf-8") as fh:
        doc = json.load(fh)
    cmd = doc.get("command")
    if cmd not in COMMANDS:
        raise UsageError(f"{ns.manifest}: unknown command {cmd!r}")
    cfg = dict(doc["config"])
    cfg.pop("checkpoint_sha256", None)
    cfg["out"] = ns.out or cfg["out"].rstrip("/") + "-replay"
    return cmd, cfg


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if not argv:
            parser.print_usage(sys.stderr)
            raise UsageError("no command given")
        ns = parser.parse_args(argv)
        if ns.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("no command given")
        if ns.command == "replay":
            cmd, cfg = _replay(ns)
        else:
            cmd, cfg = ns.command, merge_config(ns.command, ns)
        return run(cmd, cfg)
    except Exception as exc:  # categorize, print one line, exit nonzero
        for types, name, code in CATEGORIES:
            if isinstance(exc, types):
                print(f"convscope: error[{name}]: {exc}", file=sys.stderr)
                return code
        print(f"convscope: error[internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        if os.environ.get("CONVSCOPE_TRACEBACK"):
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
