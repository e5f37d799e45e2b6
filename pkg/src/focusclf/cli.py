"""``focusclf`` command line: one subcommand per pipeline stage.

Settings resolve as built-in default < ``--config`` JSON < explicit flag.
Every run writes ``run_manifest.json`` into ``--out`` listing the resolved
configuration, its SHA-256 fingerprint and the produced artifacts.
Exit status: 0 success, 1 input/usage error, 2 numeric or internal error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import (
    FoldSplit, augment, case_patch, fold_patches, load_cases, read_patch_bundle, stratified_folds, write_patch_bundle,
)
from .errors import ConfigError, InputError
from .evaluation import (
    METRIC_COLUMNS, average_feature_maps, dump_json, export_feature_maps, format_table, modality_sweep,
    tap_table, write_embedding_csv, write_report,
)
from .io import canonical_json, read_manifest
from .metrics import as_binary, confusion_metrics
from .model import Checkpoint, CVResult, FoldResult, ModelConfig, cross_validate, decide, predict_patches
from .rng import Rng
from .saliency import CamConfig, build_cam_head, compute_cam, export_overlay, export_raw, finetune_cam
from .synth import SynthConfig, synth_generate
from .tsne import tsne
from .welm import HyperGrid, parse_taps, patch_features, read_feature_csv, write_feature_csv

log = logging.getLogger("focusclf")


def _ints(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v.strip()]


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _names(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        return [str(v) for v in text]
    return [v.strip() for v in str(text).split(",") if v.strip()]


# key -> (type, default, help)
OPTIONS = {
    "manifest": (str, None, "lesion manifest (JSON lines)"),
    "lesions": (int, 320, "number of synthetic lesions"),
    "ratio": (float, 0.25, "malignant fraction of the synthetic cohort"),
    "informative": (str, "1,2", "channel indices carrying the class signature"),
    "channels": (str, "T2W,ADC,DWI_b50", "comma-separated modality names"),
    "size": (int, 32, "patch size in pixels"),
    "policy": (int, 1, "augmentation policy 0/1/2"),
    "k": (int, 10, "number of cross-validation folds"),
    "fold": (int, None, "0-based fold index"),
    "folds": (str, None, "comma-separated 0-based folds to run (default all)"),
    "epochs": (int, 100, "maximum training epochs"),
    "batch_size": (int, 32, "mini-batch size"),
    "lr": (float, 1e-3, "Adam learning rate"),
    "patience": (int, 10, "early-stopping patience in epochs (0 disables)"),
    "kernel_size": (int, 3, "convolution kernel size"),
    "label_noise": (float, 0.0, "fraction of training labels flipped per fold"),
    "checkpoint": (str, None, "CNN checkpoint file"),
    "cv_dir": (str, None, "output directory of a cv-train run"),
    "patches": (str, None, "patch bundle directory"),
    "taps": (str, "C1+C4", "comma-separated tap sets, e.g. C1+C4,FC2"),
    "pooling": (str, "channel-average", "conv tap reduction: channel-average or flatten"),
    "grid_c": (str, ",".join(str(2.0**e) for e in range(-6, 13, 2)), "wELM C grid"),
    "grid_gamma": (str, ",".join(str(2.0**e) for e in range(-10, 5, 2)), "wELM gamma grid"),
    "features": (str, None, "feature CSV (lesion_id,label,f0..)"),
    "perplexity": (float, 30.0, "t-SNE perplexity"),
    "iterations": (int, 1000, "t-SNE iterations"),
    "cls": (int, 1, "CAM class index (1 = malignant)"),
    "cam_epochs": (int, 200, "CAM head fine-tuning epoch cap"),
    "full_finetune": (bool, False, "fine-tune the conv stack along with the CAM head"),
    "limit": (int, 0, "process at most this many lesions (0 = all)"),
    "maps": (bool, False, "also export average feature maps"),
    "combos": (str, None, "modality combinations, e.g. T2W+ADC,ADC (default: all subsets)"),
    "pred": (str, None, "predictions CSV (lesion_id + decision or p_malignant)"),
    "labels": (str, None, "labels CSV (lesion_id,label)"),
}

COMMANDS = {
    "synth": ("generate a synthetic cohort", ["lesions", "ratio", "informative"]),
    "extract-patches": ("write center patches of every lesion", ["manifest", "channels", "size", "limit"]),
    "augment": ("write the augmented training patches of one fold", ["manifest", "channels", "size", "policy", "k", "fold"]),
    "cv-train": ("k-fold cross-validated CNN training", [
        "manifest", "channels", "size", "policy", "k", "folds", "epochs", "batch_size", "lr", "patience",
        "kernel_size", "label_noise"]),
    "predict": ("score lesions with a checkpoint", ["checkpoint", "manifest", "patches"]),
    "features": ("export tap features of a checkpoint", ["checkpoint", "manifest", "taps", "pooling", "maps", "limit"]),
    "welm": ("wELM on tap features of a cv-train run", ["cv_dir", "manifest", "taps", "pooling", "grid_c", "grid_gamma", "label_noise"]),
    "cam": ("fine-tune a CAM head and export overlays", ["checkpoint", "manifest", "size", "cls", "cam_epochs", "full_finetune", "limit"]),
    "tsne": ("2-D embedding of a feature CSV", ["features", "perplexity", "iterations"]),
    "eval": ("metrics from prediction and label CSVs", ["pred", "labels"]),
    "sweep": ("modality-combination sweep on one fold", [
        "manifest", "combos", "size", "policy", "k", "fold", "epochs", "batch_size", "lr", "patience", "kernel_size"]),
}
PATH_KEYS = ("manifest", "checkpoint", "cv_dir", "patches", "features", "pred", "labels")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="focusclf", description="Lesion patch classification pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (help_text, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="master seed (default 0)")
        p.add_argument("--out", help="output directory (default .)")
        p.add_argument("--jobs", type=int, help="parallel workers (default $FOCUSCLF_JOBS or 1)")
        for key in keys:
            typ, _, h = OPTIONS[key]
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=key, action="store_const", const=True, help=h)
            else:
                p.add_argument(flag, dest=key, type=typ, help=h)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    keys = COMMANDS[args.command][1]
    file_cfg = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        base = Path(args.config).parent
        for k in PATH_KEYS + ("out",):
            if isinstance(file_cfg.get(k), str) and not Path(file_cfg[k]).is_absolute():
                file_cfg[k] = str(base / file_cfg[k])
    cfg = {"command": args.command}
    env_jobs = os.environ.get("FOCUSCLF_JOBS")
    for key, default in (("seed", 0), ("out", "."), ("jobs", int(env_jobs) if env_jobs else 1)):
        cfg[key] = file_cfg.get(key, default)
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    for key in keys:
        typ, default, _ = OPTIONS[key]
        value = file_cfg.get(key, default)
        if getattr(args, key) is not None:
            value = getattr(args, key)
        if isinstance(value, list) and typ is str:
            value = ",".join(str(v) for v in value)
        cfg[key] = value
    for key in PATH_KEYS:
        if cfg.get(key) is not None and not Path(cfg[key]).exists():
            raise InputError(f"--{key.replace('_', '-')}: {cfg[key]} does not exist")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    return cfg


def fingerprint(cfg: dict) -> str:
    """Hash of the settings that determine results (output location and worker count excluded)."""
    relevant = {k: v for k, v in cfg.items() if k not in ("out", "jobs")}
    return hashlib.sha256(canonical_json(relevant).encode()).hexdigest()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_manifest(out: Path, cfg: dict, artifacts) -> Path:
    entries = []
    for p in sorted({Path(a) for a in artifacts}):
        if p.is_file():
            entries.append({"path": str(p.relative_to(out)) if p.is_relative_to(out) else str(p), "sha256": _sha256(p)})
    path = out / "run_manifest.json"
    path.write_text(dump_json({"config": cfg, "fingerprint": fingerprint(cfg), "artifacts": entries}))
    return path


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------


def _need(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise InputError(f"{cfg['command']}: --{k.replace('_', '-')} is required")


def _labelled(records):
    return [r for r in records if r.label != "unknown"]


def _model_config(cfg: dict) -> ModelConfig:
    config = ModelConfig(
        input_size=cfg["size"], channels=tuple(_names(cfg.get("channels", "T2W,ADC,DWI_b50"))),
        kernel_size=cfg["kernel_size"], lr=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        seed=cfg["seed"], augmentation=cfg["policy"], patience=cfg["patience"] or None,
    )
    config.validate()
    return config


def _write_text(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


# --------------------------------------------------------------------------
# subcommands; each returns the list of artifacts it wrote
# --------------------------------------------------------------------------


def cmd_synth(cfg, out: Path):
    sc = SynthConfig(lesions=cfg["lesions"], ratio=cfg["ratio"], seed=cfg["seed"], informative=tuple(_ints(cfg["informative"])))
    records = synth_generate(out, sc)
    n_mal = sum(r.is_malignant for r in records)
    print(f"wrote {len(records)} lesions ({n_mal} malignant, {len(records) - n_mal} benign) to {out}")
    return [out / "manifest.jsonl"] + [Path(p) for r in records for p in r.modalities.values()]


def cmd_extract_patches(cfg, out: Path):
    _need(cfg, "manifest")
    records = read_manifest(cfg["manifest"])
    if cfg["limit"]:
        records = records[: cfg["limit"]]
    channels = _names(cfg["channels"])
    cases = load_cases(records, channels)
    patches = [case_patch(c, cfg["size"], channels) for c in cases]
    sidecar = write_patch_bundle(out / "patches", patches)
    print(f"extracted {len(patches)} patches of {cfg['size']}x{cfg['size']}x{len(channels)}")
    return [sidecar] + sorted((out / "patches").glob("*.mpv"))


def cmd_augment(cfg, out: Path):
    _need(cfg, "manifest")
    channels = _names(cfg["channels"])
    records = _labelled(read_manifest(cfg["manifest"]))
    cases = load_cases(records, channels)
    root = Rng(cfg["seed"])
    if cfg["fold"] is None:
        patches = augment(cases, cfg["policy"], root.spawn("augment"), cfg["size"], channels)
    else:
        split = stratified_folds(records, cfg["k"], root.spawn("folds"))
        patches, _ = fold_patches(cases, split, cfg["fold"], cfg["policy"], root.spawn("augment"), cfg["size"], channels)
    sidecar = write_patch_bundle(out / "augmented", patches)
    n_mal = sum(p.target for p in patches)
    counts = {"malignant": n_mal, "benign": len(patches) - n_mal, "policy": cfg["policy"], "fold": cfg["fold"]}
    report = _write_text(out / "augment_counts.json", dump_json(counts))
    print(f"policy {cfg['policy']}: {n_mal} malignant / {len(patches) - n_mal} benign patches")
    return [sidecar, report] + sorted((out / "augmented").glob("*.mpv"))


CV_COLUMNS = ("fold", "sensitivity", "specificity", "g_mean", "auc", "accuracy", "tp", "fp", "tn", "fn", "best_epoch")


def cmd_cv_train(cfg, out: Path):
    _need(cfg, "manifest")
    config = _model_config(cfg)
    records = _labelled(read_manifest(cfg["manifest"]))
    cases = load_cases(records, config.channels)
    folds = _ints(cfg["folds"]) if cfg["folds"] else None
    cv = cross_validate(cases, config, k=cfg["k"], jobs=cfg["jobs"], label_noise=cfg["label_noise"], folds=folds)
    artifacts = []
    split_path = out / "split.json"
    cv.split.save(split_path)
    artifacts.append(split_path)
    for f in cv.folds:
        path = out / f"fold_{f.fold + 1:02d}.ckpt"
        f.checkpoint.save(path)
        artifacts.append(path)
    summary = cv.summary()
    scores = {"folds": [{"fold": f.fold + 1, "lesion_ids": f.val_ids, "p_malignant": f.val_scores} for f in cv.folds]}
    artifacts.append(_write_text(out / "val_scores.json", dump_json(scores)))
    avg = {"fold": "mean", **summary["average"]}
    artifacts += write_report(out, "cv_report", summary["rows"] + [avg], CV_COLUMNS,
                              {"best_fold": summary["best_fold"], "k": summary["k"], "label_noise": cfg["label_noise"]})
    print(format_table(summary["rows"] + [avg], CV_COLUMNS), end="")
    return artifacts


def load_cv_dir(cv_dir, cases) -> CVResult:
    """Rebuild a CVResult (checkpoints, split, validation metrics) from a cv-train directory."""
    cv_dir = Path(cv_dir)
    split = FoldSplit.load(cv_dir / "split.json")
    folds = []
    for path in sorted(cv_dir.glob("fold_*.ckpt")):
        fold = int(path.stem.split("_")[1]) - 1
        ckpt = Checkpoint.load(path)
        by_id = {c.record.lesion_id: c for c in cases}
        val = [case_patch(by_id[i], ckpt.config.input_size, ckpt.config.channels) for i in sorted(split.val_ids(fold))]
        proba = predict_patches(ckpt, val)
        y = np.array([p.target for p in val])
        metrics = confusion_metrics(decide(proba), y, proba[:, 1], fold=fold)
        folds.append(FoldResult(fold, ckpt, metrics, [p.record.lesion_id for p in val], proba[:, 1].tolist()))
    if not folds:
        raise InputError(f"{cv_dir}: no fold checkpoints found")
    return CVResult(split, folds)


def _score_rows(ids, labels, proba):
    return [
        {"lesion_id": i, "label": lab, "p_benign": float(p[0]), "p_malignant": float(p[1]), "decision": int(p[1] > p[0])}
        for i, lab, p in zip(ids, labels, proba)
    ]


def cmd_predict(cfg, out: Path):
    _need(cfg, "checkpoint")
    ckpt = Checkpoint.load(cfg["checkpoint"])
    if cfg["patches"]:
        patches = read_patch_bundle(cfg["patches"])
    elif cfg["manifest"]:
        cases = load_cases(read_manifest(cfg["manifest"]), ckpt.config.channels)
        patches = [case_patch(c, ckpt.config.input_size, ckpt.config.channels) for c in cases]
    else:
        raise InputError("predict: give --manifest or --patches")
    proba = predict_patches(ckpt, patches)
    rows = _score_rows([p.record.lesion_id for p in patches], [p.record.label for p in patches], proba)
    path = out / "predictions.csv"
    cols = ("lesion_id", "label", "p_benign", "p_malignant", "decision")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    print(f"scored {len(rows)} lesions -> {path}")
    return [path]


def cmd_features(cfg, out: Path):
    _need(cfg, "checkpoint", "manifest")
    ckpt = Checkpoint.load(cfg["checkpoint"])
    records = _labelled(read_manifest(cfg["manifest"]))
    if cfg["limit"]:
        records = records[: cfg["limit"]]
    cases = load_cases(records, ckpt.config.channels)
    patches = [case_patch(c, ckpt.config.input_size, ckpt.config.channels) for c in cases]
    artifacts = []
    for taps in _names(cfg["taps"]):
        ids, y, X = patch_features(ckpt, patches, taps, cfg["pooling"])
        path = out / f"features_{'+'.join(parse_taps(taps))}.csv"
        write_feature_csv(path, ids, y, X)
        artifacts.append(path)
        print(f"{taps}: {X.shape[0]} x {X.shape[1]} -> {path}")
    if cfg["maps"]:
        for p in patches:
            artifacts += export_feature_maps(average_feature_maps(ckpt, p), out / "avgmaps", p.record.lesion_id)
    return artifacts


def cmd_welm(cfg, out: Path):
    _need(cfg, "cv_dir", "manifest")
    records = _labelled(read_manifest(cfg["manifest"]))
    split_ids = set(json.loads((Path(cfg["cv_dir"]) / "split.json").read_text())["assignment"])
    records = [r for r in records if r.lesion_id in split_ids]
    first = Checkpoint.load(sorted(Path(cfg["cv_dir"]).glob("fold_*.ckpt"))[0])
    cases = load_cases(records, first.config.channels)
    cv = load_cv_dir(cfg["cv_dir"], cases)
    grid = HyperGrid(_floats(cfg["grid_c"]), _floats(cfg["grid_gamma"]))
    taps = ["+".join(parse_taps(t)) for t in _names(cfg["taps"])]
    table = tap_table(cv, cases, taps, grid, cfg["pooling"], cfg["label_noise"])
    cols = ("model",) + METRIC_COLUMNS
    artifacts = write_report(out, "welm_report", table["rows"], cols, {"per_fold": table["per_fold"], "pooling": cfg["pooling"]})
    print(format_table(table["rows"], cols), end="")
    return artifacts


def cmd_cam(cfg, out: Path):
    _need(cfg, "checkpoint", "manifest")
    ckpt = Checkpoint.load(cfg["checkpoint"])
    ch, s0 = ckpt.config.channels, ckpt.config.input_size
    records = read_manifest(cfg["manifest"])
    cases = load_cases(records, ch)
    labelled = [c for c in cases if c.record.label != "unknown"]
    head = build_cam_head(ckpt, Rng(cfg["seed"]).spawn("cam-head"))
    train = [case_patch(c, s0, ch) for c in labelled]
    head = finetune_cam(head, train, CamConfig(epochs=cfg["cam_epochs"], frozen=not cfg["full_finetune"], seed=cfg["seed"]))
    size = max(cfg["size"], s0)
    shown = cases[: cfg["limit"]] if cfg["limit"] else cases
    (out / "cam").mkdir(exist_ok=True)
    artifacts = []
    for c in shown:
        patch = case_patch(c, size, ch)
        cam = compute_cam(head, patch, cfg["cls"])
        stem = out / "cam" / f"{c.record.lesion_id}_class{cfg['cls']}"
        export_overlay(cam, patch, stem.with_suffix(".ppm"))
        export_raw(cam, stem.with_suffix(".mpv"))
        artifacts += [stem.with_suffix(".ppm"), stem.with_suffix(".mpv")]
    info = {"head_log": head.log, "V": head.V.tolist(), "bias": head.bias.tolist(), "size": size}
    artifacts.append(_write_text(out / "cam_head.json", dump_json(info)))
    print(f"CAM head train accuracy {head.log['train_accuracy']:.3f}; {len(shown)} overlays in {out / 'cam'}")
    return artifacts


def cmd_tsne(cfg, out: Path):
    _need(cfg, "features")
    ids, y, X = read_feature_csv(cfg["features"])
    X = (X - X.mean(0)) / np.where(X.std(0) > 0, X.std(0), 1.0)
    emb = tsne(X, cfg["perplexity"], cfg["iterations"], cfg["seed"])
    path = out / "embedding.csv"
    write_embedding_csv(path, ids, y, emb.coords)
    rep = {"kl": emb.kl, "initial_kl": emb.initial_kl, "perplexity": emb.perplexity, "iterations": emb.iterations, "seed": emb.seed}
    print(f"t-SNE of {len(ids)} points: KL {emb.initial_kl:.3f} -> {emb.kl:.3f}")
    return [path, _write_text(out / "tsne_report.json", dump_json(rep))]


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_eval(cfg, out: Path):
    _need(cfg, "pred", "labels")
    preds = {r["lesion_id"]: r for r in _read_csv(cfg["pred"])}
    labels = {r["lesion_id"]: r["label"] for r in _read_csv(cfg["labels"])}
    missing = sorted(set(labels) - set(preds))
    if missing:
        raise InputError(f"no prediction for lesion {missing[0]!r}")
    ids = sorted(labels)
    y = as_binary([labels[i] for i in ids])
    first = preds[ids[0]]
    scores = None
    if "p_malignant" in first:
        scores = np.array([float(preds[i]["p_malignant"]) for i in ids])
    if "decision" in first:
        d = as_binary([preds[i]["decision"] for i in ids])
    elif scores is not None:
        d = (scores > 0.5).astype(np.int64)
    else:
        raise InputError("predictions need a decision or p_malignant column")
    rep = confusion_metrics(d, y, scores)
    sens, spec, g = rep.triple()
    print(f"({sens:.2f}, {spec:.2f}, {g:.2f})")
    return [_write_text(out / "metrics.json", dump_json(rep.to_json()))]


def cmd_sweep(cfg, out: Path):
    _need(cfg, "manifest")
    records = _labelled(read_manifest(cfg["manifest"]))
    available = sorted(set.intersection(*(set(r.modalities) for r in records)))
    if cfg["combos"]:
        combos = [tuple(c.split("+")) for c in _names(cfg["combos"])]
    else:
        order = [m for m in ("T2W", "ADC", "DWI_b50", "Ktrans") if m in available] + [m for m in available if m not in ("T2W", "ADC", "DWI_b50", "Ktrans")]
        combos = [c for n in range(1, len(order) + 1) for c in itertools.combinations(order, n)]
    needed = sorted({m for c in combos for m in c})
    cases = load_cases(records, needed)
    config = _model_config({**cfg, "channels": ",".join(needed)})
    fold = 6 if cfg["fold"] is None else cfg["fold"]
    table = modality_sweep(cases, combos, config, fold=fold, k=cfg["k"])
    rows = table.as_rows()
    cols = ("combination",) + METRIC_COLUMNS
    artifacts = write_report(out, "sweep_report", rows, cols, {"fold": fold, "best": "+".join(table.best())})
    print(format_table(rows, cols), end="")
    return artifacts


HANDLERS = {
    "synth": cmd_synth, "extract-patches": cmd_extract_patches, "augment": cmd_augment, "cv-train": cmd_cv_train,
    "predict": cmd_predict, "features": cmd_features, "welm": cmd_welm, "cam": cmd_cam, "tsne": cmd_tsne,
    "eval": cmd_eval, "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        artifacts = HANDLERS[args.command](cfg, out)
        write_run_manifest(out, cfg, artifacts)
    except (InputError, OSError) as exc:
        print(f"focusclf {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # numeric, state and internal failures
        print(f"focusclf {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
