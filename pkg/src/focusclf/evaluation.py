"""Experiment drivers and report rendering: modality sweep, layer-tap tables,
average feature maps and embedding exports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Case, FoldSplit, Patch, case_patch, split_cases, stack_patches, stratified_folds
from .errors import ConfigError, InputError
from .io import write_volume
from .metrics import MetricsReport, mean_report
from .model import CONV_TAPS, Checkpoint, CVResult, ModelConfig, conv_stack, noisy_cases, run_fold
from .rng import Rng
from .saliency import write_ppm
from .welm import TABLE_TAPS, FoldFeatures, HyperGrid, feature_matrix, welm_grid_search

# The eight modality combinations of the reference clinical sweep.
TABLE1_COMBOS = (
    ("T2W",), ("ADC",), ("DWI_b50",), ("T2W", "ADC"), ("T2W", "DWI_b50"),
    ("ADC", "DWI_b50"), ("T2W", "ADC", "DWI_b50"), ("T2W", "ADC", "DWI_b50", "Ktrans"),
)
METRIC_COLUMNS = ("sensitivity", "specificity", "g_mean", "auc", "accuracy")


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.2f}"
    return str(v)


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Aligned plain-text table; floats shown with two decimals."""
    cells = [list(columns)] + [[_fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def table_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (r.get(c, "") for c in columns)])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def dump_json(obj) -> str:
    """Deterministic JSON (sorted keys, NaN as null)."""
    return json.dumps(_jsonable(obj), indent=1, sort_keys=True) + "\n"


def write_report(out_dir, stem: str, rows: Sequence[dict], columns: Sequence[str], extra: dict | None = None) -> list[Path]:
    """``stem.json``, ``stem.txt`` and ``stem.csv`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{stem}.json", out / f"{stem}.txt", out / f"{stem}.csv"]
    paths[0].write_text(dump_json({"rows": list(rows), **(extra or {})}))
    paths[1].write_text(format_table(rows, columns))
    paths[2].write_text(table_csv(rows, columns))
    return paths


def write_embedding_csv(path, lesion_ids, labels, coords) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lesion_id", "label", "x", "y"])
        for lid, lab, (x, y) in zip(lesion_ids, labels, np.asarray(coords)):
            w.writerow([lid, int(lab), repr(float(x)), repr(float(y))])


# --------------------------------------------------------------------------
# modality sweep
# --------------------------------------------------------------------------


@dataclass
class SweepTable:
    rows: list[tuple[tuple[str, ...], MetricsReport]]
    fold: int

    def as_rows(self) -> list[dict]:
        return [{"combination": "+".join(combo), **{k: getattr(r, k) for k in METRIC_COLUMNS}} for combo, r in self.rows]

    def best(self) -> tuple[str, ...]:
        scores = [(-1.0 if math.isnan(r.g_mean) else r.g_mean) for _, r in self.rows]
        return self.rows[int(np.argmax(scores))][0]


def modality_sweep(
    cases: Sequence[Case],
    combos: Sequence[Sequence[str]],
    config: ModelConfig,
    fold: int = 6,
    split: FoldSplit | None = None,
    k: int = 10,
) -> SweepTable:
    """Train one model per modality combination on the same split, fold and seed."""
    if not combos:
        raise ConfigError("no modality combinations given")
    available = set(cases[0].slices) if cases else set()
    for combo in combos:
        if not combo:
            raise ConfigError("empty modality combination")
        missing = [m for m in combo if m not in available]
        if missing:
            raise InputError(f"modality {missing[0]!r} missing from the loaded cases")
    split = split or stratified_folds([c.record for c in cases], k, Rng(config.seed).spawn("folds"))
    if not 0 <= fold < split.k:
        raise ConfigError(f"fold {fold} out of range for {split.k}-fold split")
    rows = []
    for combo in combos:
        res = run_fold(cases, split, fold, replace(config, channels=tuple(combo)))
        rows.append((tuple(combo), res.metrics))
    return SweepTable(rows, fold)


# --------------------------------------------------------------------------
# layer taps with wELM
# --------------------------------------------------------------------------


def fold_features(
    cv: CVResult, cases: Sequence[Case], fold_index: int, taps, pooling: str = "channel-average", label_noise: float = 0.0,
) -> FoldFeatures:
    """Tap features of one fold: un-augmented training lesions (with the same
    label flips the CNN saw) and validation lesions, through that fold's model."""
    res = cv.folds[fold_index]
    ckpt = res.checkpoint
    cfg = ckpt.config
    train_cases, _ = split_cases(noisy_cases(cases, cv.split, res.fold, cfg, label_noise), cv.split, res.fold)
    _, val_cases = split_cases(cases, cv.split, res.fold)
    train = [case_patch(c, cfg.input_size, cfg.channels) for c in train_cases]
    val = [case_patch(c, cfg.input_size, cfg.channels) for c in val_cases]
    x_tr, y_tr = stack_patches(train)
    x_va, y_va = stack_patches(val)
    return FoldFeatures(
        res.fold, feature_matrix(ckpt, x_tr, taps, pooling), y_tr,
        feature_matrix(ckpt, x_va, taps, pooling), y_va, [p.record.lesion_id for p in val],
    )


def tap_table(
    cv: CVResult,
    cases: Sequence[Case],
    taps_list: Sequence[str] = TABLE_TAPS,
    grid: HyperGrid | None = None,
    pooling: str = "channel-average",
    label_noise: float = 0.0,
) -> dict:
    """Fold-averaged wELM metrics per tap set, plus the end-to-end CNN row."""
    grid = grid or HyperGrid()
    rows = [{"model": "CNN", **cv.average()}]
    per_fold = {"CNN": cv.summary()["rows"]}
    for taps in taps_list:
        ffs = [fold_features(cv, cases, i, taps, pooling, label_noise) for i in range(len(cv.folds))]
        res = welm_grid_search(ffs, grid)
        rows.append({"model": f"wELM {taps}", **res["average"]})
        per_fold[taps] = res["rows"]
    return {"rows": rows, "per_fold": per_fold, "pooling": pooling}


# --------------------------------------------------------------------------
# feature-map rendering
# --------------------------------------------------------------------------


def average_feature_maps(checkpoint: Checkpoint, patch) -> dict[str, np.ndarray]:
    """Channel-wise mean of each conv layer's post-ReLU maps (inference mode)."""
    data = patch.data if isinstance(patch, Patch) else np.asarray(patch)
    if data.ndim != 3 or data.shape[-1] != len(checkpoint.config.channels):
        raise InputError(f"patch shape {data.shape} does not match {len(checkpoint.config.channels)} channels")
    _, _, acts, _ = conv_stack(checkpoint.params, data[None].astype(np.float32), train=False)
    return {t: acts[t][0].astype(np.float64).mean(axis=-1) for t in CONV_TAPS}


def gray_pixels(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    g = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img, dtype=np.float64)
    v = np.rint(g * 255.0).astype(np.uint8)
    return np.repeat(v[..., None], 3, axis=-1)


def export_feature_maps(maps: dict[str, np.ndarray], out_dir, stem: str = "avgmap") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for tap, img in maps.items():
        vol, ppm = out / f"{stem}_{tap}.mpv", out / f"{stem}_{tap}.ppm"
        write_volume(vol, img.astype(np.float32))
        write_ppm(ppm, gray_pixels(img))
        paths += [vol, ppm]
    return paths
