"""Per-case normalisation, patch extraction, rotation augmentation and
stratified fold assignment.

Volumes are ``D x H x W`` arrays in the T2W reference frame; patches are
2-D axial windows at the lesion-center slice, stored ``S x S x C``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, IngestionError, ShapeError
from .io import LesionRecord, read_volume, write_volume
from .rng import Rng

PATCH_SIZES = (30, 32, 34, 64)
DEFAULT_CHANNELS = ("T2W", "ADC", "DWI_b50")
POLICY1_ANGLES = (2.0, 4.0, 6.0)
POLICY2_COPIES = {"benign": 5, "malignant": 19}


class ConstantVolumeWarning(UserWarning):
    """A modality had max == min and was normalised to all zeros."""


def _is_t2w(name: str) -> bool:
    return name.upper().replace("-", "").replace("_", "") in ("T2W", "T2")


def normalize_case(volumes: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Clip the top 1% of T2W, then min-max scale every modality to [0, 1].

    Each modality of a case is scaled independently over its whole volume.
    Constant volumes come back as zeros and raise :class:`ConstantVolumeWarning`.
    """
    if not volumes:
        raise IngestionError("no volumes to normalise")
    out = {}
    for name, vol in volumes.items():
        v = np.asarray(vol, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise IngestionError(f"modality {name} contains non-finite voxels")
        if _is_t2w(name):
            v = np.minimum(v, np.percentile(v, 99))
        lo, hi = v.min(), v.max()
        if hi == lo:
            warnings.warn(f"modality {name} is constant; emitting zeros", ConstantVolumeWarning, stacklevel=2)
            out[name] = np.zeros(v.shape, dtype=np.float32)
        else:
            out[name] = ((v - lo) / (hi - lo)).astype(np.float32)
    return out


@dataclass(frozen=True)
class Patch:
    channels: tuple[str, ...]
    data: np.ndarray  # S x S x C, float32
    record: LesionRecord
    angle: float = 0.0
    rotated: bool = False

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def provenance(self) -> str:
        return f"rotated({self.angle:g})" if self.rotated else "original"

    @property
    def target(self) -> int:
        return 1 if self.record.is_malignant else 0


@dataclass
class Case:
    """A lesion record with its normalised axial slices (``H x W`` per modality)."""

    record: LesionRecord
    slices: dict[str, np.ndarray] = field(repr=False)


def axial_slices(volumes: Mapping[str, np.ndarray], record: LesionRecord) -> dict[str, np.ndarray]:
    z, y, x = record.center
    out = {}
    for name, vol in volumes.items():
        vol = np.asarray(vol)
        if vol.ndim == 2:
            out[name] = vol
            continue
        d, h, w = vol.shape
        if not (0 <= z < d and 0 <= y < h and 0 <= x < w):
            raise IngestionError(
                f"lesion {record.lesion_id}: center {record.center} outside {name} volume {vol.shape}"
            )
        out[name] = vol[z]
    return out


def load_case(record: LesionRecord, channels: Sequence[str] = DEFAULT_CHANNELS) -> Case:
    """Read the record's volumes, normalise per modality and keep the center slice."""
    volumes = {}
    for name in channels:
        if name not in record.modalities:
            raise IngestionError(f"lesion {record.lesion_id}: missing modality {name}")
        volumes[name] = read_volume(record.modalities[name])
    return Case(record, axial_slices(normalize_case(volumes), record))


def load_cases(records: Sequence[LesionRecord], channels: Sequence[str] = DEFAULT_CHANNELS) -> list[Case]:
    return [load_case(r, channels) for r in records]


def _window_origin(center: int, size: int, extent: int) -> int:
    return int(np.clip(center - size // 2, 0, max(extent - size, 0)))


def _stack(slices: Mapping[str, np.ndarray], channels: Sequence[str], record: LesionRecord) -> np.ndarray:
    missing = [c for c in channels if c not in slices]
    if missing:
        raise IngestionError(f"lesion {record.lesion_id}: missing modality {missing[0]}")
    shapes = {slices[c].shape for c in channels}
    if len(shapes) != 1:
        raise ShapeError(f"lesion {record.lesion_id}: modality slices differ in shape {shapes}")
    return np.stack([np.asarray(slices[c], dtype=np.float32) for c in channels], axis=-1)


def _fit_to_size(img: np.ndarray, cy: int, cx: int, size: int):
    """Reflect-pad an ``H x W x C`` image too small for the window; shift the center accordingly."""
    h, w = img.shape[:2]
    py, px = max(size - h, 0), max(size - w, 0)
    if py or px:
        img = np.pad(img, ((py // 2, py - py // 2), (px // 2, px - px // 2), (0, 0)), mode="reflect")
        cy, cx = cy + py // 2, cx + px // 2
    return img, cy, cx


def _check_size(size: int) -> None:
    if size % 2:
        raise ConfigError(f"patch size must be even, got {size}")


def extract_patch(volumes, record: LesionRecord, size: int = 32, channels: Sequence[str] | None = None) -> Patch:
    """Axial ``size x size`` window centred on the lesion, clamped to lie inside the slice."""
    _check_size(size)
    channels = tuple(channels or volumes.keys())
    img = _stack(axial_slices(volumes, record), channels, record)
    _, cy, cx = record.center
    img, cy, cx = _fit_to_size(img, cy, cx, size)
    y0 = _window_origin(cy, size, img.shape[0])
    x0 = _window_origin(cx, size, img.shape[1])
    data = np.ascontiguousarray(img[y0 : y0 + size, x0 : x0 + size])
    return Patch(channels, data, record)


def rotate_patch(volumes, record: LesionRecord, size: int, angle_deg: float, channels: Sequence[str] | None = None) -> Patch:
    """Rotate the lesion neighbourhood about the patch-window center, bilinear, then crop.

    Samples come from the whole slice, so rotated corners are filled with real
    tissue wherever the slice extends far enough; beyond the slice edge the
    nearest border value is used. ``angle_deg = 90`` equals ``np.rot90`` of the
    unrotated patch.
    """
    _check_size(size)
    channels = tuple(channels or volumes.keys())
    img = _stack(axial_slices(volumes, record), channels, record)
    _, cy, cx = record.center
    img, cy, cx = _fit_to_size(img, cy, cx, size)
    y0 = _window_origin(cy, size, img.shape[0])
    x0 = _window_origin(cx, size, img.shape[1])
    mid = (size - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = np.meshgrid(np.arange(size) - mid, np.arange(size) - mid, indexing="ij")
    src_y = y0 + mid + c * dy + s * dx
    src_x = x0 + mid - s * dy + c * dx
    out = np.empty((size, size, len(channels)), dtype=np.float32)
    for k in range(len(channels)):
        out[..., k] = ndimage.map_coordinates(
            img[..., k].astype(np.float64), [src_y, src_x], order=1, mode="nearest"
        )
    return Patch(channels, out, record, float(angle_deg), True)


def case_patch(case: Case, size: int, channels: Sequence[str], angle: float | None = None) -> Patch:
    if angle is None:
        return extract_patch(case.slices, case.record, size, channels)
    return rotate_patch(case.slices, case.record, size, angle, channels)


def augment_policy1(cases: Sequence[Case], size: int = 32, channels: Sequence[str] = DEFAULT_CHANNELS) -> list[Patch]:
    """Benign: original only. Malignant: original plus 2, 4 and 6 degree rotations."""
    out = []
    for case in cases:
        out.append(case_patch(case, size, channels))
        if case.record.is_malignant:
            out.extend(case_patch(case, size, channels, a) for a in POLICY1_ANGLES)
    return out


def augment_policy2(cases: Sequence[Case], rng: Rng, size: int = 32, channels: Sequence[str] = DEFAULT_CHANNELS) -> list[Patch]:
    """Original plus 5 (benign) or 19 (malignant) rotations at uniform random angles.

    Angles come from a per-lesion sub-stream of ``rng``, so a lesion's copies
    do not depend on which other lesions are in the list.
    """
    out = []
    for case in cases:
        out.append(case_patch(case, size, channels))
        copies = POLICY2_COPIES.get(case.record.label, 0)
        for a in rng.spawn(case.record.lesion_id).angles(copies):
            out.append(case_patch(case, size, channels, float(a)))
    return out


def augment(cases: Sequence[Case], policy: int, rng: Rng, size: int, channels: Sequence[str]) -> list[Patch]:
    if policy == 0:
        return [case_patch(c, size, channels) for c in cases]
    if policy == 1:
        return augment_policy1(cases, size, channels)
    if policy == 2:
        return augment_policy2(cases, rng, size, channels)
    raise ConfigError(f"unknown augmentation policy {policy}")


# --------------------------------------------------------------------------
# cross-validation folds
# --------------------------------------------------------------------------


@dataclass
class FoldSplit:
    k: int
    assignment: dict[str, int]

    def val_ids(self, fold: int) -> set[str]:
        return {lid for lid, f in self.assignment.items() if f == fold}

    def train_ids(self, fold: int) -> set[str]:
        return {lid for lid, f in self.assignment.items() if f != fold}

    def to_json(self) -> dict:
        return {"k": self.k, "assignment": dict(sorted(self.assignment.items()))}

    @classmethod
    def from_json(cls, obj) -> "FoldSplit":
        return cls(int(obj["k"]), {str(k): int(v) for k, v in obj["assignment"].items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "FoldSplit":
        return cls.from_json(json.loads(Path(path).read_text()))


def stratified_folds(records: Sequence[LesionRecord], k: int = 10, rng: Rng | None = None) -> FoldSplit:
    """Deal shuffled lesions of each class round-robin over ``k`` folds.

    Per-class fold counts differ by at most one; the benign deal continues
    where the malignant one stopped so total fold sizes stay level too.
    Records labelled ``unknown`` are ignored.
    """
    if k < 1:
        raise ConfigError(f"fold count must be positive, got {k}")
    rng = rng or Rng(0)
    assignment: dict[str, int] = {}
    start = 0
    for label in ("malignant", "benign"):
        ids = sorted(r.lesion_id for r in records if r.label == label)
        if len(ids) < k:
            raise ConfigError(f"need at least {k} {label} lesions for {k}-fold CV, found {len(ids)}")
        order = rng.spawn(f"folds/{label}").permutation(len(ids))
        for pos, idx in enumerate(order):
            assignment[ids[idx]] = (start + pos) % k
        start = (start + len(ids)) % k
    return FoldSplit(k, assignment)


def split_cases(cases: Sequence[Case], split: FoldSplit, fold: int) -> tuple[list[Case], list[Case]]:
    val = split.val_ids(fold)
    train_cases = [c for c in cases if c.record.lesion_id in split.assignment and c.record.lesion_id not in val]
    val_cases = [c for c in cases if c.record.lesion_id in val]
    return train_cases, val_cases


def fold_patches(
    cases: Sequence[Case],
    split: FoldSplit,
    fold: int,
    policy: int,
    rng: Rng,
    size: int,
    channels: Sequence[str],
) -> tuple[list[Patch], list[Patch]]:
    """Split at lesion level first, then augment the training side only."""
    train_cases, val_cases = split_cases(cases, split, fold)
    train = augment(train_cases, policy, rng, size, channels)
    val = [case_patch(c, size, channels) for c in val_cases]
    val_ids = {p.record.lesion_id for p in val}
    leaked = val_ids & {p.record.lesion_id for p in train}
    if leaked:
        raise AssertionError(f"validation lesions leaked into training: {sorted(leaked)[:3]}")
    return train, val


def stack_patches(patches: Sequence[Patch]) -> tuple[np.ndarray, np.ndarray]:
    """``(N x S x S x C float32 batch, int targets)``."""
    x = np.stack([p.data for p in patches]).astype(np.float32, copy=False)
    y = np.array([p.target for p in patches], dtype=np.int64)
    return x, y


# --------------------------------------------------------------------------
# patch bundles
# --------------------------------------------------------------------------


def write_patch_bundle(directory, patches: Sequence[Patch]) -> Path:
    """One MPV1 raster (D = 1) per patch channel plus ``patches.json`` metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, p in enumerate(patches):
        files = []
        for k, ch in enumerate(p.channels):
            name = f"{i:05d}_{p.record.lesion_id}_{ch}.mpv"
            write_volume(directory / name, p.data[..., k])
            files.append(name)
        entries.append(
            {
                "index": i,
                "record": p.record.to_json(),
                "channels": list(p.channels),
                "size": p.size,
                "provenance": p.provenance,
                "angle": p.angle,
                "files": files,
            }
        )
    sidecar = directory / "patches.json"
    sidecar.write_text(json.dumps({"patches": entries}, indent=1, sort_keys=True) + "\n")
    return sidecar


def read_patch_bundle(directory) -> list[Patch]:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "patches.json").read_text())
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read patch bundle {directory}: {exc}") from exc
    patches = []
    for e in meta["patches"]:
        r = e["record"]
        rec = LesionRecord(r["patient_id"], r["lesion_id"], r["zone"], r["label"], tuple(r["center"]), r["modalities"])
        data = np.stack([np.asarray(read_volume_2d(directory / f)) for f in e["files"]], axis=-1)
        patches.append(Patch(tuple(e["channels"]), data, rec, float(e["angle"]), e["provenance"] != "original"))
    return patches


def read_volume_2d(path) -> np.ndarray:
    vol = read_volume(path)
    if vol.shape[0] != 1:
        raise ShapeError(f"{path}: expected a 2-D raster (D = 1), got D = {vol.shape[0]}")
    return vol[0]
