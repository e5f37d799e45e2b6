"""Seeded synthetic stand-in for an mpMRI lesion cohort.

Each synthetic patient gets one lesion and three raw-intensity volumes
(T2W, ADC, DWI_b50) with smooth background texture. Lesions are soft blobs
whose contrast depends on the label in the *informative* channels: by
default malignant lesions are dark on ADC and bright on DWI, benign ones
are not. Uninformative channels show the same blob for both classes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import normalize_case
from .errors import ConfigError
from .io import LesionRecord, write_manifest, write_volume
from .rng import Rng

MODALITIES = ("T2W", "ADC", "DWI_b50")
_LEVEL = np.array([500.0, 1400.0, 250.0])
_SPREAD = np.array([180.0, 300.0, 90.0])
_SHARED = np.array([-0.9, -0.5, 0.5])
_MALIGNANT = np.array([-1.4, -1.6, 1.6])
_BENIGN = np.array([0.4, 0.5, -0.4])


@dataclass
class SynthConfig:
    lesions: int = 320
    ratio: float = 0.25
    seed: int = 0
    shape: tuple[int, int, int] = (3, 80, 80)
    informative: tuple[int, ...] = (1, 2)
    noise: float = 0.15
    radius: tuple[float, float] = (3.0, 5.5)


def class_amplitudes(label: str, informative=(1, 2)) -> np.ndarray:
    amp = _SHARED.copy()
    sig = _MALIGNANT if label == "malignant" else _BENIGN
    for c in informative:
        amp[c] = sig[c]
    return amp


def render_case(rng: Rng, shape, center, label: str, radius: float, informative=(1, 2), noise: float = 0.15):
    """Raw volumes (modality -> ``D x H x W`` float32) and the in-plane lesion mask."""
    d, h, w = shape
    cz, cy, cx = center
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    blob = np.exp(-r2 / (2.0 * (radius / 1.4) ** 2)) * (np.abs(zz - cz) <= 1)
    gain = 0.7 + 0.5 * rng.uniform()
    amp = class_amplitudes(label, informative) * gain
    volumes = {}
    for c, name in enumerate(MODALITIES):
        texture = ndimage.gaussian_filter(rng.normal(shape), sigma=(0, 6, 6))
        texture /= texture.std() + 1e-12
        base = _LEVEL[c] + _SPREAD[c] * (0.6 * texture + noise * rng.normal(shape))
        vol = base + _SPREAD[c] * amp[c] * blob
        if name == "T2W":
            hot = rng.permutation(vol.size)[:3]
            vol.reshape(-1)[hot] = vol.max() * 10.0
        volumes[name] = np.maximum(vol, 0.0).astype(np.float32)
    mask = r2 <= (radius + 1.0) ** 2
    return volumes, mask[cz]


def synth_patch(rng: Rng, size: int, label: str = "malignant", offset=(0, 0), informative=(1, 2)):
    """One normalised ``size x size x 3`` patch with a lesion at ``center + offset`` and its mask."""
    center = (0, size // 2 + offset[0], size // 2 + offset[1])
    radius = 3.0 + 2.5 * rng.uniform()
    volumes, mask = render_case(rng, (1, size, size), center, label, radius, informative)
    norm = normalize_case(volumes)
    data = np.stack([norm[m][0] for m in MODALITIES], axis=-1)
    return data, mask


def synth_generate(out_dir, config: SynthConfig) -> list[LesionRecord]:
    """Write ``manifest.jsonl`` and ``volumes/*.mpv`` under ``out_dir``; fully seeded."""
    if config.lesions < 20:
        raise ConfigError("synthetic cohort needs at least 20 lesions")
    if not 0.0 < config.ratio < 1.0:
        raise ConfigError("ratio (malignant fraction) must lie in (0, 1)")
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    root = Rng(config.seed).spawn("synth")
    n_mal = int(round(config.lesions * config.ratio))
    labels = np.array(["benign"] * config.lesions, dtype=object)
    labels[root.spawn("labels").permutation(config.lesions)[:n_mal]] = "malignant"
    d, h, w = config.shape
    records = []
    for i in range(config.lesions):
        rng = root.spawn(f"lesion/{i}")
        pid = f"SYN-{i:04d}"
        center = (
            d // 2,
            int(h // 4 + rng.next_u32() % (h // 2)),
            int(w // 4 + rng.next_u32() % (w // 2)),
        )
        lo, hi = config.radius
        radius = lo + (hi - lo) * rng.uniform()
        volumes, _ = render_case(rng, config.shape, center, labels[i], radius, config.informative, config.noise)
        paths = {}
        for name, vol in volumes.items():
            rel = f"volumes/{pid}_{name}.mpv"
            write_volume(out / rel, vol)
            paths[name] = rel
        zone = "PZ" if rng.uniform() < 0.7 else "CG"
        records.append(LesionRecord(pid, f"{pid}-L0", zone, str(labels[i]), center, paths))
    write_manifest(out / "manifest.jsonl", records)
    return [
        LesionRecord(r.patient_id, r.lesion_id, r.zone, r.label, r.center, {k: str(out / v) for k, v in r.modalities.items()})
        for r in records
    ]
