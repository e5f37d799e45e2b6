"""On-disk formats: MPV1 volumes, JSON-lines manifests, patch bundles and
the FCLF tensor container used for CNN checkpoints and wELM models."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import FormatError, IngestionError

VOLUME_MAGIC = b"MPV1"
CONTAINER_MAGIC = b"FCLF"
CONTAINER_VERSION = 1

LABELS = ("benign", "malignant", "unknown")
ZONES = ("PZ", "CG", "other")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# --------------------------------------------------------------------------
# volumes
# --------------------------------------------------------------------------


def write_volume(path, data: np.ndarray) -> None:
    """Write a 2-D or 3-D array as an MPV1 file (2-D rasters get D = 1)."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise FormatError(f"volume must be 2-D or 3-D, got shape {arr.shape}")
    header = VOLUME_MAGIC + struct.pack("<3I", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def read_volume(path) -> np.ndarray:
    """Read an MPV1 file as a float32 ``D x H x W`` array."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read volume {path}: {exc}") from exc
    if raw[:4] != VOLUME_MAGIC or len(raw) < 16:
        raise FormatError(f"{path}: not an MPV1 volume")
    d, h, w = struct.unpack_from("<3I", raw, 4)
    payload = raw[16:]
    if len(payload) != d * h * w * 4:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {d * h * w * 4}")
    return np.frombuffer(payload, dtype="<f4").reshape(d, h, w).astype(np.float32)


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LesionRecord:
    patient_id: str
    lesion_id: str
    zone: str
    label: str
    center: tuple[int, int, int]  # (z, y, x)
    modalities: dict[str, str] = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.label not in LABELS:
            raise IngestionError(f"lesion {self.lesion_id}: unknown label {self.label!r}")
        if self.zone not in ZONES:
            raise IngestionError(f"lesion {self.lesion_id}: unknown zone {self.zone!r}")
        if len(self.center) != 3:
            raise IngestionError(f"lesion {self.lesion_id}: center must be [z, y, x]")

    @property
    def is_malignant(self) -> bool:
        return self.label == "malignant"

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "lesion_id": self.lesion_id,
            "zone": self.zone,
            "label": self.label,
            "center": list(self.center),
            "modalities": dict(self.modalities),
        }


def read_manifest(path, allow_unknown: bool = True) -> list[LesionRecord]:
    """Parse a JSON-lines manifest; relative modality paths resolve against its folder."""
    path = Path(path)
    base = path.parent
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IngestionError(f"cannot read manifest {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec = LesionRecord(
                patient_id=str(obj["patient_id"]),
                lesion_id=str(obj["lesion_id"]),
                zone=obj["zone"],
                label=obj["label"],
                center=tuple(int(v) for v in obj["center"]),
                modalities={k: str(base / v) for k, v in obj["modalities"].items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestionError(f"{path}:{lineno}: malformed record ({exc})") from exc
        if rec.label == "unknown" and not allow_unknown:
            raise IngestionError(f"{path}:{lineno}: label 'unknown' not allowed in a training manifest")
        records.append(rec)
    ids = [r.lesion_id for r in records]
    if len(set(ids)) != len(ids):
        raise IngestionError(f"{path}: duplicate lesion ids")
    return records


def write_manifest(path, records: Iterable[LesionRecord], relative_to=None) -> None:
    base = Path(relative_to) if relative_to is not None else None
    lines = []
    for rec in records:
        obj = rec.to_json()
        if base is not None:
            obj["modalities"] = {
                k: str(Path(v).relative_to(base)) if Path(v).is_absolute() else v
                for k, v in obj["modalities"].items()
            }
        lines.append(canonical_json(obj))
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# FCLF container
# --------------------------------------------------------------------------


def _pack_block(obj) -> bytes:
    data = canonical_json(obj).encode("utf-8")
    return struct.pack("<I", len(data)) + data


def write_container(path, header: dict, tensors: dict[str, np.ndarray], log: dict | None = None) -> None:
    """Serialise ``header`` (must carry ``kind``), named float32 tensors and a log block."""
    parts = [CONTAINER_MAGIC, struct.pack("<I", CONTAINER_VERSION), _pack_block(header)]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    parts.append(_pack_block(log or {}))
    Path(path).write_bytes(b"".join(parts))


def read_container(path):
    """Inverse of :func:`write_container`: returns ``(header, tensors, log)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if raw[:4] != CONTAINER_MAGIC:
        raise FormatError(f"{path}: not an FCLF container")
    try:
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CONTAINER_VERSION:
            raise FormatError(f"{path}: unsupported container version {version}")
        pos = 8

        def block():
            nonlocal pos
            (n,) = struct.unpack_from("<I", raw, pos)
            obj = json.loads(raw[pos + 4 : pos + 4 + n].decode("utf-8"))
            pos += 4 + n
            return obj

        header = block()
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape)) * 4
            tensors[name] = np.frombuffer(raw[pos : pos + size], dtype="<f4").reshape(shape).astype(np.float32)
            pos += size
        log = block()
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt container ({exc})") from exc
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return header, tensors, log
