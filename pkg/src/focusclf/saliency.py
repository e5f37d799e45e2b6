"""Class activation maps from a trained checkpoint.

The dense head is replaced by a global max pool over the 64 pre-pool C4
maps and a 64x2 linear layer ``V``; the map for class ``c`` is
``sum_k V[k, c] * F_k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import numerics as nx
from .data import Patch, stack_patches
from .errors import FormatError, InputError, NumericError, StateError
from .io import write_volume
from .model import Checkpoint, conv_stack, conv_stack_backward
from .rng import Rng

MALIGNANT = 1


@dataclass
class CamHead:
    checkpoint: Checkpoint
    V: np.ndarray
    bias: np.ndarray
    frozen: bool = True
    log: dict = field(default_factory=dict)

    @property
    def params(self):
        return self.checkpoint.params


@dataclass
class CamConfig:
    epochs: int = 200
    lr: float = 1e-2
    batch_size: int = 32
    tolerance: float = 1e-4
    window: int = 5
    frozen: bool = True
    seed: int = 0


@dataclass
class CamMap:
    cls: int
    raw: np.ndarray
    upsampled: np.ndarray
    normalized: np.ndarray
    value_range: tuple[float, float]


def build_cam_head(checkpoint: Checkpoint, rng: Rng | None = None) -> CamHead:
    weights = checkpoint.params.weights
    if "c4.w" not in weights:
        raise FormatError("checkpoint lacks the C4 layer")
    if not checkpoint.params.inference_ready:
        raise StateError("checkpoint has no batch-norm statistics; train it first")
    rng = rng or Rng(checkpoint.config.seed).spawn("cam-head")
    width = weights["c4.w"].shape[-1]
    V = nx.glorot_uniform(rng, width, checkpoint.config.classes)
    return CamHead(checkpoint, V, np.zeros(checkpoint.config.classes, np.float32))


def _batch(patches) -> np.ndarray:
    if isinstance(patches, Patch):
        return patches.data[None].astype(np.float32)
    if isinstance(patches, np.ndarray):
        return (patches[None] if patches.ndim == 3 else patches).astype(np.float32)
    return stack_patches(patches)[0]


def c4_maps(head: CamHead, x: np.ndarray) -> np.ndarray:
    """Inference-mode pre-pool C4 activations ``N x h x w x 64`` for any input size."""
    if x.shape[-1] != len(head.checkpoint.config.channels):
        raise InputError(f"input has {x.shape[-1]} channels, model expects {len(head.checkpoint.config.channels)}")
    c4, _, _, _ = conv_stack(head.params, x, train=False)
    return c4


def global_max_pool(maps: np.ndarray) -> np.ndarray:
    return maps.max(axis=(1, 2))


def head_logits(head: CamHead, pooled: np.ndarray) -> np.ndarray:
    return pooled @ head.V + head.bias


def head_forward(head: CamHead, patches) -> np.ndarray:
    """Logits of the truncated network (conv stack, global max pool, head)."""
    return head_logits(head, global_max_pool(c4_maps(head, _batch(patches))))


def _pooled_features(head: CamHead, x: np.ndarray, chunk: int = 128) -> np.ndarray:
    return np.concatenate([global_max_pool(c4_maps(head, x[s : s + chunk])) for s in range(0, len(x), chunk)])


def _max_pool_backward(maps: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Route each channel's gradient to the first location of its maximum."""
    n, h, w, c = maps.shape
    flat = maps.reshape(n, h * w, c)
    arg = flat.argmax(axis=1)
    out = np.zeros_like(flat)
    np.put_along_axis(out, arg[:, None, :], g[:, None, :], axis=1)
    return out.reshape(maps.shape)


def finetune_cam(head: CamHead, patches: Sequence[Patch], config: CamConfig | None = None) -> CamHead:
    """Adam on softmax cross-entropy of the head.

    Frozen mode trains only ``V`` and the bias on cached pooled features.
    Otherwise the conv stack is fine-tuned too (batch-norm in train mode)
    on a copy of the checkpoint. Stops once the epoch loss changed by less
    than ``tolerance`` over ``window`` epochs, or at ``epochs``.
    """
    config = config or CamConfig()
    x, y = stack_patches(patches)
    onehot = np.eye(head.V.shape[1], dtype=np.float32)[y]
    ckpt = head.checkpoint
    if not config.frozen:
        ckpt = Checkpoint(ckpt.config, ckpt.params.copy(), dict(ckpt.log))
    out = CamHead(ckpt, head.V.copy(), head.bias.copy(), config.frozen)
    trainable = {"cam.V": out.V, "cam.b": out.bias}
    if not config.frozen:
        trainable.update(out.params.weights)
    adam = nx.AdamState(lr=config.lr)
    shuffle = Rng(config.seed).spawn("cam-finetune")
    pooled = _pooled_features(out, x) if config.frozen else None
    losses: list[float] = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(len(y))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            if config.frozen:
                feats = pooled[idx]
            else:
                maps, _, _, cache = conv_stack(out.params, x[idx], train=True)
                feats = global_max_pool(maps)
            loss, g = nx.softmax_xent(head_logits(out, feats), onehot[idx])
            if not math.isfinite(loss):
                raise NumericError(f"non-finite CAM loss at epoch {epoch}")
            grads = {"cam.V": feats.T @ g, "cam.b": g.sum(axis=0)}
            if not config.frozen:
                g_maps = _max_pool_backward(maps, g @ out.V.T)
                conv_stack_backward(out.params, cache, g_maps, grads, grad_is_pooled=False)
            nx.adam_step(trainable, grads, adam)
            total += loss * len(idx)
        losses.append(total / len(y))
        if len(losses) > config.window and abs(losses[-1] - losses[-1 - config.window]) < config.tolerance:
            break
    if pooled is None and len(y):
        pooled = _pooled_features(out, x)
    acc = float(np.mean(np.argmax(head_logits(out, pooled), axis=1) == y)) if len(y) else math.nan
    out.log = {"losses": losses, "epochs_run": len(losses), "train_accuracy": acc, "frozen": config.frozen}
    return out


def upsample_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Pixel-center aligned bilinear resize of a 2-D map to ``size x size``."""
    h, w = img.shape
    ys = (np.arange(size) + 0.5) * h / size - 0.5
    xs = (np.arange(size) + 0.5) * w / size - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img.astype(np.float64), [yy, xx], order=1, mode="nearest")


def compute_cam(head: CamHead, patch, cls: int = MALIGNANT) -> CamMap:
    """CAM for one patch of any size >= the training size."""
    x = _batch(patch)
    if x.shape[0] != 1:
        raise InputError("compute_cam takes a single patch")
    size = x.shape[1]
    if x.shape[1] != x.shape[2] or size < head.checkpoint.config.input_size:
        raise InputError(f"patch must be square and at least {head.checkpoint.config.input_size} pixels")
    maps = c4_maps(head, x)[0].astype(np.float64)
    raw = maps @ head.V[:, cls].astype(np.float64)
    up = upsample_bilinear(raw, size)
    lo, hi = float(up.min()), float(up.max())
    norm = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)
    return CamMap(cls, raw, up, norm, (lo, hi))


def overlay_pixels(cam: np.ndarray, base: np.ndarray) -> np.ndarray:
    """RGB ``uint8``: gray base blended with pure red at alpha ``0.5 * cam``."""
    if cam.shape != base.shape:
        raise InputError(f"CAM {cam.shape} and patch {base.shape} differ in size")
    gray = np.clip(base.astype(np.float64), 0.0, 1.0) * 255.0
    a = 0.5 * np.clip(cam, 0.0, 1.0)
    rgb = np.empty(cam.shape + (3,))
    rgb[..., 0] = gray * (1.0 - a) + 255.0 * a
    rgb[..., 1] = gray * (1.0 - a)
    rgb[..., 2] = gray * (1.0 - a)
    return np.rint(rgb).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def export_overlay(cam: CamMap, patch, path) -> None:
    """Binary PPM of the first channel in gray with the normalised CAM in red."""
    data = patch.data if isinstance(patch, Patch) else np.asarray(patch)
    write_ppm(path, overlay_pixels(cam.normalized, data[..., 0]))


def export_raw(cam: CamMap, path) -> None:
    write_volume(Path(path), cam.upsampled.astype(np.float32))
