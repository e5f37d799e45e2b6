"""The four-conv VGG-style classifier: construction, forward/backward,
training with best-epoch selection, cross-validation and checkpoints.

Layer sequence::

    C1 -> BN -> ReLU -> C2 -> BN -> ReLU -> pool
    C3 -> BN -> ReLU -> C4 -> BN -> ReLU -> pool
    flatten -> FC1 -> ReLU -> FC2 -> ReLU -> out (2 logits)
"""

from __future__ import annotations

import copy
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import DEFAULT_CHANNELS, PATCH_SIZES, Case, FoldSplit, Patch, fold_patches, stack_patches, stratified_folds
from .errors import ConfigError, FormatError, InputError, NumericError
from .io import read_container, write_container
from .metrics import MetricsReport, confusion_metrics, mean_report
from .rng import Rng

log = logging.getLogger(__name__)

CONV_TAPS = ("C1", "C2", "C3", "C4")
FC_TAPS = ("FC1", "FC2")
POOL_AFTER = (2, 4)


@dataclass
class ModelConfig:
    input_size: int = 32
    channels: tuple[str, ...] = DEFAULT_CHANNELS
    conv_widths: tuple[int, ...] = (32, 32, 64, 64)
    kernel_size: int = 3
    first_kernel_size: int | None = None
    fc_widths: tuple[int, ...] = (512, 128)
    classes: int = 2
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    augmentation: int = 1
    patience: int | None = 10

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.conv_widths = tuple(int(v) for v in self.conv_widths)
        self.fc_widths = tuple(int(v) for v in self.fc_widths)

    def validate(self) -> None:
        if self.input_size not in PATCH_SIZES:
            raise ConfigError(f"input size {self.input_size} not in {PATCH_SIZES}")
        if not self.channels:
            raise ConfigError("at least one input channel is required")
        if len(self.conv_widths) != 4 or len(self.fc_widths) != 2:
            raise ConfigError("the network has exactly four conv and two hidden FC layers")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel size must be odd")
        if self.classes != 2:
            raise ConfigError("only binary classification is supported")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch size >= 1")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be positive (or None to disable early stopping)")

    @property
    def c1_kernel(self) -> int:
        """Smallest odd kernel (>= ``kernel_size``) whose C1 filters can be mutually orthogonal."""
        if self.first_kernel_size is not None:
            return self.first_kernel_size
        k = self.kernel_size
        while k * k * len(self.channels) < self.conv_widths[0]:
            k += 2
        return k

    def kernel(self, layer: int) -> int:
        return self.c1_kernel if layer == 1 else self.kernel_size

    def spatial_sizes(self, size: int | None = None) -> list[int]:
        """Map extents after C1, C2, pool, C3, C4, pool."""
        s = size or self.input_size
        return [s, s, s // 2, s // 2, s // 2, s // 4]

    @property
    def flat_length(self) -> int:
        return self.spatial_sizes()[-1] ** 2 * self.conv_widths[3]

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("channels", "conv_widths", "fc_widths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in obj.items() if k in known})


@dataclass
class ModelParams:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    stats: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.stats.items()},
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: v.astype(dtype) for k, v in self.weights.items()},
            {k: v.astype(dtype) for k, v in self.stats.items()},
        )

    @property
    def inference_ready(self) -> bool:
        return all(f"bn{i}.mean" in self.stats for i in range(1, 5))

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.weights.values()))


def build_model(config: ModelConfig, rng: Rng) -> ModelParams:
    """Orthogonal conv filters, Glorot-uniform dense layers, zero biases, identity BN."""
    config.validate()
    w: dict[str, np.ndarray] = {}
    cin = len(config.channels)
    for i, cout in enumerate(config.conv_widths, 1):
        k = config.kernel(i)
        w[f"c{i}.w"] = nx.orthogonal_init(rng.spawn(f"c{i}"), (k, k, cin, cout))
        w[f"c{i}.b"] = np.zeros(cout, np.float32)
        w[f"bn{i}.scale"] = np.ones(cout, np.float32)
        w[f"bn{i}.shift"] = np.zeros(cout, np.float32)
        cin = cout
    fan_in = config.flat_length
    for name, width in zip(("fc1", "fc2", "out"), (*config.fc_widths, config.classes)):
        w[f"{name}.w"] = nx.glorot_uniform(rng.spawn(name), fan_in, width)
        w[f"{name}.b"] = np.zeros(width, np.float32)
        fan_in = width
    return ModelParams(config, w)


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def conv_stack(params: ModelParams, x: np.ndarray, train: bool = False, momentum: float = nx.BN_MOMENTUM):
    """C1..C4 blocks. Returns ``(c4_maps_prepool, pooled, acts, cache)``.

    Works for any spatial size (fully convolutional). ``acts`` maps
    ``C1``..``C4`` to post-ReLU feature maps. In train mode the running
    batch-norm statistics in ``params.stats`` are updated in place.
    """
    w = params.weights
    acts = {}
    cache = []
    h = x
    for i in range(1, 5):
        z, cols = nx.conv2d_forward(h, w[f"c{i}.w"], w[f"c{i}.b"])
        if train:
            zn, bn_cache, mean, var = nx.batchnorm_train(z, w[f"bn{i}.scale"], w[f"bn{i}.shift"])
            params.stats[f"bn{i}.mean"] = nx.blend_running(params.stats.get(f"bn{i}.mean"), mean, momentum).astype(z.dtype)
            params.stats[f"bn{i}.var"] = nx.blend_running(params.stats.get(f"bn{i}.var"), var, momentum).astype(z.dtype)
        else:
            zn = nx.batchnorm_infer(
                z, w[f"bn{i}.scale"], w[f"bn{i}.shift"],
                params.stats.get(f"bn{i}.mean"), params.stats.get(f"bn{i}.var"),
            )
            bn_cache = None
        a = nx.relu(zn)
        acts[f"C{i}"] = a
        entry = {"in_shape": h.shape, "cols": cols, "bn": bn_cache, "pre": zn}
        if i in POOL_AFTER:
            pooled, arg = nx.maxpool2x2_forward(a)
            entry["pool_arg"], entry["pool_in"] = arg, a.shape
            h = pooled
        else:
            h = a
        cache.append(entry)
    return acts["C4"], h, acts, cache


def forward(params: ModelParams, x: np.ndarray, train: bool = False):
    """Full network. Returns ``(logits, acts, cache)``; ``acts`` includes FC taps."""
    w = params.weights
    _, pooled, acts, conv_cache = conv_stack(params, x, train)
    n = x.shape[0]
    flat = pooled.reshape(n, -1)
    if flat.shape[1] != w["fc1.w"].shape[0]:
        raise InputError(
            f"input size {x.shape[1]}x{x.shape[2]} does not match the dense head "
            f"(built for {params.config.input_size})"
        )
    z1 = nx.dense(flat, w["fc1.w"], w["fc1.b"])
    a1 = nx.relu(z1)
    z2 = nx.dense(a1, w["fc2.w"], w["fc2.b"])
    a2 = nx.relu(z2)
    logits = nx.dense(a2, w["out.w"], w["out.b"])
    acts["FC1"], acts["FC2"] = a1, a2
    cache = {"conv": conv_cache, "flat": flat, "z1": z1, "a1": a1, "z2": z2, "a2": a2, "pooled_shape": pooled.shape}
    return logits, acts, cache


def conv_stack_backward(
    params: ModelParams, conv_cache, grad_top: np.ndarray, grads: dict,
    grad_is_pooled: bool = True, input_grad: bool = False,
):
    """Backpropagate through C4..C1; ``grad_top`` is w.r.t. the final pooled maps
    (or, with ``grad_is_pooled=False``, the pre-pool C4 activations)."""
    w = params.weights
    g = grad_top
    for i in range(4, 0, -1):
        entry = conv_cache[i - 1]
        if i in POOL_AFTER and (i != 4 or grad_is_pooled):
            g = nx.maxpool2x2_backward(entry["pool_arg"], entry["pool_in"], g)
        g = nx.relu_backward(entry["pre"], g)
        g, grads[f"bn{i}.scale"], grads[f"bn{i}.shift"] = nx.batchnorm_backward(entry["bn"], g)
        g, grads[f"c{i}.w"], grads[f"c{i}.b"] = nx.conv2d_grads(
            entry["cols"], entry["in_shape"], w[f"c{i}.w"], g, input_grad=(i > 1 or input_grad)
        )
    return g


def backward(params: ModelParams, cache, grad_logits: np.ndarray, input_grad: bool = False):
    """Gradients for every trainable tensor, and the input gradient if requested (else None)."""
    w = params.weights
    grads: dict[str, np.ndarray] = {}
    g, grads["out.w"], grads["out.b"] = nx.dense_backward(cache["a2"], w["out.w"], grad_logits)
    g = nx.relu_backward(cache["z2"], g)
    g, grads["fc2.w"], grads["fc2.b"] = nx.dense_backward(cache["a1"], w["fc2.w"], g)
    g = nx.relu_backward(cache["z1"], g)
    g, grads["fc1.w"], grads["fc1.b"] = nx.dense_backward(cache["flat"], w["fc1.w"], g)
    g = g.reshape(cache["pooled_shape"])
    grad_x = conv_stack_backward(params, cache["conv"], g, grads, input_grad=input_grad)
    return grads, grad_x


def loss_and_grads(params: ModelParams, x: np.ndarray, targets: np.ndarray):
    """Train-mode softmax cross-entropy and its gradients for one batch."""
    logits, _, cache = forward(params, x, train=True)
    onehot = np.eye(params.config.classes, dtype=x.dtype)[targets]
    loss, g = nx.softmax_xent(logits, onehot)
    grads, _ = backward(params, cache, g)
    return loss, grads


def predict_proba(params: ModelParams, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Inference-mode softmax probabilities ``N x 2`` (columns: benign, malignant)."""
    out = []
    for start in range(0, x.shape[0], chunk):
        logits, _, _ = forward(params, x[start : start + chunk], train=False)
        out.append(nx.softmax(logits.astype(np.float64)))
    return np.concatenate(out) if out else np.empty((0, params.config.classes))


def decide(proba: np.ndarray) -> np.ndarray:
    """Argmax decision; an exact tie goes to benign."""
    return (proba[:, 1] > proba[:, 0]).astype(np.int64)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    log: dict = field(default_factory=dict)
    adam: nx.AdamState | None = None

    def save(self, path) -> None:
        header = {"kind": "CNN", "config": self.config.to_json(), "adam": None}
        tensors = dict(self.params.weights)
        tensors.update(self.params.stats)
        if self.adam is not None:
            header["adam"] = {
                "lr": self.adam.lr, "beta1": self.adam.beta1, "beta2": self.adam.beta2,
                "eps": self.adam.eps, "t": self.adam.t,
            }
            for k in self.adam.m:
                tensors[f"adam.m/{k}"] = self.adam.m[k]
                tensors[f"adam.v/{k}"] = self.adam.v[k]
        write_container(path, header, tensors, self.log)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        header, tensors, log_block = read_container(path)
        if header.get("kind") != "CNN":
            raise FormatError(f"{path}: expected a CNN checkpoint, found kind {header.get('kind')!r}")
        config = ModelConfig.from_json(header["config"])
        weights, stats, m, v = {}, {}, {}, {}
        for name, arr in tensors.items():
            if name.startswith("adam.m/"):
                m[name[7:]] = arr
            elif name.startswith("adam.v/"):
                v[name[7:]] = arr
            elif name.endswith(".mean") or name.endswith(".var"):
                stats[name] = arr
            else:
                weights[name] = arr
        if "c4.w" not in weights:
            raise FormatError(f"{path}: checkpoint lacks the C4 layer")
        adam = None
        if header.get("adam"):
            adam = nx.AdamState(**header["adam"], m=m, v=v)
        return cls(config, ModelParams(config, weights, stats), log_block, adam)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _calibrate_stats(params: ModelParams, x: np.ndarray, batch_size: int) -> None:
    """One train-mode pass without parameter updates so inference has BN statistics."""
    for start in range(0, x.shape[0], batch_size):
        conv_stack(params, x[start : start + batch_size], train=True)


def _validation_row(params: ModelParams, x_val, y_val) -> dict:
    if len(y_val) == 0:
        return {}
    proba = predict_proba(params, x_val)
    rep = confusion_metrics(decide(proba), y_val, proba[:, 1])
    return {
        "val_accuracy": rep.accuracy, "val_sensitivity": rep.sensitivity,
        "val_specificity": rep.specificity, "val_g_mean": rep.g_mean, "val_auc": rep.auc,
    }


def train_fold(
    train: Sequence[Patch],
    val: Sequence[Patch],
    config: ModelConfig,
    rng: Rng | None = None,
    keep_optimizer_state: bool = False,
) -> Checkpoint:
    """Adam on softmax cross-entropy; keeps the epoch with the best validation accuracy.

    Ties keep the earliest epoch. Training stops after ``config.epochs`` or
    once validation accuracy has not improved for ``config.patience`` epochs.
    Without validation patches every epoch runs and the last one is kept.
    ``rng`` defaults to a stream derived from ``config.seed``.
    """
    config.validate()
    train_ids = {p.record.lesion_id for p in train}
    if train_ids & {p.record.lesion_id for p in val}:
        raise InputError("train and validation patches share lesions")
    rng = rng or Rng(config.seed).spawn("train")
    params = build_model(config, rng.spawn("init"))
    adam = nx.AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    x_tr, y_tr = stack_patches(train)
    if x_tr.shape[1:] != (config.input_size, config.input_size, len(config.channels)):
        raise InputError(f"training patches have shape {x_tr.shape[1:]}, config expects "
                         f"{config.input_size}x{config.input_size}x{len(config.channels)}")
    x_val, y_val = stack_patches(val) if val else (np.empty((0,) + x_tr.shape[1:], np.float32), np.empty(0, np.int64))
    shuffle = rng.spawn("shuffle")

    _calibrate_stats(params, x_tr, config.batch_size)
    epochs = [{"epoch": 0, "train_loss": None, **_validation_row(params, x_val, y_val)}]
    best, best_epoch = params.copy(), 0
    best_acc = epochs[0].get("val_accuracy", -math.inf)
    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(len(y_tr))
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            loss, grads = loss_and_grads(params, x_tr[idx], y_tr[idx])
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            nx.adam_step(params.weights, grads, adam)
            losses.append(loss * len(idx))
        row = {"epoch": epoch, "train_loss": float(sum(losses) / len(y_tr)), **_validation_row(params, x_val, y_val)}
        epochs.append(row)
        acc = row.get("val_accuracy")
        if acc is None or acc > best_acc:
            best, best_epoch, best_acc = params.copy(), epoch, (acc if acc is not None else best_acc)
        log.debug("epoch %d loss %.4f val_acc %s", epoch, row["train_loss"], acc)
        if acc is not None and config.patience is not None and epoch - best_epoch >= config.patience:
            break
    train_log = {
        "epochs": epochs,
        "best_epoch": best_epoch,
        "best_val_accuracy": None if len(y_val) == 0 else best_acc,
        "n_train": int(len(y_tr)),
        "n_val": int(len(y_val)),
        "epochs_run": len(epochs) - 1,
        "hyperparameters": {
            "lr": config.lr, "batch_size": config.batch_size, "epochs": config.epochs, "patience": config.patience,
        },
    }
    return Checkpoint(config, best, train_log, copy.deepcopy(adam) if keep_optimizer_state else None)


def predict(checkpoint: Checkpoint, patch) -> tuple[float, float]:
    """``(p_benign, p_malignant)`` for one patch (``Patch`` or ``S x S x C`` array)."""
    data = patch.data if isinstance(patch, Patch) else np.asarray(patch, dtype=np.float32)
    if isinstance(patch, Patch) and tuple(patch.channels) != tuple(checkpoint.config.channels):
        raise InputError(f"patch channels {patch.channels} != model channels {checkpoint.config.channels}")
    if data.ndim != 3 or data.shape[-1] != len(checkpoint.config.channels):
        raise InputError(f"patch shape {data.shape} does not match {len(checkpoint.config.channels)} channels")
    p = predict_proba(checkpoint.params, data[None].astype(np.float32))[0]
    return float(p[0]), float(p[1])


def predict_patches(checkpoint: Checkpoint, patches: Sequence[Patch]) -> np.ndarray:
    for p in patches:
        if tuple(p.channels) != tuple(checkpoint.config.channels):
            raise InputError(f"patch channels {p.channels} != model channels {checkpoint.config.channels}")
    x, _ = stack_patches(patches)
    return predict_proba(checkpoint.params, x)


# --------------------------------------------------------------------------
# cross-validation
# --------------------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    checkpoint: Checkpoint
    metrics: MetricsReport
    val_ids: list[str]
    val_scores: list[float]


@dataclass
class CVResult:
    split: FoldSplit
    folds: list[FoldResult]

    @property
    def checkpoints(self) -> list[Checkpoint]:
        return [f.checkpoint for f in self.folds]

    def average(self) -> dict:
        return mean_report([f.metrics for f in self.folds])

    def best_fold(self) -> int:
        """Fold whose model has the highest validation accuracy (earliest on ties)."""
        accs = [f.metrics.accuracy for f in self.folds]
        return self.folds[int(np.nanargmax(accs))].fold

    def summary(self) -> dict:
        rows = []
        for f in self.folds:
            r = f.metrics
            rows.append({
                "fold": f.fold + 1, "sensitivity": r.sensitivity, "specificity": r.specificity,
                "g_mean": r.g_mean, "auc": r.auc, "accuracy": r.accuracy,
                "tp": r.tp, "fp": r.fp, "tn": r.tn, "fn": r.fn,
                "best_epoch": f.checkpoint.log.get("best_epoch"), "flags": r.flags,
            })
        return {"rows": rows, "average": self.average(), "best_fold": self.best_fold() + 1, "k": self.split.k}


def run_fold(
    cases: Sequence[Case],
    split: FoldSplit,
    fold: int,
    config: ModelConfig,
    label_noise: float = 0.0,
) -> FoldResult:
    """Train and validate one fold. ``label_noise`` flips that fraction of training lesions."""
    root = Rng(config.seed)
    train_cases = noisy_cases(cases, split, fold, config, label_noise)
    train, _ = fold_patches(train_cases, split, fold, config.augmentation, root.spawn("augment"), config.input_size, config.channels)
    _, val = fold_patches(cases, split, fold, 0, root, config.input_size, config.channels)
    ckpt = train_fold(train, val, config, root.spawn(f"train/{fold}"))
    proba = predict_patches(ckpt, val)
    y = np.array([p.target for p in val])
    metrics = confusion_metrics(decide(proba), y, proba[:, 1], fold=fold)
    return FoldResult(fold, ckpt, metrics, [p.record.lesion_id for p in val], proba[:, 1].tolist())


def noisy_cases(cases: Sequence[Case], split: FoldSplit, fold: int, config: ModelConfig, label_noise: float) -> list[Case]:
    """The cases as the fold's training side sees them (labels flipped when ``label_noise`` > 0)."""
    if not label_noise:
        return list(cases)
    return flip_labels(cases, split, fold, label_noise, Rng(config.seed).spawn(f"noise/{fold}"))


def flip_labels(cases: Sequence[Case], split: FoldSplit, fold: int, fraction: float, rng: Rng) -> list[Case]:
    """Copy of ``cases`` with ``fraction`` of this fold's training lesions relabelled."""
    train_ids = sorted(split.train_ids(fold))
    n_flip = int(round(fraction * len(train_ids)))
    flipped = {train_ids[i] for i in rng.permutation(len(train_ids))[:n_flip]}
    out = []
    for c in cases:
        if c.record.lesion_id in flipped:
            new_label = "benign" if c.record.is_malignant else "malignant"
            out.append(Case(replace(c.record, label=new_label), c.slices))
        else:
            out.append(c)
    return out


def _run_fold_job(args):
    return run_fold(*args)


def cross_validate(
    cases: Sequence[Case],
    config: ModelConfig,
    k: int = 10,
    split: FoldSplit | None = None,
    jobs: int = 1,
    label_noise: float = 0.0,
    folds: Sequence[int] | None = None,
) -> CVResult:
    """Stratified k-fold training; folds are independent and may run in parallel."""
    records = [c.record for c in cases]
    split = split or stratified_folds(records, k, Rng(config.seed).spawn("folds"))
    fold_ids = list(folds) if folds is not None else list(range(split.k))
    jobs_args = [(cases, split, f, config, label_noise) for f in fold_ids]
    if jobs > 1 and len(fold_ids) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold_job, jobs_args))
    else:
        results = [_run_fold_job(a) for a in jobs_args]
    return CVResult(split, results)
