"""Dense NHWC layer primitives with explicit backward passes.

Arrays are float32 during training; every function is dtype-preserving so
the same code runs in float64 for gradient checks. Single samples
(``H x W x C``) are accepted wherever a batch (``N x H x W x C``) is.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, NumericError, ShapeError, StateError
from .rng import Rng

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected H x W x C or N x H x W x C, got shape {x.shape}")
    return x, False


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


def _check_conv(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None) -> None:
    if weights.ndim != 4:
        raise ShapeError(f"weights must be Kh x Kw x Cin x Cout, got {weights.shape}")
    kh, kw, cin, cout = weights.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
    if x.shape[-1] != cin:
        raise ShapeError(f"input has {x.shape[-1]} channels, weights expect {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")


def im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Zero-padded 'same' patches of a batch: rows (n, y, x), columns (ky, kx, c)."""
    n, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = np.empty((n, h, w, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + h, j : j + w, :]
    return cols.reshape(n * h * w, kh * kw * c)


def col2im(dcols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int) -> np.ndarray:
    n, h, w, c = shape
    ph, pw = kh // 2, kw // 2
    dcols = dcols.reshape(n, h, w, kh, kw, c)
    out = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + h, j : j + w, :] += dcols[:, :, :, i, j, :]
    return out[:, ph : ph + h, pw : pw + w, :]


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray):
    """Batched 'same' convolution returning ``(output, cols)``; cols feeds the backward pass."""
    _check_conv(x, weights, bias)
    kh, kw, cin, cout = weights.shape
    n, h, w, _ = x.shape
    cols = im2col(x, kh, kw)
    out = cols @ weights.reshape(kh * kw * cin, cout) + bias
    return out.reshape(n, h, w, cout), cols


def conv2d_grads(cols: np.ndarray, x_shape, weights: np.ndarray, grad_out: np.ndarray, input_grad: bool = True):
    kh, kw, cin, cout = weights.shape
    g = grad_out.reshape(-1, cout)
    grad_w = (cols.T @ g).reshape(weights.shape)
    grad_b = g.sum(axis=0)
    if not input_grad:
        return None, grad_w, grad_b
    dcols = g @ weights.reshape(kh * kw * cin, cout).T
    grad_x = col2im(dcols, x_shape, kh, kw)
    return grad_x, grad_w, grad_b


def conv2d_same(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 convolution with zero padding (K-1)/2, preserving spatial size."""
    xb, single = _batched(np.asarray(x))
    out, _ = conv2d_forward(xb, weights, bias)
    return out[0] if single else out


def conv2d_backward(x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray):
    """Gradients ``(grad_input, grad_weights, grad_bias)`` of :func:`conv2d_same`."""
    xb, single = _batched(np.asarray(x))
    gb, _ = _batched(np.asarray(grad_out))
    _check_conv(xb, weights, None)
    if gb.shape[:3] != xb.shape[:3] or gb.shape[3] != weights.shape[3]:
        raise ShapeError(f"grad_out shape {grad_out.shape} inconsistent with input {x.shape}")
    cols = im2col(xb, weights.shape[0], weights.shape[1])
    gx, gw, gbias = conv2d_grads(cols, xb.shape, weights, gb)
    return (gx[0] if single else gx), gw, gbias


# --------------------------------------------------------------------------
# batch normalisation
# --------------------------------------------------------------------------


@dataclass
class BatchNormParams:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> "BatchNormParams":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype))


def batchnorm_train(x: np.ndarray, scale, shift, eps: float = BN_EPS):
    """Per-channel standardisation over all but the last axis.

    Returns ``(y, cache, batch_mean, batch_var)`` with biased variance.
    """
    axes = tuple(range(x.ndim - 1))
    count = x.size // x.shape[-1]
    if count < 2:
        raise ShapeError("train-mode batch-norm needs at least 2 values per channel")
    mean = x.mean(axis=axes)
    centered = x - mean
    var = (centered * centered).mean(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = xhat * scale + shift
    return y, (xhat, inv_std, scale), mean, var


def batchnorm_backward(cache, grad_out: np.ndarray):
    xhat, inv_std, scale = cache
    axes = tuple(range(grad_out.ndim - 1))
    count = grad_out.size // grad_out.shape[-1]
    grad_shift = grad_out.sum(axis=axes)
    grad_scale = (grad_out * xhat).sum(axis=axes)
    dxhat = grad_out * scale
    grad_x = (inv_std / count) * (
        count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
    )
    return grad_x, grad_scale, grad_shift


def batchnorm_infer(x: np.ndarray, scale, shift, running_mean, running_var, eps: float = BN_EPS):
    if running_mean is None or running_var is None:
        raise StateError("batch-norm running statistics are uninitialised; run a train step first")
    inv_std = 1.0 / np.sqrt(running_var + eps)
    return (x - running_mean) * (inv_std * scale) + shift


def blend_running(running: np.ndarray | None, batch: np.ndarray, momentum: float) -> np.ndarray:
    """Exponential moving average; the first batch initialises the statistic."""
    if running is None:
        return batch.copy()
    return (1.0 - momentum) * running + momentum * batch


def batchnorm(batch: np.ndarray, params: BatchNormParams, mode: str = "train") -> np.ndarray:
    """Batch-norm on an ``N x H x W x C`` batch; train mode updates ``params`` in place."""
    if mode == "train":
        y, _, mean, var = batchnorm_train(batch, params.scale, params.shift, params.eps)
        params.running_mean = blend_running(params.running_mean, mean, params.momentum)
        params.running_var = blend_running(params.running_var, var, params.momentum)
        return y
    if mode == "infer":
        return batchnorm_infer(
            batch, params.scale, params.shift, params.running_mean, params.running_var, params.eps
        )
    raise ConfigError(f"unknown batch-norm mode {mode!r}")


# --------------------------------------------------------------------------
# pointwise, pooling, dense, loss
# --------------------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def maxpool2x2_forward(x: np.ndarray):
    """2x2 stride-2 max pool with floor semantics; returns ``(y, argmax)``."""
    n, h, w, c = x.shape
    oh, ow = h // 2, w // 2
    if oh == 0 or ow == 0:
        raise ShapeError(f"cannot 2x2-pool a {h}x{w} map")
    win = x[:, : 2 * oh, : 2 * ow, :].reshape(n, oh, 2, ow, 2, c)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, 4)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return y, arg


def maxpool2x2_backward(arg: np.ndarray, x_shape, grad_out: np.ndarray) -> np.ndarray:
    """Route each pooled gradient to the first maximal cell of its window."""
    n, h, w, c = x_shape
    oh, ow = arg.shape[1:3]
    routed = np.zeros((n, oh, ow, c, 4), dtype=grad_out.dtype)
    np.put_along_axis(routed, arg[..., None], grad_out[..., None], axis=-1)
    routed = routed.reshape(n, oh, ow, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    grad_x = np.zeros(x_shape, dtype=grad_out.dtype)
    grad_x[:, : 2 * oh, : 2 * ow, :] = routed.reshape(n, 2 * oh, 2 * ow, c)
    return grad_x


def maxpool2x2(x: np.ndarray) -> np.ndarray:
    xb, single = _batched(np.asarray(x))
    y, _ = maxpool2x2_forward(xb)
    return y[0] if single else y


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    return x @ weights + bias


def dense_backward(x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray):
    x2 = x.reshape(-1, weights.shape[0])
    g2 = grad_out.reshape(-1, weights.shape[1])
    return (grad_out @ weights.T), x2.T @ g2, g2.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, target: np.ndarray):
    """Mean cross-entropy of softmax(logits) against one-hot targets, with its gradient."""
    logits = np.asarray(logits)
    target = np.asarray(target)
    if logits.shape != target.shape:
        raise InputError(f"logits {logits.shape} and target {target.shape} differ in shape")
    if not (np.all((target == 0) | (target == 1)) and np.all(target.sum(axis=-1) == 1)):
        raise InputError("target must be one-hot")
    z = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    log_p = z - log_norm
    batch = 1 if logits.ndim == 1 else logits.shape[0]
    loss = -(log_p * target).sum() / batch
    grad = (np.exp(log_p) - target) / batch
    return float(loss), grad.astype(logits.dtype, copy=False)


# --------------------------------------------------------------------------
# optimiser and initialisation
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """Bias-corrected Adam update applied in place to ``params``.

    Only names present in ``grads`` are updated. A non-finite gradient aborts
    the whole step before anything is modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}; Adam step aborted")
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return params, state


def orthogonal_init(rng: Rng, shape, dtype=np.float32) -> np.ndarray:
    """Random Gaussian filters orthonormalised by QR.

    Each of the ``Cout`` filters, flattened to length ``Kh*Kw*Cin``, has unit
    norm and is orthogonal to the others.
    """
    kh, kw, cin, cout = shape
    length = kh * kw * cin
    if cout > length:
        raise ConfigError(f"cannot orthogonalise {cout} filters of length {length}")
    gauss = rng.normal((length, cout))
    q, r = np.linalg.qr(gauss)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return q.reshape(kh, kw, cin, cout).astype(dtype)


def glorot_uniform(rng: Rng, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    u = rng.uniform(fan_in * fan_out).reshape(fan_in, fan_out)
    return ((2.0 * u - 1.0) * limit).astype(dtype)
