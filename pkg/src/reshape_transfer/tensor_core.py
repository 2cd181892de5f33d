"""Dense layer kernels with hand-written backward passes.

Activations are plain numpy arrays.  Spatial ops take ``[C, H, W]`` or a
batch ``[B, C, H, W]``; dense ops take ``[in]`` or ``[B, in]``.  Results keep
the input's float width, so the same kernels run float32 for training and
float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidClass, ShapeError


@dataclass
class ConvLayer:
    kernels: np.ndarray  # [out_ch, in_ch, k, k]
    bias: np.ndarray     # [out_ch]
    stride: int = 1

    def __post_init__(self):
        if self.kernels.ndim != 4 or self.kernels.shape[2] != self.kernels.shape[3]:
            raise ShapeError(f"kernels must be [out, in, k, k], got {self.kernels.shape}")
        if self.bias.shape != (self.kernels.shape[0],):
            raise ShapeError("bias length must equal out_ch")
        if self.stride != 1:
            raise ValueError("only stride 1 (valid) convolution is supported")

    @property
    def k(self) -> int:
        return self.kernels.shape[2]


@dataclass
class PoolLayer:
    window: int = 2

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("pool window must be >= 1")


@dataclass
class DenseLayer:
    weights: np.ndarray  # [out, in]
    bias: np.ndarray     # [out]

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"dense weights {self.weights.shape} / bias {self.bias.shape} mismatch")


class PoolMask(NamedTuple):
    index: np.ndarray       # winner offset inside each window, row-major
    input_shape: tuple
    window: int


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected [C,H,W] or [B,C,H,W], got shape {x.shape}")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """[B,C,H,W] -> [B, H-k+1, W-k+1, C*k*k] patch matrix (a copy)."""
    b, c, h, w = x.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # B,C,Ho,Wo,k,k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h - k + 1, w - k + 1, c * k * k)


def _check_conv_input(x: np.ndarray, layer: ConvLayer):
    if x.shape[1] != layer.kernels.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, layer expects {layer.kernels.shape[1]}")
    if x.shape[2] < layer.k or x.shape[3] < layer.k:
        raise ShapeError(f"input {x.shape[2:]} smaller than kernel {layer.k}")


FFT_MIN_PATCH = 256  # in_ch*k*k at or above which the FFT path is used


def _conv_method(layer: ConvLayer, method: str | None) -> str:
    if method is None:
        return "fft" if layer.kernels.shape[1] * layer.k ** 2 >= FFT_MIN_PATCH else "cols"
    if method not in ("fft", "cols"):
        raise ValueError(f"unknown conv method {method!r}")
    return method


def conv_forward_cached(x: np.ndarray, layer: ConvLayer, method: str | None = None):
    """Batched forward returning ``(out, cache)`` for ``conv_backward_cached``.

    ``cols`` multiplies an im2col patch matrix; ``fft`` correlates in the
    frequency domain at the input size (valid outputs never wrap).
    """
    _check_conv_input(x, layer)
    method = _conv_method(layer, method)
    out_ch, in_ch, k, _ = layer.kernels.shape
    b, _, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    if method == "cols":
        cols = _im2col(x, k)
        out = (cols @ layer.kernels.reshape(out_ch, -1).T).transpose(0, 3, 1, 2)
        cache = ("cols", cols)
    else:
        xf = np.fft.rfft2(x)
        kf = np.conj(np.fft.rfft2(layer.kernels, s=(h, w)))
        yf = np.einsum("bihf,oihf->bohf", xf, kf, optimize=True)
        out = np.fft.irfft2(yf, s=(h, w))[:, :, :ho, :wo].astype(x.dtype, copy=False)
        cache = ("fft", xf, (h, w))
    out = out + layer.bias[None, :, None, None]
    return np.ascontiguousarray(out), cache


def conv_backward_cached(layer: ConvLayer, cache, upstream: np.ndarray, input_grad: bool = True):
    """Return ``(dx or None, dkernels, dbias)`` from a forward cache."""
    out_ch, in_ch, k, _ = layer.kernels.shape
    db = upstream.sum(axis=(0, 2, 3))
    dx = None
    if cache[0] == "cols":
        cols = cache[1]
        g = upstream.transpose(0, 2, 3, 1)  # B,Ho,Wo,O
        dk = (g.reshape(-1, out_ch).T @ cols.reshape(-1, in_ch * k * k)).reshape(layer.kernels.shape)
        if input_grad:
            # full correlation of the upstream gradient with the flipped kernels
            gpad = np.pad(upstream, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
            flipped = layer.kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # in,out,k,k
            dx = (_im2col(gpad, k) @ flipped.reshape(in_ch, -1).T).transpose(0, 3, 1, 2)
            dx = np.ascontiguousarray(dx)
    else:
        _, xf, (h, w) = cache
        gf = np.fft.rfft2(upstream, s=(h, w))
        dkf = np.einsum("bohf,bihf->oihf", np.conj(gf), xf, optimize=True)
        dk = np.fft.irfft2(dkf, s=(h, w))[:, :, :k, :k].astype(upstream.dtype)
        if input_grad:
            kf = np.fft.rfft2(layer.kernels, s=(h, w))
            dxf = np.einsum("bohf,oihf->bihf", gf, kf, optimize=True)
            dx = np.fft.irfft2(dxf, s=(h, w)).astype(upstream.dtype, copy=False)
    return dx, dk, db


def conv2d_forward(x: np.ndarray, layer: ConvLayer, method: str | None = None) -> np.ndarray:
    """Valid, stride-1 cross-correlation plus bias.

    ``out[o, y, x] = bias[o] + sum_{i,dy,dx} in[i, y+dy, x+dx] * kernels[o, i, dy, dx]``
    """
    xb, single = _batched(x)
    out, _ = conv_forward_cached(xb, layer, method)
    return out[0] if single else out


def conv2d_backward(layer: ConvLayer, x: np.ndarray, upstream: np.ndarray, method: str | None = None):
    """Return ``(input_grad, kernel_grad, bias_grad)`` for ``conv2d_forward``."""
    xb, single = _batched(x)
    ub, _ = _batched(upstream)
    _check_conv_input(xb, layer)
    expected = (xb.shape[0], layer.kernels.shape[0], xb.shape[2] - layer.k + 1, xb.shape[3] - layer.k + 1)
    if ub.shape != expected:
        raise ShapeError(f"upstream gradient {ub.shape} does not match output {expected}")
    _, cache = conv_forward_cached(xb, layer, method)
    dx, dk, db = conv_backward_cached(layer, cache, ub)
    return (dx[0] if single else dx), dk, db


def maxpool_forward(x: np.ndarray, layer: PoolLayer) -> tuple[np.ndarray, PoolMask]:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a
    window are ignored. Ties go to the first element in row-major order."""
    xb, single = _batched(x)
    w = layer.window
    h, wd = xb.shape[2:]
    if h < w or wd < w:
        raise ShapeError(f"input {h}x{wd} smaller than pool window {w}")
    ho, wo = h // w, wd // w
    out = xb[:, :, 0:ho * w:w, 0:wo * w:w].copy()
    idx = np.zeros(out.shape, dtype=np.int16)
    for j in range(1, w * w):
        dy, dx = divmod(j, w)
        cand = xb[:, :, dy:ho * w:w, dx:wo * w:w]
        better = cand > out  # strict: earlier offsets keep ties
        np.copyto(out, cand, where=better)
        idx[better] = j
    if single:
        return out[0], PoolMask(idx[0], x.shape, w)
    return out, PoolMask(idx, x.shape, w)


def maxpool_backward(mask: PoolMask, upstream: np.ndarray) -> np.ndarray:
    """Route ``upstream`` to the recorded argmax positions."""
    if upstream.shape != mask.index.shape:
        raise ShapeError(f"upstream {upstream.shape} does not match pooled shape {mask.index.shape}")
    idx, single = _batched(mask.index)
    g, _ = _batched(upstream)
    w = mask.window
    ho, wo = idx.shape[2:]
    dx = np.zeros((idx.shape[0],) + tuple(mask.input_shape[-3:]), dtype=upstream.dtype)
    for j in range(w * w):
        dy, dxo = divmod(j, w)
        dx[:, :, dy:ho * w:w, dxo:wo * w:w] = np.where(idx == j, g, 0)
    return dx[0] if single else dx


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return np.where(x > 0, upstream, 0).astype(upstream.dtype, copy=False)


def flatten(x: np.ndarray) -> np.ndarray:
    """Row-major linearisation; a leading batch axis on 4-D input is kept."""
    if x.ndim == 4:
        return x.reshape(x.shape[0], -1)
    return x.reshape(-1)


def unflatten(v: np.ndarray, shape: tuple) -> np.ndarray:
    return v.reshape(shape)


def dense_forward(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    if x.shape[-1] != layer.weights.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} != dense fan-in {layer.weights.shape[1]}")
    return x @ layer.weights.T + layer.bias


def dense_backward(layer: DenseLayer, x: np.ndarray, upstream: np.ndarray):
    """Return ``(dx, dW, db)``; batch gradients are summed over the batch."""
    if x.shape[-1] != layer.weights.shape[1] or upstream.shape[-1] != layer.weights.shape[0]:
        raise ShapeError("dense backward shapes inconsistent with layer")
    dx = upstream @ layer.weights
    if x.ndim == 1:
        return dx, np.outer(upstream, x), upstream.copy()
    return dx, upstream.T @ x, upstream.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, target):
    """Return ``(loss, probs, logit_grad)``.

    For a batch ``[B, C]`` with ``B`` targets the loss is the batch mean and
    the gradient is scaled by ``1/B`` accordingly.
    """
    logits = np.asarray(logits)
    n_classes = logits.shape[-1]
    if n_classes < 2:
        raise ShapeError("softmax needs at least two classes")
    t = np.atleast_1d(np.asarray(target))
    if np.any(t < 0) or np.any(t >= n_classes):
        raise InvalidClass(f"target {target!r} outside [0, {n_classes})")
    z = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    log_probs = z - log_norm
    probs = np.exp(log_probs)
    onehot = np.zeros_like(probs)
    if logits.ndim == 1:
        onehot[int(t[0])] = 1
        return float(-log_probs[int(t[0])]), probs, probs - onehot
    rows = np.arange(len(t))
    onehot[rows, t] = 1
    loss = float(-log_probs[rows, t].mean())
    return loss, probs, (probs - onehot) / len(t)


def sgd_momentum_step(params: np.ndarray, grads: np.ndarray, velocity: np.ndarray,
                      lr: float, momentum: float):
    """In-place ``v <- momentum*v - lr*g; p <- p + v``. Returns ``(params, velocity)``."""
    if not (params.shape == grads.shape == velocity.shape):
        raise ShapeError(f"shape mismatch {params.shape} / {grads.shape} / {velocity.shape}")
    velocity *= momentum
    velocity -= lr * grads
    params += velocity
    return params, velocity


def gradient_check(f: Callable[[], float], x: np.ndarray, analytic: np.ndarray,
                   eps: float = 1e-5) -> float:
    """Compare ``analytic`` against central differences of ``f`` w.r.t. ``x``.

    ``f`` takes no arguments and must read ``x`` (perturbed in place, then
    restored).  Returns ``max |a - n| / max(|a|, |n|, 1e-8)``.
    """
    if x.dtype != np.float64:
        raise TypeError("gradient checks need float64 arrays")
    if analytic.shape != x.shape:
        raise ShapeError(f"analytic gradient {analytic.shape} != parameter {x.shape}")
    if not x.flags.c_contiguous:
        raise ValueError("x must be C-contiguous so it can be perturbed in place")
    flat = x.reshape(-1)
    a = analytic.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        num = (hi - lo) / (2 * eps)
        err = abs(a[i] - num) / max(abs(a[i]), abs(num), 1e-8)
        worst = max(worst, err)
    return worst
