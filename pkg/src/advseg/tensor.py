"""Dense NCHW tensor kernels: dilated valid convolution, max pooling,
batch normalisation, activations, dropout and the MT01 binary format.

Tensors are plain ``numpy.ndarray`` objects of rank 4 (batch, channel,
height, width).  Storage is float32; reductions that feed statistics or
gradients (bias sums, batch-norm moments) accumulate in float64.  Every
kernel also accepts float64 input, which is what the finite-difference
checks use.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DTYPE = np.float32

# upper bound on im2col buffer size (elements) per batch chunk
_CHUNK_ELEMS = 1 << 18


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with a kernel."""


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    """Return ``data`` as a contiguous rank-4 array of ``dtype``."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 (n, c, h, w) tensor, got shape {arr.shape}")
    return arr


def _check4(x: np.ndarray, what: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} must be rank 4 (n, c, h, w), got shape {x.shape}")


@dataclass
class ConvParams:
    weights: np.ndarray  # (out, in, k, k)
    bias: np.ndarray  # (out,)
    dilation: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ShapeError(f"conv weights must be (out, in, k, k), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if self.kernel == 1 and self.dilation != 1:
            raise ValueError("1x1 kernels must use dilation 1")

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]

    @property
    def extent(self) -> int:
        """Effective spatial extent of the dilated kernel."""
        return 1 + (self.kernel - 1) * self.dilation


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=DTYPE) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(x: np.ndarray, params: ConvParams):
    _check4(x)
    n, c, h, w = x.shape
    cout, cin, k, _ = params.weights.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, kernel expects {cin}")
    ext = params.extent
    if h < ext or w < ext:
        raise ShapeError(f"input {h}x{w} smaller than effective kernel extent {ext}")
    return n, c, h, w, cout, k, params.dilation, h - ext + 1, w - ext + 1


def _chunks(n: int, per_sample: int):
    step = max(1, _CHUNK_ELEMS // max(per_sample, 1))
    for s in range(0, n, step):
        yield s, min(n, s + step)


def _im2col(x: np.ndarray, k: int, d: int, ho: int, wo: int) -> np.ndarray:
    n, c = x.shape[:2]
    if k == 1:
        return x.transpose(1, 0, 2, 3).reshape(c, n * ho * wo)
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = x[:, :, i * d : i * d + ho, j * d : j * d + wo].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Valid (unpadded) 2-D convolution with dilated taps.

    Output is ``(n, out, h - (k-1)*d, w - (k-1)*d)``.
    """
    n, c, h, w, cout, k, d, ho, wo = _conv_geometry(x, params)
    w2 = params.weights.reshape(cout, -1).astype(x.dtype, copy=False)
    out = np.empty((n, cout, ho, wo), dtype=x.dtype)
    for s, e in _chunks(n, c * k * k * ho * wo):
        res = w2 @ _im2col(x[s:e], k, d, ho, wo)
        out[s:e] = res.reshape(cout, e - s, ho, wo).transpose(1, 0, 2, 3)
    out += params.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return out


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray, need_input_grad: bool = True):
    """Gradients of ``sum(grad_out * conv2d_forward(x, params))``.

    Returns ``(grad_input, grad_weights, grad_bias)``; ``grad_input`` is
    ``None`` when ``need_input_grad`` is false.
    """
    n, c, h, w, cout, k, d, ho, wo = _conv_geometry(x, params)
    if grad_out.shape != (n, cout, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != output shape {(n, cout, ho, wo)}")
    w2 = params.weights.reshape(cout, -1).astype(x.dtype, copy=False)
    gw = np.zeros((cout, c * k * k), dtype=np.float64)
    gx = np.zeros_like(x) if need_input_grad else None
    for s, e in _chunks(n, c * k * k * ho * wo):
        nb = e - s
        g2 = grad_out[s:e].transpose(1, 0, 2, 3).reshape(cout, nb * ho * wo)
        gw += g2 @ _im2col(x[s:e], k, d, ho, wo).T
        if gx is None:
            continue
        gcols = (w2.T @ g2).reshape(c, k, k, nb, ho, wo)
        gxc = gx[s:e]
        for i in range(k):
            for j in range(k):
                gxc[:, :, i * d : i * d + ho, j * d : j * d + wo] += gcols[:, i, j].transpose(1, 0, 2, 3)
    gb = grad_out.sum(axis=(0, 2, 3), dtype=np.float64)
    return gx, gw.reshape(params.weights.shape).astype(params.weights.dtype), gb.astype(params.bias.dtype)


# ---------------------------------------------------------------------------
# pooling


def maxpool3_forward(x: np.ndarray, stride: int):
    """3x3 max pooling.  Ties go to the first maximum in row-major order.

    Returns ``(output, argmax)`` where ``argmax`` holds the flat window
    offset (0..8) of the selected element for each output cell.
    """
    _check4(x)
    if stride < 1:
        raise ValueError("stride must be positive")
    n, c, h, w = x.shape
    if h < 3 or w < 3 or (h - 3) % stride or (w - 3) % stride:
        raise ShapeError(f"spatial size {h}x{w} incompatible with 3x3 pooling at stride {stride}")
    ho, wo = (h - 3) // stride + 1, (w - 3) // stride + 1
    win = np.empty((9, n, c, ho, wo), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            win[3 * i + j] = x[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    arg = win.argmax(axis=0)
    out = np.take_along_axis(win, arg[None], axis=0)[0]
    return out, arg


def maxpool3_backward(grad_out: np.ndarray, argmax: np.ndarray, input_shape, stride: int) -> np.ndarray:
    n, c, h, w = input_shape
    ho, wo = argmax.shape[2:]
    gx = np.zeros(input_shape, dtype=grad_out.dtype)
    for i in range(3):
        for j in range(3):
            sel = np.where(argmax == 3 * i + j, grad_out, 0)
            gx[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += sel
    return gx


# ---------------------------------------------------------------------------
# batch normalisation


def _channel_sum(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Per-channel sum of ``a`` (or of ``a * b``) over (n, h, w).

    Rows of one (sample, channel) are summed in storage precision, the
    per-sample partials in float64.
    """
    n, c = a.shape[:2]
    a3 = a.reshape(n, c, -1)
    if b is None:
        part = a3.sum(axis=2)
    else:
        part = np.einsum("ncp,ncp->nc", a3, b.reshape(n, c, -1))
    return part.sum(axis=0, dtype=np.float64)


def batchnorm_forward(x: np.ndarray, state: BatchNormState, mode: str = "train", update_stats: bool = True):
    """Per-channel batch normalisation.

    In ``train`` mode the batch statistics over (n, h, w) are used and, if
    ``update_stats``, folded into the running estimates with
    ``running = momentum * running + (1 - momentum) * batch``.  ``infer``
    mode uses the running statistics only.

    Returns ``(output, cache)``; the cache feeds :func:`batchnorm_backward`.
    """
    _check4(x)
    if x.shape[1] != state.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, batch norm expects {state.channels}")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m == 0:
        raise ShapeError("batch norm over an empty (n, h, w) extent")
    if mode == "train":
        mean = _channel_sum(x) / m
        diff = x - mean.astype(x.dtype)[None, :, None, None]
        var = _channel_sum(diff, diff) / m
        del diff
        if update_stats:
            mom = state.momentum
            state.running_mean[...] = mom * state.running_mean + (1 - mom) * mean
            state.running_var[...] = mom * state.running_var + (1 - mom) * var
    elif mode == "infer":
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    scale = (state.gamma * inv_std).astype(x.dtype)
    shift = (state.beta - mean * state.gamma * inv_std).astype(x.dtype)
    out = x * scale[None, :, None, None] + shift[None, :, None, None]
    return out, (x, mean, inv_std, mode)


def batchnorm_backward(grad_out: np.ndarray, cache, state: BatchNormState):
    """Returns ``(grad_input, grad_gamma, grad_beta)``."""
    x, mean, inv_std, mode = cache
    dt = x.dtype
    xhat = (x - mean.astype(dt)[None, :, None, None]) * inv_std.astype(dt)[None, :, None, None]
    ggamma = _channel_sum(grad_out, xhat)
    gbeta = _channel_sum(grad_out)
    g_scale = (state.gamma * inv_std).astype(dt)[None, :, None, None]
    if mode == "infer":
        gx = grad_out * g_scale
    else:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        gx = g_scale * (
            grad_out - (gbeta / m).astype(dt)[None, :, None, None] - xhat * (ggamma / m).astype(dt)[None, :, None, None]
        )
    return gx, ggamma.astype(state.gamma.dtype), gbeta.astype(state.beta.dtype)


# ---------------------------------------------------------------------------
# activations


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, out: np.ndarray) -> np.ndarray:
    return grad_out * (out > 0)


def dropout(x: np.ndarray, rate: float, mode: str, rng: np.random.Generator | None = None):
    """Inverted dropout.  Returns ``(output, mask)``; mask is ``None`` when
    the op is the identity (infer mode or ``rate == 0``)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "infer" or rate == 0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Softmax over axis 1 at every spatial position."""
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_backward(grad_out: np.ndarray, prob: np.ndarray) -> np.ndarray:
    return prob * (grad_out - (grad_out * prob).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# MT01 binary format

MAGIC = b"MT01"


def save_mt01(path, tensor: np.ndarray) -> None:
    """Write a rank-4 tensor (lower ranks are left-padded with 1s)."""
    arr = np.asarray(tensor)
    if arr.ndim > 4:
        raise ShapeError(f"MT01 holds at most rank 4, got {arr.shape}")
    shape = (1,) * (4 - arr.ndim) + arr.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", *shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_mt01(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an MT01 file")
    shape = struct.unpack("<4I", raw[4:20])
    count = int(np.prod(shape))
    if len(raw) != 20 + 4 * count:
        raise ValueError(f"{path}: payload size does not match header {shape}")
    return np.frombuffer(raw, dtype="<f4", offset=20).astype(DTYPE).reshape(shape)
