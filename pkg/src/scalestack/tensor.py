"""Dense tensor operations for the fully-convolutional classifier.

Tensors are plain ``numpy.ndarray`` values laid out N x C x H x W. Every
differentiable op comes as a ``*_forward`` / ``*_backward`` pair; gradients
are composed by hand in :mod:`scalestack.network`, there is no autodiff graph.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAGIC = b"SSTK1"

_PRECISIONS = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}
_PRECISION_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}

_dtype = np.dtype(np.float32)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def set_precision(bits: int) -> None:
    """Select the global float precision (32 for training, 64 for gradient checks)."""
    global _dtype
    if bits == 32:
        _dtype = np.dtype(np.float32)
    elif bits == 64:
        _dtype = np.dtype(np.float64)
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


def get_dtype() -> np.dtype:
    return _dtype


def as_tensor(x) -> np.ndarray:
    """Contiguous array in the current global precision."""
    return np.ascontiguousarray(x, dtype=_dtype)


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: tuple[int, int]
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        kh, kw = self.kernel
        if self.out_channels < 1 or kh < 1 or kw < 1 or self.stride < 1:
            raise ValueError(f"invalid conv spec {self}")
        if self.pad < 0:
            raise ValueError(f"negative padding in {self}")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        return ((h + 2 * self.pad - kh) // self.stride + 1,
                (w + 2 * self.pad - kw) // self.stride + 1)


def _check_conv(x: np.ndarray, weights: np.ndarray, spec: ConvSpec) -> None:
    if x.ndim != 4:
        raise ShapeError(f"conv input must be N x C x H x W, got shape {x.shape}")
    if weights.ndim != 4:
        raise ShapeError(f"conv weights must be Cout x Cin x kh x kw, got shape {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but weights expect {weights.shape[1]} "
            f"(input {x.shape}, weights {weights.shape})")
    if weights.shape[0] != spec.out_channels or tuple(weights.shape[2:]) != tuple(spec.kernel):
        raise ShapeError(f"weights {weights.shape} do not match {spec}")
    kh, kw = spec.kernel
    h, w = x.shape[2:]
    if h + 2 * spec.pad < kh or w + 2 * spec.pad < kw:
        raise ShapeError(f"input {h}x{w} (pad {spec.pad}) smaller than kernel {kh}x{kw}")


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Patch matrix of shape (N*Ho*Wo, C*kh*kw), rows ordered n, y, x."""
    n, c, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    s = spec.stride
    win = sliding_window_view(_pad(x, spec.pad), spec.kernel, axis=(2, 3))
    win = win[:, :, :(ho - 1) * s + 1:s, :(wo - 1) * s + 1:s]  # N, C, Ho, Wo, kh, kw
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                   spec: ConvSpec, cols: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlate ``x`` with ``weights`` and add ``bias``.

    Output spatial size is ``floor((H + 2*pad - kh) / stride) + 1`` (same for W).
    ``cols`` may carry a precomputed :func:`im2col` of ``x``.
    """
    _check_conv(x, weights, spec)
    if bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)")
    n, c, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    if spec.kernel == (1, 1) and spec.pad == 0:
        xs = x[:, :, ::spec.stride, ::spec.stride]
        out = np.einsum("oc,nchw->nohw", weights[:, :, 0, 0], xs, optimize=True)
    else:
        if cols is None:
            cols = _im2col(x, spec)
        out = (cols @ weights.reshape(spec.out_channels, -1).T).reshape(n, ho, wo, -1)
        out = out.transpose(0, 3, 1, 2)
    out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray | None:
    """Patch matrix reused between forward and backward; None for 1x1 convs."""
    if spec.kernel == (1, 1) and spec.pad == 0:
        return None
    return _im2col(x, spec)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray,
                    spec: ConvSpec, cols: np.ndarray | None = None,
                    need_input_grad: bool = True):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weights and bias.

    Returns ``(grad_input, grad_weights, grad_bias)``; ``grad_input`` is None
    when ``need_input_grad`` is false.
    """
    _check_conv(x, weights, spec)
    n, c, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    if grad_out.shape != (n, spec.out_channels, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output "
                         f"{(n, spec.out_channels, ho, wo)}")
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    s = spec.stride
    if spec.kernel == (1, 1) and spec.pad == 0:
        xs = x[:, :, ::s, ::s]
        w2 = weights[:, :, 0, 0]
        grad_w = np.einsum("nohw,nchw->oc", grad_out, xs, optimize=True)[:, :, None, None]
        grad_w = np.ascontiguousarray(grad_w, dtype=x.dtype)
        if not need_input_grad:
            return None, grad_w, grad_bias
        gxs = np.einsum("oc,nohw->nchw", w2, grad_out, optimize=True)
        if s == 1:
            grad_x = gxs
        else:
            grad_x = np.zeros_like(x)
            grad_x[:, :, ::s, ::s] = gxs
        return np.ascontiguousarray(grad_x, dtype=x.dtype), grad_w, grad_bias

    if cols is None:
        cols = _im2col(x, spec)
    kh, kw = spec.kernel
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, -1)  # (N*Ho*Wo, Cout)
    grad_w = np.ascontiguousarray((g2.T @ cols).reshape(weights.shape), dtype=x.dtype)
    if not need_input_grad:
        return None, grad_w, grad_bias
    p = spec.pad
    if s == 1 and p <= kh - 1 and p <= kw - 1:
        # stride 1: the input gradient is a full correlation with the flipped kernel
        flipped = weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gp = np.pad(grad_out, ((0, 0), (0, 0), (kh - 1 - p, kh - 1 - p), (kw - 1 - p, kw - 1 - p)))
        gcols = _im2col(gp, ConvSpec(c, (kh, kw)))
        gx = (gcols @ flipped.reshape(c, -1).T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(gx, dtype=x.dtype), grad_w, grad_bias
    dcols = (g2 @ weights.reshape(spec.out_channels, -1)).reshape(n, ho, wo, c, kh, kw)
    gxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)  # channels-last scatter
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[..., i, j]
    grad_x = gxp[:, p:p + h, p:p + w, :].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(grad_x, dtype=x.dtype), grad_w, grad_bias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Pass ``grad`` only where the forward input was positive."""
    return grad * (x > 0)


def guided_relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    """ReLU backward gate that also blocks negative incoming gradients."""
    return grad * ((x > 0) & (grad > 0))


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return keep.astype(_dtype) / _dtype.type(1.0 - rate)


def dropout_forward(x: np.ndarray, rate: float, training: bool,
                    rng: np.random.Generator | None = None):
    """Return ``(output, mask)``; ``mask`` is None in eval mode or when rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = dropout_mask(x.shape, rate, rng).astype(x.dtype, copy=False)
    return x * mask, mask


def dropout_backward(grad: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return grad if mask is None else grad * mask


def global_average_pool_forward(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"global pool expects N x C x H x W, got {x.shape}")
    return x.mean(axis=(2, 3))


def global_average_pool_backward(grad: np.ndarray, input_shape) -> np.ndarray:
    n, c, h, w = input_shape
    g = grad[:, :, None, None] / (h * w)
    return np.ascontiguousarray(np.broadcast_to(g, input_shape), dtype=grad.dtype)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy of ``labels`` under softmax(``logits``).

    Returns ``(loss, posteriors, grad_logits)`` where the gradient is
    ``(posteriors - onehot) / N``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k}): {labels.tolist()}")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    post = np.exp(logp)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = post.copy()
    grad[rows, labels] -= 1
    grad /= n
    return loss, post, grad


# -- checkpoint container -----------------------------------------------------

def write_tensors(path, tensors: list[np.ndarray]) -> None:
    """Write arrays back to back, each as an ``SSTK1`` record.

    Record layout: magic, precision byte (4 or 8), rank byte, ``rank`` uint64
    little-endian extents, then the raw little-endian buffer.
    """
    with open(path, "wb") as fh:
        for t in tensors:
            fh.write(encode_tensor(t))


def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.dtype not in _PRECISIONS:
        t = t.astype(np.float64)
    width = _PRECISIONS[t.dtype]
    head = MAGIC + struct.pack("<BB", width, t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
    return head + np.ascontiguousarray(t, dtype=_PRECISION_CODES[width]).tobytes()


def read_tensors(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(data):
        t, pos = decode_tensor(data, pos)
        out.append(t)
    return out


def decode_tensor(data: bytes, pos: int = 0) -> tuple[np.ndarray, int]:
    if data[pos:pos + 5] != MAGIC:
        raise ValueError(f"bad tensor magic at byte {pos}")
    width, rank = struct.unpack_from("<BB", data, pos + 5)
    if width not in _PRECISION_CODES:
        raise ValueError(f"unknown precision byte {width}")
    pos += 7
    shape = struct.unpack_from(f"<{rank}Q", data, pos)
    pos += 8 * rank
    count = int(np.prod(shape)) if rank else 1
    dt = _PRECISION_CODES[width]
    arr = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + count * width
