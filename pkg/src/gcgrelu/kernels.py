"""Forward and backward kernels for the standard layers.

Every function here is pure: it reads its arguments and returns fresh
arrays (batch norm additionally updates the running statistics it is
handed, which is the documented side effect of train mode).  Tensors are
plain ``numpy.ndarray`` objects of dtype float64; feature maps use the
N x C x H x W layout.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DimensionError

Tensor = np.ndarray

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class LayerGrad:
    """Gradient of a scalar loss with respect to a layer's input and parameters."""

    input_grad: Tensor
    param_grads: dict[str, Tensor] = field(default_factory=dict)


def as_tensor(x) -> Tensor:
    return np.ascontiguousarray(x, dtype=np.float64)


def _require_ndim(x: Tensor, ndim: int, name: str) -> None:
    if x.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution (stride 1, zero padding, cross-correlation)
# ---------------------------------------------------------------------------

def im2col(x: Tensor, kh: int, kw: int, padding: int) -> Tensor:
    """Unfold ``x`` (N,C,H,W) into a (N*H'*W', kh*kw*C) patch matrix.

    Column order is (ky, kx, c), matching :func:`weight_matrix`.  The input
    is moved to channels-last once so each kernel offset is a single
    contiguous slice copy.
    """
    n, c, h, w = x.shape
    xh = x.transpose(0, 2, 3, 1)
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    cols = np.empty((n, ho, wo, kh * kw, c))
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, :, ky * kw + kx, :] = xh[:, ky:ky + ho, kx:kx + wo, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def col2im(cols: Tensor, x_shape: tuple, kh: int, kw: int, padding: int) -> Tensor:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back onto the input."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = hp - kh + 1, wp - kw + 1
    cols = cols.reshape(n, ho, wo, kh * kw, c)
    out = np.zeros((n, hp, wp, c))
    for ky in range(kh):
        for kx in range(kw):
            out[:, ky:ky + ho, kx:kx + wo, :] += cols[:, :, :, ky * kw + kx, :]
    if padding:
        out = out[:, padding:-padding, padding:-padding, :]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def weight_matrix(weight: Tensor) -> Tensor:
    """(F,C,kh,kw) filters as an F x (kh*kw*C) matrix in im2col column order."""
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def _conv_shapes(x: Tensor, weight: Tensor, padding: int):
    _require_ndim(x, 4, "conv input")
    _require_ndim(weight, 4, "conv weight")
    if padding < 0:
        raise ConfigError(f"padding must be >= 0, got {padding}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"input has {c} channels but weight expects {wc}")
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    return n, f, kh, kw, ho, wo


def conv2d_forward(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                   padding: int = 0, return_cols: bool = False):
    """Stride-1 cross-correlation of ``x`` (N,C,H,W) with ``weight`` (F,C,kh,kw).

    With ``return_cols`` the unfolded input is returned as well so the
    caller can hand it back to :func:`conv2d_backward`.
    """
    n, f, kh, kw, ho, wo = _conv_shapes(x, weight, padding)
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"bias shape {bias.shape} does not match {f} filters")
    cols = im2col(x, kh, kw, padding)
    out = cols @ weight_matrix(weight).T
    if bias is not None:
        out += bias
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
    return (out, cols) if return_cols else out


def conv2d_backward(x: Tensor, weight: Tensor, out_grad: Tensor, padding: int = 0,
                    cols: Tensor | None = None, with_bias: bool = True) -> LayerGrad:
    n, f, kh, kw, ho, wo = _conv_shapes(x, weight, padding)
    if out_grad.shape != (n, f, ho, wo):
        raise DimensionError(f"out_grad shape {out_grad.shape} != forward output {(n, f, ho, wo)}")
    if cols is None:
        cols = im2col(x, kh, kw, padding)
    g = out_grad.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (g.T @ cols).reshape(f, kh, kw, -1).transpose(0, 3, 1, 2)
    grads = {"weight": np.ascontiguousarray(dw)}
    if with_bias:
        grads["bias"] = g.sum(axis=0)
    dcols = g @ weight_matrix(weight)
    return LayerGrad(col2im(dcols, x.shape, kh, kw, padding), grads)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool2x2_forward(x: Tensor) -> tuple[Tensor, Tensor]:
    """2x2 max pooling with stride 2.

    Returns the pooled map and, per output element, the window-local index
    (0..3, row-major) of the winner.  Ties go to the earliest position in
    row-major order.
    """
    _require_ndim(x, 4, "maxpool input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    q = [x[:, :, dy::2, dx::2] for dy in (0, 1) for dx in (0, 1)]
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    idx = np.where(q[0] == out, 0, np.where(q[1] == out, 1, np.where(q[2] == out, 2, 3)))
    return out, idx.astype(np.int8)


def maxpool2x2_backward(argmax: Tensor, out_grad: Tensor) -> Tensor:
    if argmax.shape != out_grad.shape:
        raise DimensionError(f"argmax shape {argmax.shape} != out_grad shape {out_grad.shape}")
    n, c, ho, wo = out_grad.shape
    grad = np.zeros((n, c, 2 * ho, 2 * wo))
    for k, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        grad[:, :, dy::2, dx::2] = np.where(argmax == k, out_grad, 0.0)
    return grad


def gap_forward(x: Tensor) -> Tensor:
    """Global average pooling, N x C x H x W -> N x C.

    The mean is taken about the first pixel of each map, which keeps a
    constant map exactly constant.
    """
    _require_ndim(x, 4, "GAP input")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError(f"GAP needs non-empty maps, got {x.shape}")
    ref = x[:, :, :1, :1]
    return ref[:, :, 0, 0] + (x - ref).mean(axis=(2, 3))


def gap_backward(out_grad: Tensor, spatial: tuple[int, int]) -> Tensor:
    _require_ndim(out_grad, 2, "GAP out_grad")
    h, w = spatial
    g = out_grad / (h * w)
    return np.ascontiguousarray(np.broadcast_to(g[:, :, None, None], g.shape + (h, w)))


# ---------------------------------------------------------------------------
# fully connected
# ---------------------------------------------------------------------------

def fc_forward(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` for ``x`` of shape N x m and ``weight`` m x s."""
    _require_ndim(x, 2, "fc input")
    _require_ndim(weight, 2, "fc weight")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"fc input width {x.shape[1]} != weight rows {weight.shape[0]}")
    out = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias
    return out


def fc_backward(x: Tensor, weight: Tensor, out_grad: Tensor, with_bias: bool = True) -> LayerGrad:
    _require_ndim(x, 2, "fc input")
    if x.shape[1] != weight.shape[0] or out_grad.shape != (x.shape[0], weight.shape[1]):
        raise DimensionError(
            f"fc backward shapes do not fit: x {x.shape}, W {weight.shape}, g {out_grad.shape}")
    grads = {"weight": x.T @ out_grad}
    if with_bias:
        grads["bias"] = out_grad.sum(axis=0)
    return LayerGrad(out_grad @ weight.T, grads)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def _bn_shape(x: Tensor) -> tuple[int, ...]:
    if x.ndim == 4:
        return (1, -1, 1, 1)
    if x.ndim == 2:
        return (1, -1)
    raise DimensionError(f"batchnorm expects 2-D or 4-D input, got shape {x.shape}")


def _channel_sum(t: Tensor) -> Tensor:
    # per-map sums first: reducing the contiguous trailing axis is much faster
    if t.ndim == 4:
        return t.reshape(t.shape[0], t.shape[1], -1).sum(axis=2).sum(axis=0)
    return t.sum(axis=0)


@dataclass
class BNCache:
    x_hat: Tensor
    inv_std: Tensor
    gamma: Tensor
    mode: str


def batchnorm_forward(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
                      running_var: Tensor, mode: str = "train", eps: float = BN_EPS,
                      momentum: float = BN_MOMENTUM) -> tuple[Tensor, BNCache]:
    """Per-channel batch normalization with a learned affine map.

    In train mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place by an exponential moving average
    (the running variance uses the unbiased estimate).  In eval mode the
    running statistics are used verbatim.
    """
    bshape = _bn_shape(x)
    c = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean),
                      ("running_var", running_var)):
        if arr.shape != (c,):
            raise DimensionError(f"{name} shape {arr.shape} != ({c},)")
    if mode == "train":
        count = x.size // c
        if x.shape[0] < 2:
            raise ConfigError("batch norm in train mode needs a batch of at least 2")
        mean = _channel_sum(x) / count
        centered = x - mean.reshape(bshape)
        var = _channel_sum(centered * centered) / count
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (count / (count - 1))
    elif mode == "eval":
        centered = x - running_mean.reshape(bshape)
        var = running_var
    else:
        raise ConfigError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std.reshape(bshape)
    out = x_hat * gamma.reshape(bshape) + beta.reshape(bshape)
    return out, BNCache(x_hat, inv_std, gamma.copy(), mode)


def batchnorm_backward(cache: BNCache, out_grad: Tensor) -> LayerGrad:
    x_hat = cache.x_hat
    if out_grad.shape != x_hat.shape:
        raise DimensionError(f"out_grad shape {out_grad.shape} != input shape {x_hat.shape}")
    bshape = _bn_shape(x_hat)
    d_beta = _channel_sum(out_grad)
    d_gamma = _channel_sum(out_grad * x_hat)
    scale = (cache.gamma * cache.inv_std).reshape(bshape)
    if cache.mode == "eval":
        dx = out_grad * scale
    else:
        count = x_hat.size // x_hat.shape[1]
        dx = scale * (out_grad - (d_beta.reshape(bshape) + x_hat * d_gamma.reshape(bshape)) / count)
    return LayerGrad(dx, {"gamma": d_gamma, "beta": d_beta})


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax(logits: Tensor) -> Tensor:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: Tensor, labels) -> tuple[float, Tensor]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    _require_ndim(logits, 2, "logits")
    labels = np.asarray(labels)
    n, s = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    if n and (labels.min() < 0 or labels.max() >= s):
        raise DataError(f"labels must lie in [0, {s}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n
