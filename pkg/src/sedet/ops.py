"""Image-shaped ops (NCHW) used by the detector network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, concat, make_result


class ShapeError(ValueError):
    pass


@dataclass
class ConvParams:
    weight: Tensor  # out_channels x in_channels x k x k
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"conv weight must be O x I x k x k, got {self.weight.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid stride={self.stride} / padding={self.padding}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


def _pad(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """View of shape N x C x Ho x Wo x k x k."""
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(dwin: np.ndarray, padded_shape, k: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: add N x C x Ho x Wo x k x k back onto the padded input."""
    out = np.zeros(padded_shape)
    ho, wo = dwin.shape[2], dwin.shape[3]
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dwin[..., i, j]
    return out


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """2-D cross-correlation with zero padding.

    Lowered to one batched matmul over im2col columns; the 1x1/stride-1 case
    skips the column copy.
    """
    w = params.weight
    k, s, p = params.kernel, params.stride, params.padding
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d input {x.shape} incompatible with weight {w.shape}")
    n, c, h, wd = x.shape
    if h + 2 * p < k or wd + 2 * p < k:
        raise ShapeError(f"conv2d input {x.shape} smaller than kernel {w.shape} after padding {p}")
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    wmat = w.data.reshape(w.shape[0], -1)

    xp = _pad(x.data, p)
    if k == 1 and s == 1:
        cols = xp.reshape(n, c, ho * wo)
    else:
        cols = _windows(xp, k, s).transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    out = np.matmul(wmat, cols)
    if params.bias is not None:
        out += params.bias.data[None, :, None]
    out = out.reshape(n, w.shape[0], ho, wo)

    def backward(g):
        gflat = np.ascontiguousarray(g).reshape(n, w.shape[0], ho * wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if params.bias is not None and params.bias.requires_grad:
            gb = gflat.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gflat)
            if k == 1 and s == 1:
                gx = gcols.reshape(n, c, h, wd)
            else:
                dwin = gcols.reshape(n, c, k, k, ho, wo).transpose(0, 1, 4, 5, 2, 3)
                gxp = _scatter_windows(dwin, xp.shape, k, s)
                gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return gx, gw, gb

    parents = (x, w) if params.bias is None else (x, w, params.bias)
    return make_result(out, parents, backward)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, eps: float = 1e-5, training: bool = True,
                momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch moments normalize the input and the running
    buffers are updated in place (running variance uses the unbiased estimate).
    """
    if eps <= 0:
        raise ValueError(f"batchnorm eps must be > 0, got {eps}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batchnorm parameters must have length {c} for input {x.shape}")
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        centered = x.data - mu[None, :, None, None]
        var = (centered * centered).mean(axis=axes)
        m = x.data.size // c
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
        centered = x.data - mu[None, :, None, None]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                mean_g = gxhat.mean(axis=axes)
                mean_gx = (gxhat * xhat).mean(axis=axes)
                gx = (gxhat - mean_g[None, :, None, None] - xhat * mean_gx[None, :, None, None]) \
                    * inv_std[None, :, None, None]
            else:
                gx = gxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward)


def maxpool2d(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Sliding-window maximum; padding uses -inf so it never wins."""
    if kernel < 1:
        raise ValueError(f"maxpool kernel must be >= 1, got {kernel}")
    n, c, h, w = x.shape
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise ShapeError(f"maxpool window {kernel} exceeds padded input {x.shape} (padding {padding})")
    xp = _pad(x.data, padding, -np.inf)
    win = _windows(xp, kernel, stride)
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape)
        for o in range(kernel * kernel):
            i, j = divmod(o, kernel)
            sel = arg == o
            if sel.any():
                gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * sel
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return make_result(out, (x,), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape
    return make_result(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    inputs = [as_tensor(t) for t in inputs]
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: shape {t.shape} incompatible with {ref}")
    if len(inputs) == 1:
        return inputs[0]
    return concat(inputs, axis=1)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel mean over H x W; output N x C x 1 x 1."""
    h, w = x.shape[2], x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return make_result(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape),))


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis; ``weight`` is out_features x in_features."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"fully_connected input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def space_to_depth(x: Tensor) -> Tensor:
    """2x2 slicing: N x C x H x W -> N x 4C x H/2 x W/2.

    Channel blocks are ordered (even row, even col), (odd row, even col),
    (even row, odd col), (odd row, odd col).
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"space_to_depth needs even spatial dims, got {x.shape}")
    # N C h/2 2(row) w/2 2(col) -> N (col row) C h/2 w/2
    v = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 5, 3, 1, 2, 4)
    out = v.reshape(n, 4 * c, h // 2, w // 2)

    def backward(g):
        gv = g.reshape(n, 2, 2, c, h // 2, w // 2).transpose(0, 3, 4, 2, 5, 1)
        return (gv.reshape(n, c, h, w),)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def depth_to_space(x: Tensor) -> Tensor:
    """Inverse of :func:`space_to_depth` (no gradient tracking needed)."""
    n, c4, h2, w2 = x.shape
    c = c4 // 4
    v = x.data.reshape(n, 2, 2, c, h2, w2).transpose(0, 3, 4, 2, 5, 1)
    return Tensor(v.reshape(n, c, h2 * 2, w2 * 2))
