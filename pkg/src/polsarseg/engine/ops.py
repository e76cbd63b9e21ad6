"""Image operators: convolution, transposed convolution, batch norm, max
pooling, bilinear upsampling, and the segmentation loss.

Convolution is cross-correlation (no kernel flip) over NCHW tensors, computed
by im2col + GEMM.  conv_transpose2d is built from the same three primitives
(_conv_forward, _conv_input_grad, _conv_weight_grad) as the exact adjoint of
conv2d, so the adjointness property holds by construction and is still tested
directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DataError, ShapeError
from .tensor import Tensor, record


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one (transposed) convolution."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    has_bias: bool = False
    output_padding: int = 0  # transposed convolution only

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "dilation"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ConvSpec: {name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise ConfigError(f"ConvSpec: padding must be non-negative, got {self.padding}")
        if self.output_padding < 0 or self.output_padding >= self.stride:
            raise ConfigError(
                f"ConvSpec: output_padding must lie in [0, stride), got {self.output_padding}"
            )

    def out_extent(self, n: int, kernel: int) -> int:
        return (n + 2 * self.padding - self.dilation * (kernel - 1) - 1) // self.stride + 1

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return self.out_extent(h, self.kernel_h), self.out_extent(w, self.kernel_w)

    def transpose_out_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h - 1) * self.stride - 2 * self.padding + self.dilation * (self.kernel_h - 1) + 1 + self.output_padding
        wo = (w - 1) * self.stride - 2 * self.padding + self.dilation * (self.kernel_w - 1) + 1 + self.output_padding
        return ho, wo


# ---------------------------------------------------------------------------
# im2col core

def _im2col(x: np.ndarray, kh, kw, stride, pad, dil, ho, wo) -> np.ndarray:
    """(N,C,H,W) -> (N, C*kh*kw, ho*wo), windows enumerated row-major in (ky,kx)."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for ky in range(kh):
        y0 = ky * dil
        y1 = y0 + (ho - 1) * stride + 1
        for kx in range(kw):
            x0 = kx * dil
            x1 = x0 + (wo - 1) * stride + 1
            cols[:, :, ky, kx] = x[:, :, y0:y1:stride, x0:x1:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, n, c, h, w, kh, kw, stride, pad, dil, ho, wo) -> np.ndarray:
    """Adjoint of _im2col: scatter-add column entries back onto the image."""
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    for ky in range(kh):
        y0 = ky * dil
        y1 = y0 + (ho - 1) * stride + 1
        for kx in range(kw):
            x0 = kx * dil
            x1 = x0 + (wo - 1) * stride + 1
            out[:, :, y0:y1:stride, x0:x1:stride] += cols6[:, :, ky, kx]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return out


def _conv_forward(x, w, spec: ConvSpec, ho, wo):
    n = x.shape[0]
    cols = _im2col(x, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding, spec.dilation, ho, wo)
    wmat = w.reshape(w.shape[0], -1)
    out = np.matmul(wmat, cols).reshape(n, w.shape[0], ho, wo)
    return out, cols


def _conv_input_grad(gy, w, spec: ConvSpec, cin, h, wid, ho, wo):
    # gy: (N, Cout, ho, wo); w: (Cout, Cin, kh, kw); returns (N, Cin, h, wid)
    n = gy.shape[0]
    wmat = w.reshape(w.shape[0], -1)
    gcols = np.matmul(wmat.T, gy.reshape(n, w.shape[0], ho * wo))
    return _col2im(gcols, n, cin, h, wid, spec.kernel_h, spec.kernel_w,
                   spec.stride, spec.padding, spec.dilation, ho, wo)


def _conv_weight_grad(cols, gy, cout, ck):
    # cols: (N, Cin*K, L); gy: (N, Cout, ho, wo)
    n = cols.shape[0]
    gflat = gy.reshape(n, cout, -1).transpose(1, 0, 2).reshape(cout, -1)
    cflat = cols.transpose(1, 0, 2).reshape(ck, -1)
    return gflat @ cflat.T


def _check_nchw(x: Tensor, name: str):
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected a 4-d NCHW tensor, got {x.ndim} dimensions")


def conv2d(x: Tensor, weights: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Strided, padded, optionally dilated cross-correlation."""
    _check_nchw(x, "conv2d")
    if weights.shape != (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w):
        raise ShapeError(
            f"conv2d: weight shape {weights.shape} does not match spec "
            f"({spec.out_channels},{spec.in_channels},{spec.kernel_h},{spec.kernel_w})"
        )
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels on dimension 1, spec expects {spec.in_channels}"
        )
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({spec.out_channels},)")
    n, _, h, w = x.shape
    ho, wo = spec.out_hw(h, w)
    if ho < 1 or wo < 1:
        raise ConfigError(
            f"conv2d: non-positive output extent {ho}x{wo} for input {h}x{w} with {spec}"
        )
    record("conv2d", kh=spec.kernel_h, kw=spec.kernel_w, cin=spec.in_channels,
           cout=spec.out_channels, ho=ho, wo=wo, n=n, bias=bias is not None)

    out, cols = _conv_forward(x.data, weights.data, spec, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    wdata = weights.data
    ck = spec.in_channels * spec.kernel_h * spec.kernel_w

    def grad_fn(g):
        gx = _conv_input_grad(g, wdata, spec, spec.in_channels, h, w, ho, wo)
        gw = _conv_weight_grad(cols, g, spec.out_channels, ck).reshape(wdata.shape)
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    parents = (x, weights) if bias is None else (x, weights, bias)
    return Tensor._node(out, parents, grad_fn)


def conv_transpose2d(x: Tensor, weights: Tensor, spec: ConvSpec) -> Tensor:
    """Transposed convolution, the exact adjoint of conv2d with the same spec.

    Weight layout (Cin, Cout, kh, kw).  Output extent
    (H-1)*stride - 2*padding + dilation*(k-1) + 1 + output_padding.
    """
    _check_nchw(x, "conv_transpose2d")
    if weights.shape != (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w):
        raise ShapeError(
            f"conv_transpose2d: weight shape {weights.shape} does not match spec "
            f"({spec.in_channels},{spec.out_channels},{spec.kernel_h},{spec.kernel_w})"
        )
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv_transpose2d: input has {x.shape[1]} channels on dimension 1, "
            f"spec expects {spec.in_channels}"
        )
    n, _, h, w = x.shape
    ho, wo = spec.transpose_out_hw(h, w)
    if ho < 1 or wo < 1:
        raise ConfigError(
            f"conv_transpose2d: non-positive output extent {ho}x{wo} for input {h}x{w}"
        )
    record("conv_transpose2d", kh=spec.kernel_h, kw=spec.kernel_w, cin=spec.in_channels,
           cout=spec.out_channels, hin=h, win=w, n=n)

    # Forward = input-gradient of the adjoint conv (weights read as (Cout_c, Cin_c, .)).
    out = _conv_input_grad(x.data, weights.data, spec, spec.out_channels, ho, wo, h, w)

    wdata = weights.data
    ck = spec.out_channels * spec.kernel_h * spec.kernel_w

    def grad_fn(g):
        gcols = _im2col(g, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding,
                        spec.dilation, h, w)
        gx = np.matmul(wdata.reshape(wdata.shape[0], -1), gcols).reshape(n, spec.in_channels, h, w)
        gw = _conv_weight_grad(gcols, x.data, spec.in_channels, ck).reshape(wdata.shape)
        return gx, gw

    return Tensor._node(out, (x, weights), grad_fn)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: Tensor, running_var: Tensor,
                mode: str, momentum: float = 0.1, epsilon: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes with biased batch statistics, updates running stats
    in place (running_var gets the unbiased estimate), and is differentiable
    through the statistics.  Eval mode is an affine map using running stats.
    """
    _check_nchw(x, "batchnorm2d")
    if epsilon <= 0:
        raise ConfigError(f"batchnorm2d: epsilon must be positive, got {epsilon}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"batchnorm2d: unknown mode {mode!r}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(
                f"batchnorm2d: {name} shape {t.shape} does not match {c} channels (dimension 1)"
            )
    n, _, h, w = x.shape
    record("batchnorm", numel=x.size)
    m = n * h * w
    dt = x.data.dtype

    if mode == "train":
        if m < 2:
            raise ConfigError(f"batchnorm2d: degenerate batch, N*H*W = {m} < 2 in train mode")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + dt.type(epsilon))
        xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
        # sanctioned in-place mutation of the running-stat leaves
        mom = dt.type(momentum)
        running_mean.data[...] = (1 - mom) * running_mean.data + mom * mu
        unbiased = var * (m / (m - 1))
        running_var.data[...] = (1 - mom) * running_var.data + mom * unbiased

        gdata = gamma.data

        def grad_fn(g):
            scale = (gdata * inv_std)[None, :, None, None]
            gmean = g.mean(axis=(0, 2, 3), keepdims=True)
            gxhat_mean = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = scale * (g - gmean - xhat * gxhat_mean)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return Tensor._node(out, (x, gamma, beta), grad_fn)

    inv_std = 1.0 / np.sqrt(running_var.data + dt.type(epsilon))
    xhat = (x.data - running_mean.data[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    gdata = gamma.data

    def grad_fn(g):
        gx = g * (gdata * inv_std)[None, :, None, None]
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor._node(out, (x, gamma, beta), grad_fn)


def maxpool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Per-window max; gradient routes to the first maximal element in
    row-major window order.  Padding cells can never win."""
    _check_nchw(x, "maxpool2d")
    if kernel < 1 or stride < 1 or padding < 0:
        raise ConfigError(
            f"maxpool2d: invalid geometry kernel={kernel} stride={stride} padding={padding}"
        )
    if padding > kernel // 2:
        raise ConfigError(f"maxpool2d: padding {padding} exceeds kernel/2 ({kernel // 2})")
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError(f"maxpool2d: non-positive output extent {ho}x{wo} for input {h}x{w}")
    record("maxpool", kernel=kernel, c=c, ho=ho, wo=wo, n=n)

    flat = x.data.reshape(n * c, 1, h, w)
    if padding:
        flat = np.pad(flat, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                      constant_values=-np.inf)
    cols = _im2col(flat, kernel, kernel, stride, 0, 1, ho, wo)  # (n*c, K, L)
    arg = cols.argmax(axis=1)  # first occurrence on ties, row-major (ky,kx)
    out = np.take_along_axis(cols, arg[:, None, :], axis=1)[:, 0, :].reshape(n, c, ho, wo)

    hp, wp = h + 2 * padding, w + 2 * padding

    def grad_fn(g):
        gcols = np.zeros_like(cols)
        np.put_along_axis(gcols, arg[:, None, :], g.reshape(n * c, 1, ho * wo), axis=1)
        gflat = _col2im(gcols, n * c, 1, hp, wp, kernel, kernel, stride, 0, 1, ho, wo)
        if padding:
            gflat = gflat[:, :, padding:padding + h, padding:padding + w]
        return (gflat.reshape(n, c, h, w),)

    return Tensor._node(out, (x,), grad_fn)


def _interp_matrix(out_n: int, in_n: int, dtype) -> np.ndarray:
    """(out_n, in_n) row-stochastic bilinear weights, half-pixel centers."""
    src = (np.arange(out_n, dtype=np.float64) + 0.5) * (in_n / out_n) - 0.5
    src = np.clip(src, 0.0, in_n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_n - 1)
    frac = src - i0
    m = np.zeros((out_n, in_n), dtype=np.float64)
    rows = np.arange(out_n)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centers (align-corners disabled)."""
    _check_nchw(x, "upsample_bilinear")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"upsample_bilinear: output extents must be >= 1, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    record("upsample", c=c, ho=out_h, wo=out_w, n=n)
    wh = _interp_matrix(out_h, h, x.data.dtype)
    ww = _interp_matrix(out_w, w, x.data.dtype)

    flat = x.data.reshape(n * c, h, w)
    out = np.matmul(np.matmul(wh[None], flat), ww.T[None]).reshape(n, c, out_h, out_w)

    def grad_fn(g):
        gflat = g.reshape(n * c, out_h, out_w)
        gx = np.matmul(np.matmul(wh.T[None], gflat), ww[None])
        return (gx.reshape(n, c, h, w),)

    return Tensor._node(out, (x,), grad_fn)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean over non-ignored pixels of -log softmax(logits)[label].

    labels: integer (N,H,W) array; values must lie in [0, C) or equal
    ignore_index.  Raises if every pixel is ignored.
    """
    _check_nchw(logits, "cross_entropy_loss")
    labels = np.asarray(labels)
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(
            f"cross_entropy_loss: labels shape {labels.shape} does not match logits ({n},{h},{w})"
        )
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        ni, yi, xi = (int(v) for v in np.argwhere(bad)[0])
        raise DataError(
            f"cross_entropy_loss: label {int(labels[ni, yi, xi])} out of range [0,{c}) "
            f"at pixel (n={ni}, y={yi}, x={xi})"
        )
    count = int(valid.sum())
    if count == 0:
        raise DataError("cross_entropy_loss: all pixels ignored, nothing to score")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    ni, yi, xi = np.nonzero(valid)
    lab = labels[ni, yi, xi]
    picked = logp[ni, lab, yi, xi]
    dt = logits.data.dtype
    loss = np.asarray(-(picked.sum(dtype=np.float64) / count), dtype=dt)

    def grad_fn(g):
        p = np.exp(logp)
        gx = p * (np.asarray(valid, dtype=dt)[:, None, :, :] / dt.type(count))
        gx[ni, lab, yi, xi] -= dt.type(1.0 / count)
        return (gx * g,)

    return Tensor._node(loss, (logits,), grad_fn)
