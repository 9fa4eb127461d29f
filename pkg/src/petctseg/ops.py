"""Volumetric network operations on autograd tensors.

Everything here works on the ``[channel, depth, height, width]`` layout.
Convolution follows the cross-correlation convention (no kernel flip) and no
operation carries a bias term. Forward passes are plain numpy; the heavy ones
reduce to BLAS matrix products via strided window views.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, _record, relu, sigmoid
from .errors import ConfigurationError, DimensionError, UsageError

ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid}


def activation(kind, x):
    """Apply one of the supported elementwise nonlinearities."""
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise UsageError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}")
    return fn(x)


def _offset_slice(a, stride, count):
    return slice(a, a + stride * (count - 1) + 1, stride)


def _im2col(xp, k, stride, out_dims):
    """Gather kernel windows into [C_in, k, k, k, D', H', W'] via slab copies."""
    c_in = xp.shape[0]
    od, oh, ow = out_dims
    cols = np.empty((c_in, k, k, k, od, oh, ow), dtype=xp.dtype)
    for a in range(k):
        sa = _offset_slice(a, stride, od)
        for b in range(k):
            sb = _offset_slice(b, stride, oh)
            for c in range(k):
                cols[:, a, b, c] = xp[:, sa, sb, _offset_slice(c, stride, ow)]
    return cols


def conv3d(x, kernel, stride=1, padding=0):
    """3-D cross-correlation without bias.

    x: Tensor[C_in, D, H, W]; kernel: Tensor[C_out, C_in, k, k, k] with k odd.
    Output extents must come out as positive integers, i.e. (D + 2*padding - k)
    must be a nonnegative multiple of stride. Differentiable with respect to
    both the input and the kernel.

    Implemented as im2col + one BLAS matrix product; the gathered window
    buffer is reused for the kernel gradient and scattered back (col2im) for
    the input gradient.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 5:
        raise DimensionError("conv3d expects x[C,D,H,W] and kernel[C_out,C_in,k,k,k]")
    c_out, c_k, kd, kh, kw = kernel.shape
    if not (kd == kh == kw):
        raise ConfigurationError("conv3d kernels must be cubic")
    if kd % 2 != 1:
        raise ConfigurationError("conv3d kernel size must be odd")
    if c_k != x.shape[0]:
        raise DimensionError(
            f"kernel expects {c_k} input channels, input has {x.shape[0]}")
    if stride < 1 or padding < 0:
        raise ConfigurationError("conv3d requires stride >= 1 and padding >= 0")
    k, p, s = kd, padding, stride
    out_dims = []
    for extent in x.shape[1:]:
        span = extent + 2 * p - k
        if span < 0 or span % s != 0:
            raise ConfigurationError(
                f"extent {extent} with kernel {k}, padding {p}, stride {s} "
                "gives a non-integer or non-positive output size")
        out_dims.append(span // s + 1)
    od, oh, ow = out_dims

    c_in = x.shape[0]
    if p:
        d, h, w = x.shape[1:]
        xp = np.zeros((c_in, d + 2 * p, h + 2 * p, w + 2 * p),
                      dtype=x.data.dtype)
        xp[:, p:p + d, p:p + h, p:p + w] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, k, s, out_dims)
    kmat = kernel.data.reshape(c_out, c_in * k ** 3)
    y = (kmat @ cols.reshape(c_in * k ** 3, od * oh * ow))
    out = Tensor(y.reshape(c_out, od, oh, ow),
                 requires_grad=x.requires_grad or kernel.requires_grad)

    def vjp(dout):
        dx = dw = None
        dmat = dout.reshape(c_out, od * oh * ow)
        if kernel.requires_grad:
            dw = (dmat @ cols.reshape(c_in * k ** 3, -1).T).reshape(kernel.shape)
        if x.requires_grad:
            dcols = (kmat.T @ dmat).reshape(c_in, k, k, k, od, oh, ow)
            dxp = np.zeros_like(xp)
            for a in range(k):
                sa = _offset_slice(a, s, od)
                for b in range(k):
                    sb = _offset_slice(b, s, oh)
                    for c in range(k):
                        dxp[:, sa, sb, _offset_slice(c, s, ow)] += dcols[:, a, b, c]
            dx = dxp[:, p:p + x.shape[1], p:p + x.shape[2], p:p + x.shape[3]] \
                if p else dxp
        return dx, dw

    _record(out, (x, kernel), vjp)
    return out


def max_pool3d(x, window):
    """Non-overlapping max pooling; window must divide every spatial extent.

    Gradient routes to the argmax of each window, first position in scan
    order (z, then y, then x fastest) on ties.
    """
    if x.data.ndim != 4:
        raise DimensionError("max_pool3d expects x[C,D,H,W]")
    c, d, h, w = x.shape
    m = window
    if m < 1 or d % m or h % m or w % m:
        raise DimensionError(
            f"window {m} must divide spatial extents {(d, h, w)}")
    perm = (0, 1, 3, 5, 2, 4, 6)
    blocks = x.data.reshape(c, d // m, m, h // m, m, w // m, m)
    blocks = blocks.transpose(perm).reshape(c, d // m, h // m, w // m, m ** 3)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    out = Tensor(y, requires_grad=x.requires_grad)

    def vjp(dout):
        g = np.zeros_like(blocks)
        np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
        g = g.reshape(c, d // m, h // m, w // m, m, m, m)
        g = g.transpose(np.argsort(perm)).reshape(c, d, h, w)
        return (g,)

    _record(out, (x,), vjp)
    return out


def _axis_lerp(arr, axis, i0, i1, frac):
    """x0 + f*(x1-x0) along one axis; exact where frac == 0."""
    x0 = np.take(arr, i0, axis=axis)
    x1 = np.take(arr, i1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = len(frac)
    f = frac.reshape(shape)
    return x0 + f * (x1 - x0)


def _upsample_indices(n_src, factor, dtype):
    """Corner-aligned sample positions for one axis."""
    n_dst = n_src * factor
    if n_src == 1:
        i0 = np.zeros(n_dst, dtype=np.intp)
        return i0, i0, np.zeros(n_dst, dtype=dtype)
    pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    i0 = np.floor(pos).astype(np.intp)
    frac = (pos - i0).astype(dtype)
    i1 = np.minimum(i0 + 1, n_src - 1)
    # integral positions collapse to exact gathers, keeping endpoints bit-exact
    exact = frac == 0.0
    i1[exact] = i0[exact]
    return i0, i1, frac


def upsample_trilinear(x, factor):
    """Corner-aligned trilinear upsampling by an integer factor >= 2.

    Constant fields and corner samples are reproduced exactly; interior
    samples interpolate linearly along each axis in turn.
    """
    if x.data.ndim != 4:
        raise DimensionError("upsample_trilinear expects x[C,D,H,W]")
    if factor < 2:
        raise ConfigurationError("upsample factor must be >= 2")
    dtype = x.data.dtype
    plans = [(_upsample_indices(x.shape[ax], factor, dtype), ax)
             for ax in (1, 2, 3)]
    y = x.data
    for (i0, i1, frac), ax in plans:
        y = _axis_lerp(y, ax, i0, i1, frac)
    out = Tensor(y, requires_grad=x.requires_grad)

    def vjp(dout):
        g = dout
        for (i0, i1, frac), ax in reversed(plans):
            src = list(g.shape)
            src[ax] = x.shape[ax]
            acc = np.zeros(src, dtype=g.dtype)
            shape = [1] * g.ndim
            shape[ax] = len(frac)
            f = frac.reshape(shape)
            np.add.at(acc, _axis_slicer(ax, i0), g * (1.0 - f))
            np.add.at(acc, _axis_slicer(ax, i1), g * f)
            g = acc
        return (g,)

    _record(out, (x,), vjp)
    return out


def _axis_slicer(axis, idx):
    sl = [slice(None)] * 4
    sl[axis] = idx
    return tuple(sl)


def instance_norm(x, eps=1e-5):
    """Per-channel standardisation over the spatial sites; no learned affine."""
    if x.data.ndim != 4:
        raise DimensionError("instance_norm expects x[C,D,H,W]")
    if eps <= 0:
        raise ConfigurationError("instance_norm eps must be positive")
    mu = x.data.mean(axis=(1, 2, 3), keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=(1, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat, requires_grad=x.requires_grad)

    def vjp(dout):
        red = (1, 2, 3)
        m1 = dout.mean(axis=red, keepdims=True)
        m2 = (dout * xhat).mean(axis=red, keepdims=True)
        return (inv * (dout - m1 - xhat * m2),)

    _record(out, (x,), vjp)
    return out


def fully_connected(x, weights):
    """Bias-free matrix-vector product: weights[C_out, C] @ x[C]."""
    if x.data.ndim != 1 or weights.data.ndim != 2:
        raise DimensionError("fully_connected expects x[C] and weights[C_out,C]")
    if weights.shape[1] != x.shape[0]:
        raise DimensionError(
            f"weights expect width {weights.shape[1]}, input has {x.shape[0]}")
    y = weights.data @ x.data
    out = Tensor(y, requires_grad=x.requires_grad or weights.requires_grad)

    def vjp(dout):
        dx = weights.data.T @ dout if x.requires_grad else None
        dw = np.outer(dout, x.data) if weights.requires_grad else None
        return dx, dw

    _record(out, (x, weights), vjp)
    return out


def global_avg_pool(x):
    """Mean over all spatial sites, one value per channel."""
    if x.data.ndim != 4:
        raise DimensionError("global_avg_pool expects x[C,D,H,W]")
    n = x.data[0].size
    y = x.data.mean(axis=(1, 2, 3))
    out = Tensor(y, requires_grad=x.requires_grad)

    def vjp(dout):
        return (np.broadcast_to(dout[:, None, None, None] / n, x.shape),)

    _record(out, (x,), vjp)
    return out
