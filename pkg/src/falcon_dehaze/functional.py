"""Differentiable image operators: convolutions, pooling, FFTs, batch norm."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided, sliding_window_view

from .tensor import DimensionError, StateError, Tensor, _needs, record


def _require_rank4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected rank-4 (N,C,H,W) input, got rank {x.ndim}")


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(xp, (n, c, ho, wo, k, k), (sn, sc, sh * stride, sw * stride, sh, sw), writeable=False)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding; ``weight`` is (C_out, C_in, k, k)."""
    _require_rank4(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d: weight must be (C_out, C_in, k, k), got {weight.shape}")
    cout, cin, k, _ = weight.shape
    n, c, h, w = x.shape
    if c != cin:
        raise DimensionError(f"conv2d: axis 1 (channels) of input is {c}, weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias axis 0 is {bias.shape}, expected ({cout},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {hp}x{wp}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1

    xd = x.data
    ckk = cin * k * k
    wmat = weight.data.reshape(cout, ckk)
    if k == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        cols = np.ascontiguousarray(xs).reshape(n, cin, ho * wo)
    else:
        if padding:
            xp = np.zeros((n, c, hp, wp), dtype=xd.dtype)
            xp[:, :, padding : padding + h, padding : padding + w] = xd
        else:
            xp = np.ascontiguousarray(xd)
        win = _windows(xp, k, stride, ho, wo)
        # (N, C, k, k, Ho, Wo): spatial axes innermost so the product lands in NCHW order
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, ckk, ho * wo)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    def backward(g):
        gm = g.reshape(n, cout, ho * wo)
        gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(weight.shape) if _needs(weight) else None
        gb = gm.sum(axis=(0, 2)) if bias is not None and _needs(bias) else None
        gx = None
        if _needs(x):
            dcols = np.matmul(wmat.T, gm)
            if k == 1 and padding == 0:
                dxs = dcols.reshape(n, cin, ho, wo)
                if stride > 1:
                    gx = np.zeros(x.shape, dtype=dxs.dtype)
                    gx[:, :, ::stride, ::stride] = dxs
                else:
                    gx = dxs
            else:
                dcols = dcols.reshape(n, cin, k, k, ho, wo)
                gxp = np.zeros((n, cin, hp, wp), dtype=dcols.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, "conv2d", backward, stride=stride, padding=padding)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution without padding; ``weight`` is (C_in, C_out, k, k)."""
    _require_rank4(x, "conv_transpose2d")
    cin, cout, k, _ = weight.shape
    n, c, h, w = x.shape
    if c != cin:
        raise DimensionError(f"conv_transpose2d: axis 1 (channels) of input is {c}, weight expects {cin}")
    ho, wo = (h - 1) * stride + k, (w - 1) * stride + k
    xd = x.data
    xmat = xd.transpose(0, 2, 3, 1).reshape(-1, cin)
    wmat = weight.data.reshape(cin, cout * k * k)
    contrib = (xmat @ wmat).reshape(n, h, w, cout, k, k)
    out = np.zeros((n, cout, ho, wo), dtype=contrib.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * h : stride, j : j + stride * w : stride] += contrib[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gc = np.empty((n, h, w, cout, k, k), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gc[:, :, :, :, i, j] = g[:, :, i : i + stride * h : stride, j : j + stride * w : stride].transpose(
                    0, 2, 3, 1
                )
        gcm = gc.reshape(-1, cout * k * k)
        gx = (gcm @ wmat.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2) if _needs(x) else None
        gw = (xmat.T @ gcm).reshape(weight.shape) if _needs(weight) else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and _needs(bias) else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, "conv_transpose2d", backward, stride=stride)


def upsample_nearest2x(x: Tensor) -> Tensor:
    _require_rank4(x, "upsample_nearest2x")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record(out, (x,), "upsample_nearest2x", backward)


# -- max reductions with argmax routing --------------------------------------------


def _route(g: np.ndarray, flat_idx: np.ndarray, shape: tuple) -> np.ndarray:
    size = int(np.prod(shape))
    if np.iscomplexobj(g):
        out = np.bincount(flat_idx.ravel(), g.real.ravel(), size) + 1j * np.bincount(flat_idx.ravel(), g.imag.ravel(), size)
    else:
        out = np.bincount(flat_idx.ravel(), g.ravel(), size)
    return out.reshape(shape).astype(g.dtype)


def max_pool2d(x: Tensor, kernel: int, stride: int = 1, padding_mode: str = "replicate") -> Tensor:
    """Window maximum over a ``kernel``-square window with edge-replicated borders.

    The output keeps full resolution at stride 1 (total padding ``kernel - 1``,
    the extra row/column on the bottom/right for even kernels). Backward sends
    each output gradient to the first maximiser in row-major window order.
    """
    _require_rank4(x, "max_pool2d")
    if padding_mode != "replicate":
        raise ValueError(f"max_pool2d: unsupported padding_mode {padding_mode!r}")
    if kernel < 1 or stride < 1:
        raise ValueError("max_pool2d: kernel and stride must be >= 1")
    n, c, h, w = x.shape
    lo, hi = (kernel - 1) // 2, kernel // 2
    if h == 0 or w == 0:
        raise DimensionError(f"max_pool2d: empty spatial extent {h}x{w}")
    xd = x.data
    if kernel == 1:
        vals = xd[:, :, ::stride, ::stride]
        rows = np.arange(h)[::stride][:, None] + np.zeros(vals.shape[3], dtype=np.int64)[None, :]
        cols = np.zeros(vals.shape[2], dtype=np.int64)[:, None] + np.arange(w)[::stride][None, :]
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (lo, hi), (lo, hi)), mode="edge")
        # separable: per padded row, max along columns; then max of those along rows
        colwin = sliding_window_view(xp, kernel, axis=3)[:, :, :, ::stride]
        colarg = colwin.argmax(axis=-1)
        colmax = np.take_along_axis(colwin, colarg[..., None], axis=-1)[..., 0]
        rowwin = sliding_window_view(colmax, kernel, axis=2)[:, :, ::stride]
        rowarg = rowwin.argmax(axis=-1)
        vals = np.take_along_axis(rowwin, rowarg[..., None], axis=-1)[..., 0]
        ho, wo = vals.shape[2], vals.shape[3]
        prow = rowarg + (np.arange(ho) * stride)[:, None]
        pcol_off = np.take_along_axis(colarg, prow, axis=2)
        pcol = pcol_off + (np.arange(wo) * stride)[None, :]
        rows = np.clip(prow - lo, 0, h - 1)
        cols = np.clip(pcol - lo, 0, w - 1)
    rows = np.broadcast_to(rows, vals.shape)
    cols = np.broadcast_to(cols, vals.shape)
    base = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
    flat_idx = base + rows * w + cols
    shape = x.shape

    def backward(g):
        return (_route(g, flat_idx, shape),)

    return record(np.ascontiguousarray(vals), (x,), "max_pool2d", backward, argmax=flat_idx, kernel=kernel)


def channel_max(x: Tensor) -> Tensor:
    """Per-pixel maximum over channels; gradient goes to the first maximising channel."""
    _require_rank4(x, "channel_max")
    if x.shape[1] < 1:
        raise DimensionError("channel_max: axis 1 (channels) is empty")
    arg = x.data.argmax(axis=1)[:, None]
    out = np.take_along_axis(x.data, arg, axis=1)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, arg, g, axis=1)
        return (full,)

    return record(out, (x,), "channel_max", backward, argmax=arg)


def channel_min(x: Tensor) -> Tensor:
    """Per-pixel minimum over channels; gradient goes to the first minimising channel."""
    _require_rank4(x, "channel_min")
    if x.shape[1] < 1:
        raise DimensionError("channel_min: axis 1 (channels) is empty")
    arg = x.data.argmin(axis=1)[:, None]
    out = np.take_along_axis(x.data, arg, axis=1)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, arg, g, axis=1)
        return (full,)

    return record(out, (x,), "channel_min", backward, argmin=arg)


# -- spectral ------------------------------------------------------------------


def rfft2(x: Tensor) -> Tensor:
    """Unnormalised real 2-D FFT over (H, W); returns the (N,C,H,W//2+1) half spectrum."""
    _require_rank4(x, "rfft2")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise DimensionError("rfft2: spatial dims must be >= 1")
    cdtype = np.result_type(x.dtype, np.complex64)
    out = np.fft.rfft2(x.data).astype(cdtype, copy=False)
    wf = w // 2 + 1

    def backward(g):
        full = np.zeros((n, c, h, w), dtype=g.dtype)
        full[..., :wf] = g
        gx = np.fft.ifft2(full).real * (h * w)
        return (gx.astype(x.dtype, copy=False),)

    return record(out, (x,), "rfft2", backward, size=(h, w))


def irfft2(z: Tensor, size: tuple[int, int]) -> Tensor:
    """Inverse of :func:`rfft2`, scaled by 1/(H*W); ``size`` is the original (H, W)."""
    _require_rank4(z, "irfft2")
    h, w = size
    if z.shape[2] != h:
        raise DimensionError(f"irfft2: axis 2 of spectrum is {z.shape[2]}, declared H is {h}")
    if z.shape[3] != w // 2 + 1:
        raise DimensionError(f"irfft2: axis 3 of spectrum is {z.shape[3]}, expected W//2+1 = {w // 2 + 1}")
    rdtype = np.finfo(z.dtype).dtype
    out = np.fft.irfft2(z.data, s=(h, w)).astype(rdtype, copy=False)
    weight = np.full(w // 2 + 1, 2.0)
    weight[0] = 1.0
    if w % 2 == 0:
        weight[-1] = 1.0

    def backward(g):
        gz = np.fft.rfft2(g) * (weight / (h * w))
        return (gz.astype(z.dtype, copy=False),)

    return record(out, (z,), "irfft2", backward, size=(h, w))


def complex_to_channels(z: Tensor) -> Tensor:
    """Stack real parts then imaginary parts along channels: (N,C,...) -> (N,2C,...)."""
    c = z.shape[1]
    out = np.concatenate([z.data.real, z.data.imag], axis=1)

    def backward(g):
        return (g[:, :c] + 1j * g[:, c:],)

    return record(out, (z,), "complex_to_channels", backward)


def channels_to_complex(x: Tensor) -> Tensor:
    if x.shape[1] % 2:
        raise DimensionError(f"channels_to_complex: axis 1 extent {x.shape[1]} is odd")
    c = x.shape[1] // 2
    out = x.data[:, :c] + 1j * x.data[:, c:]
    out = out.astype(np.result_type(x.dtype, np.complex64), copy=False)

    def backward(g):
        return (np.concatenate([g.real, g.imag], axis=1).astype(x.dtype, copy=False),)

    return record(out, (x,), "channels_to_complex", backward)


# -- normalisation -----------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None,
    running_var: np.ndarray | None,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation.

    Train mode normalises with the biased batch variance and updates the
    running buffers in place (unbiased variance, ``momentum`` 0.1). Eval mode
    reads the running buffers and leaves them untouched.
    """
    _require_rank4(x, "batch_norm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: parameter length must equal axis 1 extent {c}")
    g_ = gamma.data[None, :, None, None]
    b_ = beta.data[None, :, None, None]
    xd = x.data
    if mode == "eval":
        if running_mean is None or running_var is None:
            raise StateError("batch_norm: eval mode requires initialised running statistics")
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean[None, :, None, None]) * inv[None, :, None, None]
        out = (xhat * g_ + b_).astype(x.dtype, copy=False)
        inv4 = inv[None, :, None, None].astype(x.dtype)

        def backward_eval(g):
            gx = g * g_ * inv4 if _needs(x) else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return record(out, (x, gamma, beta), "batch_norm", backward_eval, mode=mode)
    if mode != "train":
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mean = xd.mean(axis=(0, 2, 3), keepdims=True)
    xc = xd - mean
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g_ + b_
    if running_mean is not None and running_var is not None:
        unbiased = var.ravel() * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mean.ravel().astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if _needs(x):
            gxhat = g * g_
            gx = inv * (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True) - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), "batch_norm", backward, mode=mode)
