"""Dense numeric core: layer forward/backward passes, Adam, and a finite-difference oracle.

All layers follow the same convention: ``layer(...)`` returns ``(out, cache)`` and
``layer_backward(dout, cache)`` returns gradients in argument order. Arrays are
float64 numpy arrays, images are channel-last ``(H, W, C)`` or batched
``(N, H, W, C)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy import fft as sfft
from scipy.special import expit

LOG_FLOOR = 1e-12


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected (H, W, C) or (N, H, W, C) input, got shape {x.shape}")
    return x, False


# --------------------------------------------------------------------------- conv


@dataclass
class _ConvCache:
    shape: tuple[int, ...]
    single: bool
    w: np.ndarray
    # None when the input is identically zero
    region: tuple[int, int, int, int] | None = None
    origin: tuple[int, int] = (0, 0)
    fft_shape: tuple[int, int] = (0, 0)
    x_hat: np.ndarray | None = None


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padded, stride-1 2-D cross-correlation.

    ``x`` is ``(H, W, Cin)`` or ``(N, H, W, Cin)``, ``w`` is ``(kh, kw, Cin, Cout)``
    with odd kernel sides, ``b`` is ``(Cout,)``.

    The product is evaluated with FFTs over the bounding box of the nonzero input
    only. Outside that box (grown by the kernel radius) every output equals the
    bias, which is exact and makes polygon-masked chips cheap.
    """
    x, single = _as_batch(x)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, H, W, C = x.shape
    if w.ndim != 4:
        raise ValueError(f"kernel must be (kh, kw, Cin, Cout), got shape {w.shape}")
    kh, kw, cin, cout = w.shape
    if cin != C:
        raise ValueError(f"input has {C} channels but kernel expects {cin} (input {x.shape}, kernel {w.shape})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel sides must be odd, got {kh}x{kw}")
    if b.shape != (cout,):
        raise ValueError(f"bias shape {b.shape} does not match {cout} output channels")

    out = np.empty((n, H, W, cout))
    out[...] = b
    cache = _ConvCache(shape=x.shape, single=single, w=w)

    nz = x.any(axis=0).any(axis=-1)
    rows = np.flatnonzero(nz.any(axis=1))
    if rows.size == 0:
        return (out[0] if single else out), cache
    cols = np.flatnonzero(nz.any(axis=0))
    r0, r1, c0, c1 = int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1
    h, wd = r1 - r0, c1 - c0
    ph, pw = kh // 2, kw // 2
    shape = (sfft.next_fast_len(h + kh - 1, real=True), sfft.next_fast_len(wd + kw - 1, real=True))

    # spatial axes lead so the per-frequency channel contraction is a contiguous batched matmul
    x_hat = sfft.rfft2(x[:, r0:r1, c0:c1, :].transpose(1, 2, 0, 3), s=shape, axes=(0, 1))  # (Lh, Lw', n, C)
    # convolution with the flipped kernel == cross-correlation with the kernel
    k_hat = sfft.rfft2(w[::-1, ::-1], s=shape, axes=(0, 1))  # (Lh, Lw', C, Cout)
    full = sfft.irfft2(np.matmul(x_hat, k_hat), s=shape, axes=(0, 1))  # (Lh, Lw, n, Cout)

    # full[m] is the output at row r0 - ph + m
    ya, yb = max(0, r0 - ph), min(H, r1 + ph)
    xa, xb = max(0, c0 - pw), min(W, c1 + pw)
    oy, ox = r0 - ph, c0 - pw
    out[:, ya:yb, xa:xb, :] += full[ya - oy:yb - oy, xa - ox:xb - ox].transpose(2, 0, 1, 3)

    cache.region = (ya, yb, xa, xb)
    cache.origin = (oy, ox)
    cache.fft_shape = shape
    cache.x_hat = x_hat
    return (out[0] if single else out), cache


def conv2d_backward(dout: np.ndarray, cache: _ConvCache, input_grad: bool = True):
    """Gradients ``(dx, dw, db)`` of :func:`conv2d`; ``dx`` is None if not requested."""
    dout, _ = _as_batch(dout)
    n, H, W, C = cache.shape
    kh, kw, cin, cout = cache.w.shape
    db = dout.sum(axis=(0, 1, 2))

    dw = np.zeros_like(cache.w)
    if cache.region is not None:
        ya, yb, xa, xb = cache.region
        oy, ox = cache.origin
        shape = cache.fft_shape
        g = np.zeros(shape + (n, cout))
        g[ya - oy:yb - oy, xa - ox:xb - ox] = dout[:, ya:yb, xa:xb, :].transpose(1, 2, 0, 3)
        g_hat = sfft.rfft2(g, s=shape, axes=(0, 1))
        # correlation of the output gradient with the input, contracted over the batch
        x_conj = np.ascontiguousarray(np.conj(cache.x_hat).swapaxes(2, 3))  # (Lh, Lw', C, n)
        corr = sfft.irfft2(np.matmul(x_conj, g_hat), s=shape, axes=(0, 1))[:kh, :kw]
        dw = np.ascontiguousarray(corr[::-1, ::-1])

    dx = None
    if input_grad:
        ph, pw = kh // 2, kw // 2
        shape = (sfft.next_fast_len(H + kh - 1, real=True), sfft.next_fast_len(W + kw - 1, real=True))
        d_hat = sfft.rfft2(dout.transpose(1, 2, 0, 3), s=shape, axes=(0, 1))  # (Lh, Lw', n, Cout)
        k_hat = sfft.rfft2(cache.w.transpose(0, 1, 3, 2), s=shape, axes=(0, 1))  # (Lh, Lw', Cout, Cin)
        full = sfft.irfft2(np.matmul(d_hat, k_hat), s=shape, axes=(0, 1))
        dx = np.ascontiguousarray(full[ph:ph + H, pw:pw + W].transpose(2, 0, 1, 3))
        if cache.single:
            dx = dx[0]
    return dx, dw, db


# ------------------------------------------------------------------ elementwise


def relu(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0), x


def relu_backward(dout: np.ndarray, cache: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return dout * (cache > 0)


def sigmoid(x):
    """Logistic function; stays positive (subnormal) down to about -745."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out[()] if out.ndim == 0 else out


def sigmoid_backward(dout, p):
    return dout * p * (1.0 - p)


# ---------------------------------------------------------------------- pooling


def pool_output_size(size: int, window: int, stride: int) -> int:
    n = -(-max(size - window, 0) // stride) + 1
    # a trailing window must start inside the input
    return n - 1 if (n - 1) * stride >= size else n


def maxpool2d(x: np.ndarray, window: int = 3, stride: int = 3):
    """Max pooling over ``(H, W)``; edge windows may be partial.

    Ties resolve to the first element of the window in row-major order.
    """
    x, single = _as_batch(x)
    n, H, W, F = x.shape
    ho, wo = pool_output_size(H, window, stride), pool_output_size(W, window, stride)
    hp, wp = max(H, (ho - 1) * stride + window), max(W, (wo - 1) * stride + window)
    if hp == H and wp == W:
        xp = x
    else:
        xp = np.full((n, hp, wp, F), -np.inf)
        xp[:, :H, :W, :] = x
    if window == stride:
        blocks = xp.reshape(n, ho, window, wo, window, F).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, F, -1)
        arg = blocks.argmax(axis=-1)
        best = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    else:
        best = np.full((n, ho, wo, F), -np.inf)
        arg = np.zeros((n, ho, wo, F), dtype=np.int64)
        ys, xs = (ho - 1) * stride + 1, (wo - 1) * stride + 1
        for i in range(window):
            for j in range(window):
                v = xp[:, i:i + ys:stride, j:j + xs:stride, :]
                better = v > best
                best = np.where(better, v, best)
                arg[better] = i * window + j
    cache = (x.shape, single, window, stride, arg)
    return (best[0] if single else best), cache


def maxpool2d_backward(dout: np.ndarray, cache) -> np.ndarray:
    shape, single, window, stride, arg = cache
    dout, _ = _as_batch(dout)
    n, H, W, F = shape
    ho, wo = arg.shape[1:3]
    hp, wp = max(H, (ho - 1) * stride + window), max(W, (wo - 1) * stride + window)
    if window == stride:
        blocks = np.zeros((n, ho, wo, F, window * window))
        np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
        dxp = blocks.reshape(n, ho, wo, F, window, window).transpose(0, 1, 4, 2, 5, 3).reshape(n, hp, wp, F)
    else:
        dxp = np.zeros((n, hp, wp, F))
        ys, xs = (ho - 1) * stride + 1, (wo - 1) * stride + 1
        for i in range(window):
            for j in range(window):
                dxp[:, i:i + ys:stride, j:j + xs:stride, :] += np.where(arg == i * window + j, dout, 0.0)
    dx = dxp[:, :H, :W, :]
    return dx[0] if single else dx


# ------------------------------------------------------- fused spatial block


@dataclass
class _FusedCache:
    shape: tuple[int, ...]
    single: bool
    w_shape: tuple[int, ...]
    b: np.ndarray
    # pooled-grid window range that was computed densely, or None
    cells: tuple[int, int, int, int] | None = None
    conv: _ConvCache | None = None
    relu: np.ndarray | None = None
    pool: tuple | None = None
    crop: tuple | None = None


def _window_range(lo: int, hi: int, n_out: int, window: int, stride: int) -> tuple[int, int]:
    """Indices of pooling windows that overlap rows ``[lo, hi)``."""
    first = max(0, (lo - window) // stride + 1)
    last = min(n_out - 1, (hi - 1) // stride)
    return first, last + 1


def conv_relu_pool(x: np.ndarray, w: np.ndarray, b: np.ndarray, window: int = 3, stride: int = 3):
    """``maxpool2d(relu(conv2d(x, w, b)))`` evaluated only where the input matters.

    Pooling windows farther than the kernel radius from every nonzero input pixel
    see the constant ``b`` and pool to ``relu(b)``; only the remaining windows are
    computed. When windows tile the input (``window >= stride``) forward values equal
    the unfused composition exactly; otherwise they agree to rounding.
    """
    x, single = _as_batch(x)
    b = np.asarray(b, dtype=np.float64)
    n, H, W, C = x.shape
    kh, kw = np.shape(w)[:2]
    ho, wo = pool_output_size(H, window, stride), pool_output_size(W, window, stride)
    out = np.empty((n, ho, wo, b.shape[0]))
    out[...] = np.maximum(b, 0.0)
    cache = _FusedCache(x.shape, single, np.shape(w), b)
    if np.shape(w)[2] != C:
        raise ValueError(f"input has {C} channels but kernel expects {np.shape(w)[2]} (input {x.shape}, kernel {np.shape(w)})")

    nz = x.any(axis=0).any(axis=-1)
    rows = np.flatnonzero(nz.any(axis=1))
    if rows.size == 0:
        return (out[0] if single else out), cache
    cols = np.flatnonzero(nz.any(axis=0))
    ph, pw = kh // 2, kw // 2
    i0, i1 = _window_range(max(0, int(rows[0]) - ph), min(H, int(rows[-1]) + 1 + ph), ho, window, stride)
    j0, j1 = _window_range(max(0, int(cols[0]) - pw), min(W, int(cols[-1]) + 1 + pw), wo, window, stride)
    if i1 <= i0 or j1 <= j0:
        # every nonzero pixel falls between windows
        return (out[0] if single else out), cache
    # conv outputs feeding those windows, and the input rows they read
    y0, y1 = i0 * stride, min(H, (i1 - 1) * stride + window)
    x0, x1 = j0 * stride, min(W, (j1 - 1) * stride + window)
    cy0, cx0 = max(0, y0 - ph), max(0, x0 - pw)
    xc = x[:, cy0:min(H, y1 + ph), cx0:min(W, x1 + pw), :]
    a, c_conv = conv2d(xc, w, b)
    a = a[:, y0 - cy0:y1 - cy0, x0 - cx0:x1 - cx0, :]
    cache.cells = (i0, i1, j0, j1)
    r, c_relu = relu(a)
    p, c_pool = maxpool2d(r, window, stride)
    out[:, i0:i1, j0:j1, :] = p
    cache.conv, cache.relu, cache.pool = c_conv, c_relu, c_pool
    cache.crop = (y0 - cy0, y1 - cy0, x0 - cx0, x1 - cx0, xc.shape)
    return (out[0] if single else out), cache


def conv_pool_inference(x: np.ndarray, w: np.ndarray, b: np.ndarray, window: int = 3, stride: int = 3,
                        kernel_fft: dict | None = None):
    """Forward-only :func:`conv_relu_pool` for a ``(N, H, W, C)`` batch.

    Returns ``(out, cells)`` where ``cells`` is ``(i0, i1, j0, j1)``, the block of
    pooling windows that were computed, or None when the input is all zero. Values
    are identical to :func:`conv_relu_pool`. ``kernel_fft`` is an optional dict that
    memoizes kernel transforms by FFT shape across calls with the same ``w``.
    """
    x = np.asarray(x, dtype=np.float64)
    n, H, W, C = x.shape
    kh, kw, cin, cout = w.shape
    if cin != C:
        raise ValueError(f"input has {C} channels but kernel expects {cin}")
    ho, wo = pool_output_size(H, window, stride), pool_output_size(W, window, stride)
    out = np.empty((n, ho, wo, cout))
    out[...] = np.maximum(b, 0.0)
    nz = x.any(axis=0).any(axis=-1)
    rows = np.flatnonzero(nz.any(axis=1))
    if rows.size == 0:
        return out, None
    cols = np.flatnonzero(nz.any(axis=0))
    r0, r1, c0, c1 = int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1
    ph, pw = kh // 2, kw // 2
    i0, i1 = _window_range(max(0, r0 - ph), min(H, r1 + ph), ho, window, stride)
    j0, j1 = _window_range(max(0, c0 - pw), min(W, c1 + pw), wo, window, stride)
    if i1 <= i0 or j1 <= j0:
        return out, None
    y0, x0 = i0 * stride, j0 * stride
    y1, x1 = min(H, (i1 - 1) * stride + window), min(W, (j1 - 1) * stride + window)

    shape = (sfft.next_fast_len(r1 - r0 + kh - 1, real=True), sfft.next_fast_len(c1 - c0 + kw - 1, real=True))
    k_hat = None if kernel_fft is None else kernel_fft.get(shape)
    if k_hat is None:
        k_hat = sfft.rfft2(w[::-1, ::-1], s=shape, axes=(0, 1))
        if kernel_fft is not None:
            kernel_fft[shape] = k_hat
    x_hat = sfft.rfft2(x[:, r0:r1, c0:c1, :].transpose(1, 2, 0, 3), s=shape, axes=(0, 1))
    full = sfft.irfft2(np.matmul(x_hat, k_hat), s=shape, axes=(0, 1))  # row m is output row r0 - ph + m

    # kernel responses of the computed windows: zero where the kernel sees no input,
    # -inf past the chip edge. The bias is added after pooling; rounding x + b is
    # monotone in x, so max-then-add equals add-then-max bit for bit.
    hh, ww = (i1 - i0) * stride + window - stride, (j1 - j0) * stride + window - stride
    a = np.zeros((hh, ww, n, cout))
    if y1 - y0 < hh or x1 - x0 < ww:
        a[y1 - y0:] = -np.inf
        a[:, x1 - x0:] = -np.inf
    ya, yb = max(y0, r0 - ph), min(y1, r1 + ph)
    xa, xb = max(x0, c0 - pw), min(x1, c1 + pw)
    a[ya - y0:yb - y0, xa - x0:xb - x0] = full[ya - r0 + ph:yb - r0 + ph, xa - c0 + pw:xb - c0 + pw]
    if window == stride:
        p = a.reshape(i1 - i0, window, j1 - j0, window, n, cout).max(axis=(1, 3))
    else:
        ys, xs = (i1 - i0 - 1) * stride + 1, (j1 - j0 - 1) * stride + 1
        p = np.max([a[i:i + ys:stride, j:j + xs:stride] for i in range(window) for j in range(window)], axis=0)
    p += b
    out[:, i0:i1, j0:j1, :] = np.maximum(p, 0.0).transpose(2, 0, 1, 3)
    return out, (i0, i1, j0, j1)


def conv_relu_pool_backward(dout: np.ndarray, cache: _FusedCache):
    """Parameter gradients ``(dw, db)`` of :func:`conv_relu_pool`."""
    dout, _ = _as_batch(dout)
    # constant windows route their gradient to the bias through relu'(b)
    active = cache.b > 0
    if cache.cells is None:
        return np.zeros(cache.w_shape), dout.sum(axis=(0, 1, 2)) * active
    i0, i1, j0, j1 = cache.cells
    local = dout[:, i0:i1, j0:j1, :]
    rest = dout.copy()
    rest[:, i0:i1, j0:j1, :] = 0.0
    db = rest.sum(axis=(0, 1, 2)) * active
    da = relu_backward(maxpool2d_backward(local, cache.pool), cache.relu)
    ya, yb, xa, xb, crop_shape = cache.crop
    da_full = np.zeros(crop_shape[:3] + (da.shape[-1],))
    da_full[:, ya:yb, xa:xb, :] = da
    _, dw, db_local = conv2d_backward(da_full, cache.conv, input_grad=False)
    return dw, db + db_local


# ----------------------------------------------------------------------- linear


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"linear: input {x.shape}, weights {w.shape}, bias {b.shape} do not agree")
    return x @ w + b, (x, w)


def linear_backward(dout: np.ndarray, cache):
    x, w = cache
    dx = dout @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dx, x2.T @ d2, d2.sum(axis=0)


# ------------------------------------------------------------------------- LSTM


def _gates(z: np.ndarray, d: int):
    s = expit(z)
    return s[..., :d], s[..., d:2 * d], np.tanh(z[..., 2 * d:3 * d]), s[..., 3 * d:]


def lstm_cell(x, h_prev, c_prev, wx, wh, b):
    """One LSTM step with gate blocks ordered (input, forget, candidate, output).

    ``wx`` is ``(n, 4d)``, ``wh`` is ``(d, 4d)``, ``b`` is ``(4d,)``.
    """
    d = wh.shape[0]
    if wx.shape[1] != 4 * d or np.shape(x)[-1] != wx.shape[0] or np.shape(h_prev)[-1] != d:
        raise ValueError(f"lstm_cell: x {np.shape(x)}, h {np.shape(h_prev)}, wx {wx.shape}, wh {wh.shape} do not agree")
    z = x @ wx + h_prev @ wh + b
    i, f, g, o = _gates(z, d)
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x, h_prev, c_prev, i, f, g, o, tc, wx, wh)


def _cell_backward_z(dh, dc, i, f, g, o, tc, c_prev):
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate((
        dc * g * i * (1.0 - i),
        dc * c_prev * f * (1.0 - f),
        dc * i * (1.0 - g * g),
        dh * tc * o * (1.0 - o),
    ), axis=-1)
    return dz, dc * f


def lstm_cell_backward(dh, dc, cache):
    """Returns ``(dx, dh_prev, dc_prev, dwx, dwh, db)``."""
    x, h_prev, c_prev, i, f, g, o, tc, wx, wh = cache
    dz, dc_prev = _cell_backward_z(dh, dc, i, f, g, o, tc, c_prev)
    return dz @ wx.T, dz @ wh.T, dc_prev, np.outer(x, dz), np.outer(h_prev, dz), dz


def lstm(xs: np.ndarray, wx, wh, b):
    """Run a unidirectional LSTM from zero state over ``xs`` of shape ``(T, n)``."""
    T = xs.shape[0]
    d = wh.shape[0]
    xw = xs @ wx + b
    hs = np.zeros((T + 1, d))
    cs = np.zeros((T + 1, d))
    acts = np.empty((T, 4 * d))  # sigmoid gates, with the candidate block holding tanh
    tcs = np.empty((T, d))
    g_slice = slice(2 * d, 3 * d)
    for t in range(T):
        z = xw[t] + hs[t] @ wh
        a = acts[t]
        expit(z, out=a)
        np.tanh(z[g_slice], out=a[g_slice])
        c = cs[t + 1]
        np.multiply(a[d:2 * d], cs[t], out=c)
        c += a[:d] * a[g_slice]
        np.tanh(c, out=tcs[t])
        np.multiply(a[3 * d:], tcs[t], out=hs[t + 1])
    return hs[1:], (xs, wx, wh, hs, cs, acts, tcs)


def lstm_recurrence(xw: np.ndarray, wh: np.ndarray) -> np.ndarray:
    """Forward pass of ``M`` independent LSTMs sharing one time loop.

    ``xw`` holds precomputed input projections plus bias, shape ``(M, T, 4d)``;
    ``wh`` is ``(M, d, 4d)``. Returns hidden states ``(M, T, d)``. No cache is kept.
    """
    m, T, _ = xw.shape
    d = wh.shape[1]
    h = np.zeros((m, 1, d))
    c = np.zeros((m, 1, d))
    out = np.empty((m, T, d))
    for t in range(T):
        z = xw[:, t:t + 1, :] + np.matmul(h, wh)
        a = expit(z)
        g = np.tanh(z[..., 2 * d:3 * d])
        c = a[..., d:2 * d] * c + a[..., :d] * g
        h = a[..., 3 * d:] * np.tanh(c)
        out[:, t, :] = h[:, 0, :]
    return out


def lstm_backward(dhs: np.ndarray, cache):
    """Backpropagation through time. Returns ``(dxs, dwx, dwh, db)``."""
    xs, wx, wh, hs, cs, acts, tcs = cache
    T, d = dhs.shape
    i, f, g, o = acts[:, :d], acts[:, d:2 * d], acts[:, 2 * d:3 * d], acts[:, 3 * d:]
    # step-invariant factors, vectorized over time
    ig = i * (1.0 - g * g)
    gi = g * i * (1.0 - i)
    cf = cs[:-1] * f * (1.0 - f)
    oo = o * (1.0 - tcs * tcs)
    to = tcs * o * (1.0 - o)
    dz = np.empty((T, 4 * d))
    whT = wh.T
    dh = np.zeros(d)
    dc = np.zeros(d)
    for t in range(T - 1, -1, -1):
        dht = dhs[t] + dh
        dc = dc + dht * oo[t]
        row = dz[t]
        np.multiply(dc, gi[t], out=row[:d])
        np.multiply(dc, cf[t], out=row[d:2 * d])
        np.multiply(dc, ig[t], out=row[2 * d:3 * d])
        np.multiply(dht, to[t], out=row[3 * d:])
        dc = dc * f[t]
        dh = row @ whT
    return dz @ wx.T, xs.T @ dz, hs[:-1].T @ dz, dz.sum(axis=0)


def bilstm(xs: np.ndarray, fwd: Mapping[str, np.ndarray], bwd: Mapping[str, np.ndarray]):
    """Bidirectional LSTM; row ``t`` is ``[forward h_t, backward h_t]``.

    ``fwd`` and ``bwd`` map ``wx``, ``wh``, ``b`` to arrays.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ValueError(f"bilstm needs a non-empty (T, n) sequence, got shape {xs.shape}")
    hf, cf = lstm(xs, fwd["wx"], fwd["wh"], fwd["b"])
    hb, cb = lstm(np.ascontiguousarray(xs[::-1]), bwd["wx"], bwd["wh"], bwd["b"])
    return np.concatenate([hf, hb[::-1]], axis=1), (cf, cb)


def bilstm_backward(dout: np.ndarray, cache):
    """Returns ``(dxs, dfwd, dbwd)`` with the direction gradients keyed like the params."""
    cf, cb = cache
    d = dout.shape[1] // 2
    dxf, *gf = lstm_backward(np.ascontiguousarray(dout[:, :d]), cf)
    dxb, *gb = lstm_backward(np.ascontiguousarray(dout[::-1, d:]), cb)
    keys = ("wx", "wh", "b")
    return dxf + dxb[::-1], dict(zip(keys, gf)), dict(zip(keys, gb))


# ------------------------------------------------------------------------- loss


def bce_loss(logit, y):
    """Binary cross-entropy on a logit. Returns ``(loss, dloss/dlogit)``.

    Log arguments are clamped at 1e-12; the logit gradient is ``p - y``.
    """
    p = expit(logit)
    q = expit(-np.asarray(logit, dtype=np.float64))  # 1 - p without cancellation
    loss = -(y * np.log(np.maximum(p, LOG_FLOOR)) + (1 - y) * np.log(np.maximum(q, LOG_FLOOR)))
    return loss, p - y


# ------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **hyper) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **hyper,
        )


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Inputs are left untouched; returns ``(params, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    t = state.t + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        new_p[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)


# ------------------------------------------------------------------- grad check


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    h: float = 1e-3,
    indices=None,
    value_fn: Callable[[np.ndarray], float] | None = None,
) -> float:
    """Max relative error between ``fn``'s analytic gradient and central differences.

    ``fn(x)`` must return ``(value, gradient)``. ``indices`` optionally restricts the
    check to a subset of flat coordinates; ``value_fn`` is a cheaper value-only
    version of ``fn`` used for the perturbed evaluations.
    """
    x = np.array(x, dtype=np.float64)
    _, analytic = fn(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    value = value_fn if value_fn is not None else (lambda z: fn(z)[0])
    flat = x.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for k in coords:
        orig = flat[k]
        flat[k] = orig + h
        fp = float(value(x))
        flat[k] = orig - h
        fm = float(value(x))
        flat[k] = orig
        numeric = (fp - fm) / (2.0 * h)
        worst = max(worst, float(relative_error(analytic[k], numeric)))
    return worst


def all_finite(*arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


__all__ = [
    "AdamState", "adam_step", "all_finite", "bce_loss", "bilstm", "bilstm_backward", "conv2d", "conv2d_backward",
    "conv_pool_inference", "conv_relu_pool", "conv_relu_pool_backward", "grad_check", "linear", "linear_backward",
    "lstm", "lstm_backward", "lstm_cell", "lstm_cell_backward", "lstm_recurrence", "maxpool2d",
    "maxpool2d_backward", "pool_output_size", "relative_error", "relu", "relu_backward", "sigmoid",
    "sigmoid_backward",
]
