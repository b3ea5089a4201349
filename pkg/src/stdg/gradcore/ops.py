"""Differentiable operators over :class:`Tensor`.

Only what the network needs: elementwise arithmetic, reshapes and slices,
ReLU/sigmoid, masked mean-squared error, 2-D convolution and deformable
convolution with bilinear sampling. All inputs are single images laid out
as ``[C, H, W]`` (no batch axis).
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

from .tensor import Tensor, as_tensor, make_node


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(out, (a, b), bw, "mul")


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(np.asarray(a.data.sum()), (a,), bw, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(a.shape),)

    return make_node(a.data.reshape(shape), (a,), bw, "reshape")


def getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return make_node(a.data[index], (a,), bw, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return make_node(np.where(mask, a.data, 0.0), (a,), bw, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        return (g * out * (1.0 - out),)

    return make_node(out, (a,), bw, "sigmoid")


def mse(a, b, mask=None) -> Tensor:
    """Mean squared difference over the elements selected by ``mask``.

    ``mask`` is a {0,1} array broadcastable to ``a``; when it selects nothing
    the result is exactly 0.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    if mask is None:
        m = None
        count = diff.size
    else:
        m = np.broadcast_to(np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64), a.shape)
        count = int(np.count_nonzero(m))
    if count == 0:
        def bw0(g):
            return np.zeros_like(a.data), np.zeros_like(b.data)
        return make_node(np.asarray(0.0), (a, b), bw0, "mse")
    sq = diff * diff if m is None else diff * diff * m
    value = np.asarray(sq.sum() / count)

    def bw(g):
        d = (2.0 / count) * float(np.asarray(g).reshape(-1)[0]) * (diff if m is None else diff * m)
        return d, -d

    return make_node(value, (a, b), bw, "mse")


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    # [C, Ho, Wo, k, k] -> [C, k, k, Ho, Wo]
    return win.transpose(0, 3, 4, 1, 2).reshape(xp.shape[0] * k * k, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a ``[Cin,H,W]`` image with ``[Cout,Cin,k,k]`` weights."""
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects input [Cin,H,W] and weights [Cout,Cin,k,k], got {x.shape} and {w.shape}")
    cin, h, wd = x.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin or k != k2:
        raise ValueError(f"conv2d shape mismatch: input {x.shape} vs weights {w.shape}")
    if k % 2 == 0:
        raise ValueError(f"conv2d needs an odd kernel, got {k}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv2d bias shape {b.shape} does not match {cout} output channels")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d input {x.shape} too small for kernel {k} with padding {padding}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wm = w.data.reshape(cout, -1)
    out = wm @ cols
    if b is not None:
        out += b.data[:, None]

    def bw(g):
        g2 = g.reshape(cout, ho * wo)
        dw = (g2 @ cols.T).reshape(w.shape)
        db = g2.sum(axis=1) if b is not None else None
        dx = None
        if x.requires_grad:
            dcols = (wm.T @ g2).reshape(cin, k, k, ho, wo)
            dxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, ki : ki + stride * (ho - 1) + 1 : stride, kj : kj + stride * (wo - 1) + 1 : stride] += dcols[:, ki, kj]
            dx = dxp[:, padding : padding + h, padding : padding + wd] if padding else dxp
        return (dx, dw) if b is None else (dx, dw, db)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out.reshape(cout, ho, wo), parents, bw, "conv2d")


def _bilinear_taps(offsets: np.ndarray, k: int, h: int, w: int):
    """Bilinear corners of every (kernel tap, output cell) sample.

    Returns ``(idx, wt, d_dy, d_dx)``, each ``[4, K*H*W]``: flat input indices
    of the four corners, their interpolation weights, and the derivatives of
    those weights w.r.t. the fractional sample position. Out-of-bounds corners
    get weight 0 (index clamped to 0), so they read as zero and receive no
    gradient.
    """
    kk = k * k
    pad = k // 2
    ki, kj = np.divmod(np.arange(kk), k)
    py = ((np.arange(h)[None, :, None] + (ki - pad)[:, None, None]) + offsets[0::2]).reshape(-1)
    px = ((np.arange(w)[None, None, :] + (kj - pad)[:, None, None]) + offsets[1::2]).reshape(-1)
    y0f = np.floor(py)
    x0f = np.floor(px)
    ly = py - y0f
    lx = px - x0f
    y0 = y0f.astype(np.int64)
    x0 = x0f.astype(np.int64)
    yy = np.stack([y0, y0, y0 + 1, y0 + 1])
    xx = np.stack([x0, x0 + 1, x0, x0 + 1])
    wt = np.stack([(1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx])
    d_dy = np.stack([-(1 - lx), -lx, 1 - lx, lx])
    d_dx = np.stack([-(1 - ly), 1 - ly, -ly, ly])
    ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    idx = np.where(ok, yy * w + xx, 0)
    return idx, wt * ok, d_dy * ok, d_dx * ok


def _gather(xt: np.ndarray, idx: np.ndarray, wt: np.ndarray) -> np.ndarray:
    """``sum_j wt[j] * xt[idx[j]].T`` for a cell-major input ``xt [H*W, C]`` -> ``[C, K*H*W]``."""
    out = xt[idx[0]] * wt[0][:, None]
    for j in range(1, 4):
        out += xt[idx[j]] * wt[j][:, None]
    return out.T


def deform_conv2d(x: Tensor, w: Tensor, offsets: Tensor, b: Tensor | None = None) -> Tensor:
    """Deformable convolution, stride 1, 'same' padding.

    ``offsets`` is ``[2K, H, W]`` holding a (dy, dx) pair per kernel tap and
    output cell, in input-grid units. Each tap reads the input by bilinear
    interpolation; corners outside the image read as zero.
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ValueError(f"deform_conv2d expects input [Cin,H,W] and weights [Cout,Cin,k,k], got {x.shape} and {w.shape}")
    cin, h, wd = x.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin or k != k2 or k % 2 == 0:
        raise ValueError(f"deform_conv2d shape mismatch: input {x.shape} vs weights {w.shape}")
    kk = k * k
    if offsets.shape != (2 * kk, h, wd):
        raise ValueError(f"deform_conv2d offsets must have {2 * kk} channels on a {h}x{wd} grid, got {offsets.shape}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"deform_conv2d bias shape {b.shape} does not match {cout} output channels")
    hw = h * wd
    idx, wt, d_dy, d_dx = _bilinear_taps(offsets.data, k, h, wd)
    xt = np.ascontiguousarray(x.data.reshape(cin, hw).T)
    # [Cin, K*HW] laid out (c, tap, cell), matching weights reshaped to [Cout, Cin*K]
    cols = _gather(xt, idx, wt).reshape(cin * kk, hw)
    wm = w.data.reshape(cout, -1)
    out = wm @ cols
    if b is not None:
        out += b.data[:, None]

    def bw(g):
        g2 = g.reshape(cout, hw)
        dw = (g2 @ cols.T).reshape(w.shape)
        db = g2.sum(axis=1) if b is not None else None
        dcols = (wm.T @ g2).reshape(cin, kk * hw)
        dx = None
        if x.requires_grad:
            # scatter back through the transposed sampling matrix, 4 entries per sample
            n = kk * hw
            St = sparse.csr_matrix((wt.T.reshape(-1), idx.T.reshape(-1), np.arange(0, 4 * n + 1, 4)), shape=(n, hw))
            dx = np.asarray(St.T @ dcols.T).T.reshape(cin, h, wd)
        doff = None
        if offsets.requires_grad:
            dval_dy = _gather(xt, idx, d_dy)
            dval_dx = _gather(xt, idx, d_dx)
            doff = np.empty((kk, 2, hw))
            doff[:, 0] = np.einsum("ckp,ckp->kp", dcols.reshape(cin, kk, hw), dval_dy.reshape(cin, kk, hw))
            doff[:, 1] = np.einsum("ckp,ckp->kp", dcols.reshape(cin, kk, hw), dval_dx.reshape(cin, kk, hw))
            doff = doff.reshape(2 * kk, h, wd)
        return (dx, dw, doff) if b is None else (dx, dw, doff, db)

    parents = (x, w, offsets) if b is None else (x, w, offsets, b)
    return make_node(out.reshape(cout, h, wd), parents, bw, "deform_conv2d")
