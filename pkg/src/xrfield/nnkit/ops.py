"""Differentiable operations.

Layouts: dense inputs are ``(N, F)``; images are ``(N, C, H, W)``.
"""
from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.special import expit

from .tensor import Tensor, as_tensor, record


def _shape_error(op, *shapes):
    return ValueError(f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("add", a.shape, b.shape)
    return record(Tensor(a.data + b.data), (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("sub", a.shape, b.shape)
    return record(Tensor(a.data - b.data), (a, b), lambda g: (g, -g))


def scale(x, c) -> Tensor:
    """Multiply by a constant array broadcastable to ``x`` (not differentiated)."""
    x = as_tensor(x)
    c = np.asarray(c, dtype=x.dtype)
    out = x.data * c
    if out.shape != x.shape:
        raise _shape_error("scale", x.shape, c.shape)
    return record(Tensor(out), (x,), lambda g: (g * c,))


def _rowwise_matmul(a, b):
    """``a @ b`` whose rows do not depend on how many rows ``a`` has.

    BLAS switches kernels for single rows and very narrow outputs, which makes
    results depend on batch size. Narrow outputs go through einsum's plain loop;
    a single row is padded to two so it stays on the gemm path.
    """
    if b.shape[1] < 8:
        return np.einsum("ni,io->no", a, b)
    if a.shape[0] == 1:
        return (np.concatenate([a, a]) @ b)[:1]
    return a @ b


def dense(x, W, b=None) -> Tensor:
    """``x @ W + b`` with ``W`` of shape ``(in, out)``."""
    x, W = as_tensor(x), as_tensor(W)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise _shape_error("dense", x.shape, W.shape)
    out = _rowwise_matmul(x.data, W.data)
    if b is None:
        return record(Tensor(out), (x, W), lambda g: (g @ W.data.T, x.data.T @ g))
    b = as_tensor(b)
    if b.shape != (W.shape[1],):
        raise _shape_error("dense bias", b.shape, (W.shape[1],))
    out = out + b.data
    return record(Tensor(out), (x, W, b),
                  lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    return record(Tensor(out), (x,), lambda g: (g * (out > 0),))


def softplus(x) -> Tensor:
    """``ln(1 + e^x)``, evaluated without overflow."""
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data).astype(x.dtype)
    return record(Tensor(out), (x,), lambda g: (g * expit(x.data),))


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].data.ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError:
        raise _shape_error("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return record(Tensor(out), tensors, lambda g: tuple(np.split(g, bounds, axis=ax)))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return record(Tensor(x.data.reshape(shape)), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return record(Tensor(np.transpose(x.data, axes)), (x,), lambda g: (np.transpose(g, inv),))


def take(x, i: int) -> Tensor:
    """Slice ``x[i]`` along the leading axis."""
    x = as_tensor(x)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        return (gx,)

    return record(Tensor(x.data[i]), (x,), backward)


def mean_over_views(x) -> Tensor:
    """Mean over the leading (view) axis."""
    x = as_tensor(x)
    m = x.shape[0]
    return record(Tensor(x.data.mean(axis=0)), (x,),
                  lambda g: (np.broadcast_to(g / m, x.shape).copy(),))


def weighted_sum(x, w) -> Tensor:
    """``out[r, c] = sum_j w[r, j] * x[r, j, c]`` with constant weights."""
    x = as_tensor(x)
    w = np.asarray(w, dtype=x.dtype)
    if x.data.ndim != 3 or w.shape != x.shape[:2]:
        raise _shape_error("weighted_sum", x.shape, w.shape)
    out = np.einsum("rj,rjc->rc", w, x.data)
    return record(Tensor(out), (x,), lambda g: (w[:, :, None] * g[:, None, :],))


def mean_squared_sum(pred, target) -> Tensor:
    """``sum over rows and columns of (pred - target)^2``, divided by the row count."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise _shape_error("mean_squared_sum", pred.shape, target.shape)
    diff = pred.data - target
    n = pred.shape[0]
    out = np.asarray(np.sum(diff * diff) / n, dtype=pred.dtype)
    return record(Tensor(out), (pred,), lambda g: (g * 2.0 * diff / n,))


def total(x) -> Tensor:
    x = as_tensor(x)
    return record(Tensor(np.asarray(x.data.sum())), (x,),
                  lambda g: (np.broadcast_to(g, x.shape).copy(),))


# ---------------------------------------------------------------------------
# image ops


def conv_output_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, kernels, bias=None, stride=1, pad=0) -> Tensor:
    """Cross-correlation of ``(N, C, H, W)`` with ``(O, C, kh, kw)`` kernels."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.data.ndim != 4 or kernels.data.ndim != 4 or x.shape[1] != kernels.shape[1]:
        raise _shape_error("conv2d", x.shape, kernels.shape)
    N, C, H, W = x.shape
    O, _, kh, kw = kernels.shape
    Ho, Wo = conv_output_size(H, kh, stride, pad), conv_output_size(W, kw, stride, pad)
    if Ho < 1 or Wo < 1:
        raise _shape_error("conv2d", x.shape, kernels.shape)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hs = slice(None)

    def window(a, b):
        return (hs, hs, slice(a, a + stride * (Ho - 1) + 1, stride),
                slice(b, b + stride * (Wo - 1) + 1, stride))

    K = kernels.data
    out = np.zeros((N, O, Ho, Wo), dtype=np.result_type(x.data, K))
    for a in range(kh):
        for b in range(kw):
            out += np.einsum("nchw,oc->nohw", xp[window(a, b)], K[:, :, a, b], optimize=True)
    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise _shape_error("conv2d bias", bias.shape, (O,))
        out += bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        gx = np.zeros_like(xp)
        gk = np.zeros_like(K)
        for a in range(kh):
            for b in range(kw):
                gx[window(a, b)] += np.einsum("nohw,oc->nchw", g, K[:, :, a, b], optimize=True)
                gk[:, :, a, b] = np.einsum("nohw,nchw->oc", g, xp[window(a, b)], optimize=True)
        gx = gx[:, :, pad:pad + H, pad:pad + W]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return record(Tensor(out), parents, backward)


def avg_pool(x, size=2) -> Tensor:
    """Non-overlapping ``size x size`` average pooling; trailing rows/cols are dropped."""
    x = as_tensor(x)
    N, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    if Ho < 1 or Wo < 1:
        raise _shape_error("avg_pool", x.shape, (size, size))
    crop = x.data[:, :, :Ho * size, :Wo * size]
    out = crop.reshape(N, C, Ho, size, Wo, size).mean(axis=(3, 5))

    def backward(g):
        gx = np.zeros_like(x.data)
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        gx[:, :, :Ho * size, :Wo * size] = up
        return (gx,)

    return record(Tensor(out), (x,), backward)


def _interp_matrix(n_out, n_in, dtype):
    """Rows of linear-interpolation weights mapping ``n_in`` samples to ``n_out``.

    Pixel centres are aligned (half-pixel convention); edges clamp.
    """
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    f = src - lo
    M = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(M, (np.arange(n_out), lo), 1.0 - f)
    np.add.at(M, (np.arange(n_out), hi), f)
    return M


def bilinear_resize(x, size) -> Tensor:
    """Resize ``(N, C, h, w)`` to ``(N, C, H, W)``."""
    x = as_tensor(x)
    H, W = size
    Mh = _interp_matrix(H, x.shape[2], x.dtype)
    Mw = _interp_matrix(W, x.shape[3], x.dtype)
    out = np.einsum("Hh,nchw,Ww->ncHW", Mh, x.data, Mw, optimize=True)
    return record(Tensor(out), (x,),
                  lambda g: (np.einsum("Hh,ncHW,Ww->nchw", Mh, g, Mw, optimize=True),))


def bilinear_upsample(x, factor: int) -> Tensor:
    x = as_tensor(x)
    return bilinear_resize(x, (x.shape[2] * factor, x.shape[3] * factor))


def bilinear_gather(fmap, rows, cols) -> Tensor:
    """Sample an ``(H, W, D)`` feature map at continuous pixel-index positions.

    Pixel ``(i, j)`` sits at ``(row, col) = (i, j)``. Neighbours outside the
    map contribute zero. Returns ``(P, D)``.
    """
    fmap = as_tensor(fmap)
    H, W, D = fmap.shape
    rows = np.asarray(rows, dtype=float).ravel()
    cols = np.asarray(cols, dtype=float).ravel()
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = (rows - r0).astype(fmap.dtype)
    fc = (cols - c0).astype(fmap.dtype)
    P = len(rows)
    ii, jj, ww = [], [], []
    for dr in (0, 1):
        for dc in (0, 1):
            r, c = r0 + dr, c0 + dc
            w = (fr if dr else 1 - fr) * (fc if dc else 1 - fc)
            ok = (r >= 0) & (r < H) & (c >= 0) & (c < W) & (w != 0)
            ii.append(np.nonzero(ok)[0])
            jj.append((r * W + c)[ok])
            ww.append(w[ok])
    S = sparse.csr_matrix((np.concatenate(ww), (np.concatenate(ii), np.concatenate(jj))),
                          shape=(P, H * W), dtype=fmap.dtype)
    out = np.asarray(S @ fmap.data.reshape(H * W, D))

    def backward(g):
        return (np.asarray(S.T @ g).reshape(H, W, D),)

    return record(Tensor(out), (fmap,), backward)
