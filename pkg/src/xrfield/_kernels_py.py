"""Pure-numpy versions of the compiled ray-marching kernels.

Same signatures and semantics as ``_kernels.pyx``; used when the extension is
not built or when ``XRFIELD_PURE_PYTHON=1``.
"""
import numpy as np

# bound on samples held in memory at once
_CHUNK_SAMPLES = 1 << 20


def _corners(vol_shape, pts):
    """Flat indices and weights of the 8 trilinear corners, zero-padded."""
    nz, ny, nx = vol_shape
    base = np.floor(pts)
    frac = pts - base
    base = base.astype(np.int64)
    idx, wts = [], []
    for dz in (0, 1):
        iz = base[:, 2] + dz
        wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
        for dy in (0, 1):
            iy = base[:, 1] + dy
            wy = wz * (frac[:, 1] if dy else 1.0 - frac[:, 1])
            for dx in (0, 1):
                ix = base[:, 0] + dx
                w = wy * (frac[:, 0] if dx else 1.0 - frac[:, 0])
                ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
                idx.append(np.where(ok, (iz * ny + iy) * nx + ix, 0))
                wts.append(np.where(ok, w, 0.0))
    return idx, wts


def _ray_chunks(R, n):
    per = max(1, _CHUNK_SAMPLES // max(n, 1))
    for lo in range(0, R, per):
        yield lo, min(R, lo + per)


def _points(start, step, n):
    j = np.arange(n, dtype=np.float64)
    return (start[:, None, :] + j[None, :, None] * step[:, None, :]).reshape(-1, 3)


def march_forward(vol, start, step, weight, n):
    vol = np.ascontiguousarray(vol, dtype=np.float64)
    start = np.asarray(start, dtype=np.float64)
    step = np.asarray(step, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    flat = vol.ravel()
    out = np.zeros(len(start))
    for lo, hi in _ray_chunks(len(start), n):
        idx, wts = _corners(vol.shape, _points(start[lo:hi], step[lo:hi], n))
        acc = sum(w * flat[i] for i, w in zip(idx, wts))
        out[lo:hi] = weight[lo:hi] * acc.reshape(hi - lo, n).sum(axis=1)
    return out


def march_back(shape, start, step, weight, values, n):
    shape = tuple(shape)
    start = np.asarray(start, dtype=np.float64)
    step = np.asarray(step, dtype=np.float64)
    scale = np.asarray(weight, dtype=np.float64) * np.asarray(values, dtype=np.float64)
    size = int(np.prod(shape))
    out = np.zeros(size)
    for lo, hi in _ray_chunks(len(start), n):
        idx, wts = _corners(shape, _points(start[lo:hi], step[lo:hi], n))
        per_sample = np.repeat(scale[lo:hi], n)
        for i, w in zip(idx, wts):
            out += np.bincount(i, weights=w * per_sample, minlength=size)
    return out.reshape(shape)
