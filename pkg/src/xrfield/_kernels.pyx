# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled ray-marching kernels.

Coordinates are continuous voxel indices ``(ix, iy, iz)`` into a ``[z, y, x]``
array; samples outside the grid read as zero (and scatter nowhere).
"""
from libc.math cimport floor

import numpy as np


cdef inline double _tri(const double[:, :, ::1] vol, double x, double y, double z) noexcept nogil:
    cdef Py_ssize_t nz = vol.shape[0], ny = vol.shape[1], nx = vol.shape[2]
    cdef double fx0 = floor(x), fy0 = floor(y), fz0 = floor(z)
    cdef Py_ssize_t x0 = <Py_ssize_t>fx0, y0 = <Py_ssize_t>fy0, z0 = <Py_ssize_t>fz0
    cdef double fx = x - fx0, fy = y - fy0, fz = z - fz0
    cdef double acc = 0.0, wz, wy, wx
    cdef Py_ssize_t dz, dy, dx, iz, iy, ix
    if x0 < -1 or y0 < -1 or z0 < -1 or x0 >= nx or y0 >= ny or z0 >= nz:
        return 0.0
    for dz in range(2):
        iz = z0 + dz
        if iz < 0 or iz >= nz:
            continue
        wz = fz if dz else 1.0 - fz
        for dy in range(2):
            iy = y0 + dy
            if iy < 0 or iy >= ny:
                continue
            wy = wz * (fy if dy else 1.0 - fy)
            for dx in range(2):
                ix = x0 + dx
                if ix < 0 or ix >= nx:
                    continue
                wx = wy * (fx if dx else 1.0 - fx)
                acc += wx * vol[iz, iy, ix]
    return acc


cdef inline void _splat(double[:, :, ::1] vol, double x, double y, double z, double val) noexcept nogil:
    cdef Py_ssize_t nz = vol.shape[0], ny = vol.shape[1], nx = vol.shape[2]
    cdef double fx0 = floor(x), fy0 = floor(y), fz0 = floor(z)
    cdef Py_ssize_t x0 = <Py_ssize_t>fx0, y0 = <Py_ssize_t>fy0, z0 = <Py_ssize_t>fz0
    cdef double fx = x - fx0, fy = y - fy0, fz = z - fz0
    cdef double wz, wy
    cdef Py_ssize_t dz, dy, dx, iz, iy, ix
    if x0 < -1 or y0 < -1 or z0 < -1 or x0 >= nx or y0 >= ny or z0 >= nz:
        return
    for dz in range(2):
        iz = z0 + dz
        if iz < 0 or iz >= nz:
            continue
        wz = fz if dz else 1.0 - fz
        for dy in range(2):
            iy = y0 + dy
            if iy < 0 or iy >= ny:
                continue
            wy = wz * (fy if dy else 1.0 - fy)
            for dx in range(2):
                ix = x0 + dx
                if ix < 0 or ix >= nx:
                    continue
                vol[iz, iy, ix] += val * wy * (fx if dx else 1.0 - fx)


def march_forward(vol, start, step, weight, Py_ssize_t n):
    """``out[r] = weight[r] * sum_j trilinear(vol, start[r] + j * step[r])``."""
    cdef const double[:, :, ::1] v = np.ascontiguousarray(vol, dtype=np.float64)
    cdef const double[:, ::1] s = np.ascontiguousarray(start, dtype=np.float64)
    cdef const double[:, ::1] d = np.ascontiguousarray(step, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(weight, dtype=np.float64)
    cdef Py_ssize_t R = s.shape[0], r, j
    out = np.zeros(R, dtype=np.float64)
    cdef double[::1] o = out
    cdef double acc
    with nogil:
        for r in range(R):
            acc = 0.0
            for j in range(n):
                acc += _tri(v, s[r, 0] + j * d[r, 0], s[r, 1] + j * d[r, 1], s[r, 2] + j * d[r, 2])
            o[r] = w[r] * acc
    return out


def march_back(shape, start, step, weight, values, Py_ssize_t n):
    """Adjoint of :func:`march_forward`: scatter ``weight[r] * values[r]`` along each ray."""
    out = np.zeros(tuple(shape), dtype=np.float64)
    cdef double[:, :, ::1] v = out
    cdef const double[:, ::1] s = np.ascontiguousarray(start, dtype=np.float64)
    cdef const double[:, ::1] d = np.ascontiguousarray(step, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(weight, dtype=np.float64)
    cdef const double[::1] g = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t R = s.shape[0], r, j
    cdef double val
    with nogil:
        for r in range(R):
            val = w[r] * g[r]
            if val == 0.0:
                continue
            for j in range(n):
                _splat(v, s[r, 0] + j * d[r, 0], s[r, 1] + j * d[r, 1], s[r, 2] + j * d[r, 2], val)
    return out
