"""Parallel-beam geometry shared by every other module.

Axis convention
---------------
World coordinates are in meters. ``z`` is the vertical rotation axis. A view
at angle 0 sends its beam along ``+y``; the detector ``u`` axis is ``+x`` and
the ``v`` axis is ``+z``. A view at angle ``a`` is that frame rotated by ``a``
about ``z`` (counter-clockwise seen from ``+z``).

Detector coordinates ``(u, v)`` are in pixel units. The detector is centred on
the rotation axis: the axis hits ``(W/2, H/2)``, so pixel ``(i, j)`` (row,
column) has its centre at ``(u, v) = (j + 0.5, i + 0.5)``. Row index grows with
``z``. ``depth`` is the signed distance along the beam from the plane that
contains the rotation axis.

Volume arrays are indexed ``[z, y, x]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class Aabb:
    min: tuple
    max: tuple

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float)
        hi = np.asarray(self.max, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("Aabb corners must be 3-vectors")
        if np.any(lo > hi):
            raise ValueError(f"Aabb min {tuple(lo)} exceeds max {tuple(hi)}")
        object.__setattr__(self, "min", tuple(float(c) for c in lo))
        object.__setattr__(self, "max", tuple(float(c) for c in hi))

    def corners(self) -> np.ndarray:
        lo, hi = self.min, self.max
        return np.array([[x, y, z] for x in (lo[0], hi[0])
                         for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])

    def contains(self, p, tol: float = 0.0) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        lo = np.asarray(self.min) - tol
        hi = np.asarray(self.max) + tol
        return np.all((p >= lo) & (p <= hi), axis=-1)


@dataclass(frozen=True)
class GridSpec:
    """Regular voxel grid; ``origin`` is the world position of voxel (0,0,0)'s centre."""

    dims: tuple
    voxel_size: float
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"grid dims must be three integers >= 1, got {self.dims}")
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValueError("grid origin must be a 3-vector")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "origin", origin)

    @classmethod
    def centered(cls, dims, voxel_size: float) -> "GridSpec":
        """Grid whose centre sits on the world origin (and so on the rotation axis)."""
        dims = tuple(int(d) for d in dims)
        origin = tuple(-(d - 1) / 2.0 * voxel_size for d in dims)
        return cls(dims, voxel_size, origin)

    @property
    def shape(self) -> tuple:
        """Array shape, ``(nz, ny, nx)``."""
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def aabb(self) -> Aabb:
        half = 0.5 * self.voxel_size
        lo = np.asarray(self.origin) - half
        hi = lo + np.asarray(self.dims) * self.voxel_size
        return Aabb(tuple(lo), tuple(hi))

    def support(self) -> Aabb:
        """Box where trilinear reads with zero padding can be nonzero (aabb plus half a voxel)."""
        half = 0.5 * self.voxel_size
        b = self.aabb()
        return Aabb(tuple(c - half for c in b.min), tuple(c + half for c in b.max))

    def world_to_index(self, p) -> np.ndarray:
        """Continuous voxel-index coordinates ``(ix, iy, iz)`` of world points."""
        return (np.asarray(p, dtype=float) - np.asarray(self.origin)) / self.voxel_size

    def index_to_world(self, idx) -> np.ndarray:
        return np.asarray(idx, dtype=float) * self.voxel_size + np.asarray(self.origin)

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of every voxel centre, shape ``(nz, ny, nx, 3)``."""
        nx, ny, nz = self.dims
        iz, iy, ix = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        idx = np.stack([ix, iy, iz], axis=-1).astype(float)
        return self.index_to_world(idx)

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "voxel_size": self.voxel_size,
                "origin": list(self.origin)}


@dataclass(frozen=True)
class ViewGeometry:
    angle: float
    detector_dims: tuple
    pixel_size: float
    view_index: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.detector_dims)
        if len(dims) != 2 or min(dims) < 1:
            raise ValueError(f"detector_dims must be (H, W) >= 1, got {self.detector_dims}")
        if not math.isfinite(self.angle):
            raise ValueError("view angle must be finite")
        object.__setattr__(self, "detector_dims", dims)
        object.__setattr__(self, "angle", float(self.angle) % TWO_PI)
        object.__setattr__(self, "pixel_size", float(self.pixel_size))

    @property
    def height(self) -> int:
        return self.detector_dims[0]

    @property
    def width(self) -> int:
        return self.detector_dims[1]

    @property
    def direction(self) -> np.ndarray:
        """Beam direction, shared by every ray of this view."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([-s, c, 0.0])

    @property
    def u_axis(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([c, s, 0.0])

    @property
    def v_axis(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0])

    def check(self):
        if not self.pixel_size > 0:
            raise ValueError(f"degenerate view {self.view_index}: pixel_size={self.pixel_size}")


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float)
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if o.shape != (3,) or d.shape != (3,):
            raise ValueError("ray origin and direction must be 3-vectors")
        if not n > 0:
            raise ValueError("ray direction must be non-zero")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d / n)

    def at(self, t):
        t = np.asarray(t, dtype=float)
        return self.origin + t[..., None] * self.direction


def world_to_view(x, view: ViewGeometry):
    """Map world points ``(..., 3)`` to ``(u, v, depth)`` arrays of the view."""
    x = np.asarray(x, dtype=float)
    H, W = view.detector_dims
    p = view.pixel_size
    c, s = math.cos(view.angle), math.sin(view.angle)
    # explicit products: BLAS dot paths vary with batch size
    u = W / 2.0 + (x[..., 0] * c + x[..., 1] * s) / p
    v = H / 2.0 + x[..., 2] / p
    depth = x[..., 1] * c - x[..., 0] * s
    return u, v, depth


def view_to_world(u, v, depth, view: ViewGeometry) -> np.ndarray:
    H, W = view.detector_dims
    p = view.pixel_size
    a = (np.asarray(u, dtype=float) - W / 2.0) * p
    z = (np.asarray(v, dtype=float) - H / 2.0) * p
    depth = np.asarray(depth, dtype=float)
    return (a[..., None] * view.u_axis + depth[..., None] * view.direction
            + z[..., None] * view.v_axis)


def standoff_distance(view: ViewGeometry, box: Optional[Aabb] = None) -> float:
    """Distance behind the depth-0 plane at which ray origins are placed.

    Chosen so the whole box lies at ``t > 0``. Without a box the detector's
    own extent bounds the region of interest.
    """
    if box is None:
        H, W = view.detector_dims
        return float(np.hypot(H, W) * view.pixel_size)
    return float(np.max(np.linalg.norm(box.corners(), axis=1))) + view.pixel_size


def pixel_origins(view: ViewGeometry, box: Optional[Aabb] = None) -> np.ndarray:
    """Ray origins for every pixel, shape ``(H, W, 3)``."""
    view.check()
    H, W = view.detector_dims
    jj, ii = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    on_plane = view_to_world(jj, ii, np.zeros_like(jj), view)
    return on_plane - standoff_distance(view, box) * view.direction


def ray_for_pixel(view: ViewGeometry, i: int, j: int, box: Optional[Aabb] = None) -> Ray:
    H, W = view.detector_dims
    if not (0 <= i < H and 0 <= j < W):
        raise IndexError(f"pixel ({i}, {j}) outside detector {H}x{W}")
    view.check()
    on_plane = view_to_world(j + 0.5, i + 0.5, 0.0, view)
    return Ray(on_plane - standoff_distance(view, box) * view.direction, view.direction)


def ray_box_intervals(origins, directions, box: Aabb):
    """Vectorised slab test.

    Returns ``(t_near, t_far, hit)`` arrays over the leading shape of
    ``origins``. ``directions`` broadcasts against ``origins``.
    """
    o = np.asarray(origins, dtype=float)
    d = np.broadcast_to(np.asarray(directions, dtype=float), o.shape)
    lo = np.asarray(box.min)
    hi = np.asarray(box.max)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    parallel = d == 0.0
    inside = (o >= lo) & (o <= hi)
    # parallel axes: unconstrained if inside the slab, otherwise a miss
    t_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    t_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = np.max(t_lo, axis=-1)
    t_far = np.min(t_hi, axis=-1)
    hit = t_near <= t_far
    return t_near, t_far, hit


def ray_aabb_intersect(ray: Ray, box: Aabb):
    t_near, t_far, hit = ray_box_intervals(ray.origin, ray.direction, box)
    if not hit:
        return None
    return float(t_near), float(t_far)
