"""Synthetic phantoms: void ellipsoids inside an aluminium cylinder.

Shapes are described in continuous voxel-index coordinates ``(ix, iy, iz)``
of the phantom grid; voxel ``(0, 0, 0)``'s centre is at index ``(0, 0, 0)``.

Randomness comes from numpy's counter-based Philox generator. A phantom made
with seed ``s`` draws from Philox key ``s + (0 << 64)``; object ``k`` of a
dataset with master seed ``s`` draws from key ``s + ((k + 1) << 64)``, i.e. the
seed fills the low 64 bits and the stream number the high 64 bits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np
from scipy import constants as _const

from .geometry import GridSpec, Ray

_MASK64 = (1 << 64) - 1
# h*c in keV*m (CODATA 2018, exact SI definitions)
HC_KEV_M = _const.h * _const.c / (_const.e * 1e3)


def wavenumber(energy_kev: float) -> float:
    """Vacuum wavenumber ``k = 2*pi*E/(h*c)`` in 1/m."""
    if not energy_kev > 0:
        raise ValueError(f"photon energy must be positive, got {energy_kev}")
    return 2.0 * math.pi * energy_kev / HC_KEV_M


def rng_for(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=(int(seed) & _MASK64) | (int(stream) << 64)))


@dataclass(frozen=True)
class Material:
    delta: float
    beta: float
    energy: float = 18.0

    def __post_init__(self):
        if self.delta < 0 or self.beta < 0:
            raise ValueError("delta and beta must be non-negative")


ALUMINIUM_18KEV = Material(delta=1.6741e-7, beta=6.4088e-9, energy=18.0)


@dataclass(frozen=True)
class EllipsoidSpec:
    center: tuple
    semi_axes: tuple

    def __post_init__(self):
        if len(self.center) != 3 or len(self.semi_axes) != 3:
            raise ValueError("ellipsoid centre and semi-axes must be triples")
        if min(self.semi_axes) <= 0:
            raise ValueError("semi-axes must be positive")


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder, in voxel-index coordinates."""

    center_xy: tuple
    radius: float
    z_min: float
    z_max: float


@dataclass
class RefractiveVolume:
    grid: GridSpec
    delta: np.ndarray
    beta: np.ndarray
    energy: float = 18.0

    def __post_init__(self):
        self.delta = np.asarray(self.delta)
        self.beta = np.asarray(self.beta)
        for name in ("delta", "beta"):
            arr = getattr(self, name)
            if arr.shape != self.grid.shape:
                raise ValueError(f"{name} has shape {arr.shape}, grid expects {self.grid.shape}")

    def check(self):
        for name in ("delta", "beta"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            if np.any(arr < 0):
                raise ValueError(f"{name} contains negative values")
        return self

    @classmethod
    def zeros(cls, grid: GridSpec, energy: float = 18.0) -> "RefractiveVolume":
        return cls(grid, np.zeros(grid.shape), np.zeros(grid.shape), energy)


@dataclass(frozen=True)
class PhantomSpec:
    grid: GridSpec = field(default_factory=lambda: GridSpec.centered((64, 64, 64), 3.2e-6))
    cylinder_radius: float = 12.5
    cylinder_height: float = 64.0
    ellipsoid_count_range: tuple = (5, 10)
    semi_axis_range: tuple = (5.0, 20.0)
    material: Material = ALUMINIUM_18KEV
    seed: int = 0

    @classmethod
    def paper_scale(cls, seed: int = 0) -> "PhantomSpec":
        """256^3 grid, 100-voxel cylinder diameter, semi-axes 20 to 80 voxels."""
        return cls(grid=GridSpec.centered((256, 256, 256), 3.2e-6), cylinder_radius=50.0,
                   cylinder_height=256.0, semi_axis_range=(20.0, 80.0), seed=seed)

    @classmethod
    def scaled(cls, n: int, cylinder_radius: float, seed: int = 0, **kw) -> "PhantomSpec":
        """Cubic ``n^3`` grid; semi-axes keep the paper's 0.4-1.6 ratio to the radius."""
        kw.setdefault("semi_axis_range", (0.4 * cylinder_radius, 1.6 * cylinder_radius))
        return cls(grid=GridSpec.centered((n, n, n), 3.2e-6), cylinder_radius=cylinder_radius,
                   cylinder_height=float(n), seed=seed, **kw)

    def cylinder(self) -> Cylinder:
        nx, ny, nz = self.grid.dims
        zc = (nz - 1) / 2.0
        return Cylinder(((nx - 1) / 2.0, (ny - 1) / 2.0), float(self.cylinder_radius),
                        zc - self.cylinder_height / 2.0, zc + self.cylinder_height / 2.0)

    def validate(self):
        nx, ny, nz = self.grid.dims
        lo, hi = self.ellipsoid_count_range
        if not (0 <= lo <= hi):
            raise ValueError(f"bad ellipsoid_count_range {self.ellipsoid_count_range}")
        a, b = self.semi_axis_range
        if not (0 < a <= b):
            raise ValueError(f"bad semi_axis_range {self.semi_axis_range}")
        if self.cylinder_radius <= 0 or self.cylinder_height <= 0:
            raise ValueError("cylinder radius and height must be positive")
        if 2 * self.cylinder_radius > min(nx, ny) or self.cylinder_height > nz:
            raise ValueError(
                f"cylinder (diameter {2 * self.cylinder_radius}, height {self.cylinder_height}) "
                f"exceeds grid {self.grid.dims}")
        return self


def _draw_ellipsoids(spec: PhantomSpec, rng: np.random.Generator) -> list:
    cyl = spec.cylinder()
    lo, hi = spec.ellipsoid_count_range
    n = int(rng.integers(lo, hi + 1))
    out = []
    for _ in range(n):
        r = cyl.radius * math.sqrt(rng.random())
        phi = 2.0 * math.pi * rng.random()
        z = cyl.z_min + (cyl.z_max - cyl.z_min) * rng.random()
        center = (cyl.center_xy[0] + r * math.cos(phi), cyl.center_xy[1] + r * math.sin(phi), z)
        axes = tuple(float(a) for a in rng.uniform(*spec.semi_axis_range, size=3))
        out.append(EllipsoidSpec(center, axes))
    return out


def material_mask(grid: GridSpec, cylinder: Cylinder, ellipsoids: Sequence[EllipsoidSpec]) -> np.ndarray:
    """Boolean ``(nz, ny, nx)`` mask: inside the cylinder and outside every void."""
    nx, ny, nz = grid.dims
    z = np.arange(nz, dtype=float)[:, None, None]
    y = np.arange(ny, dtype=float)[None, :, None]
    x = np.arange(nx, dtype=float)[None, None, :]
    cx, cy = cylinder.center_xy
    inside = ((x - cx) ** 2 + (y - cy) ** 2 <= cylinder.radius ** 2) \
        & (z >= cylinder.z_min) & (z <= cylinder.z_max)
    for e in ellipsoids:
        (ex, ey, ez), (a, b, c) = e.center, e.semi_axes
        void = ((x - ex) / a) ** 2 + ((y - ey) / b) ** 2 + ((z - ez) / c) ** 2 <= 1.0
        inside &= ~void
    return inside


def _build(spec: PhantomSpec, rng: np.random.Generator):
    spec.validate()
    ellipsoids = _draw_ellipsoids(spec, rng)
    mask = material_mask(spec.grid, spec.cylinder(), ellipsoids)
    m = spec.material
    vol = RefractiveVolume(spec.grid, np.where(mask, m.delta, 0.0), np.where(mask, m.beta, 0.0),
                           energy=m.energy)
    return vol, ellipsoids


def generate_phantom(spec: PhantomSpec):
    """Voxelised phantom plus the ellipsoid list that produced it."""
    return _build(spec, rng_for(spec.seed, 0))


def generate_dataset(n_objects: int, template: PhantomSpec, seed: int) -> Iterator:
    """Stream ``n_objects`` phantoms; object ``k`` uses Philox stream ``k + 1``."""
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    for k in range(n_objects):
        yield _build(replace(template, seed=seed), rng_for(seed, k + 1))


# ---------------------------------------------------------------------------
# exact line integrals


def _quadratic_interval(a, b, c):
    """Interval where ``a t^2 + b t + c <= 0`` (``a > 0``); NaN bounds for none."""
    disc = b * b - 4.0 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    # numerically stable roots
    q = -0.5 * (b + np.copysign(sq, b))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = q / a
        r2 = np.where(q != 0, c / q, r1)
    lo = np.where(ok, np.minimum(r1, r2), np.nan)
    hi = np.where(ok, np.maximum(r1, r2), np.nan)
    return lo, hi


def _cylinder_interval(o, d, cyl: Cylinder):
    ox = o[:, 0] - cyl.center_xy[0]
    oy = o[:, 1] - cyl.center_xy[1]
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2.0 * (ox * d[:, 0] + oy * d[:, 1])
    c = ox ** 2 + oy ** 2 - cyl.radius ** 2
    vertical = a < 1e-300
    lo, hi = _quadratic_interval(np.where(vertical, 1.0, a), b, c)
    lo = np.where(vertical, np.where(c <= 0, -np.inf, np.nan), lo)
    hi = np.where(vertical, np.where(c <= 0, np.inf, np.nan), hi)
    # z slab
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (cyl.z_min - o[:, 2]) / d[:, 2]
        t2 = (cyl.z_max - o[:, 2]) / d[:, 2]
    flat = d[:, 2] == 0
    inside_z = (o[:, 2] >= cyl.z_min) & (o[:, 2] <= cyl.z_max)
    zlo = np.where(flat, np.where(inside_z, -np.inf, np.nan), np.minimum(t1, t2))
    zhi = np.where(flat, np.where(inside_z, np.inf, np.nan), np.maximum(t1, t2))
    lo = np.maximum(lo, zlo)
    hi = np.minimum(hi, zhi)
    return lo, hi


def chord_lengths(ellipsoids, cylinder: Cylinder, origins, directions) -> np.ndarray:
    """Length (voxel units) of material along each ray, in index coordinates.

    Cylinder chord minus the union of the void intervals clipped to it.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=float))
    d = np.broadcast_to(np.asarray(directions, dtype=float), o.shape)
    c_lo, c_hi = _cylinder_interval(o, d, cylinder)
    has = np.isfinite(c_lo) & np.isfinite(c_hi) & (c_hi > c_lo)
    c_lo = np.where(has, c_lo, 0.0)
    c_hi = np.where(has, c_hi, 0.0)
    if not ellipsoids:
        return c_hi - c_lo
    starts, ends = [], []
    for e in ellipsoids:
        s = np.asarray(e.semi_axes, dtype=float)
        oc = (o - np.asarray(e.center)) / s
        ds = d / s
        a = np.sum(ds * ds, axis=1)
        b = 2.0 * np.sum(oc * ds, axis=1)
        c = np.sum(oc * oc, axis=1) - 1.0
        lo, hi = _quadratic_interval(a, b, c)
        lo = np.clip(lo, c_lo, c_hi)
        hi = np.clip(hi, c_lo, c_hi)
        empty = ~(hi > lo)
        starts.append(np.where(empty, c_lo, lo))
        ends.append(np.where(empty, c_lo, hi))
    starts = np.stack(starts, axis=1)
    ends = np.stack(ends, axis=1)
    order = np.argsort(starts, axis=1, kind="stable")
    starts = np.take_along_axis(starts, order, axis=1)
    ends = np.take_along_axis(ends, order, axis=1)
    covered = np.zeros(len(o))
    reach = np.full(len(o), -np.inf)
    for k in range(starts.shape[1]):
        covered += np.maximum(0.0, ends[:, k] - np.maximum(starts[:, k], reach))
        reach = np.maximum(reach, ends[:, k])
    return (c_hi - c_lo) - covered


def analytic_line_integrals_batch(ellipsoids, cylinder: Cylinder, material: Material,
                                  grid: GridSpec, origins, directions):
    """Exact ``(int delta dz, int beta dz)`` in meters for world-space rays."""
    o = grid.world_to_index(np.atleast_2d(origins))
    d = np.asarray(directions, dtype=float)
    length = chord_lengths(ellipsoids, cylinder, o, d) * grid.voxel_size
    return material.delta * length, material.beta * length


def analytic_line_integrals(ellipsoids, cylinder: Cylinder, material: Material, ray: Ray,
                            grid: GridSpec):
    di, bi = analytic_line_integrals_batch(ellipsoids, cylinder, material, grid,
                                           ray.origin[None], ray.direction)
    return float(di[0]), float(bi[0])
