"""Forward model under the projection approximation.

Contrast images store positive line integrals: ``attenuation = k * int beta dz``
and ``phase = k * int delta dz``. The complex log-ratio of exit to incident
wave is then ``c_hat = -attenuation - 1j * phase``.

Volume projections march ``n_depth`` uniformly spaced samples (midpoint rule)
across the grid's bounding box and read the volume by trilinear interpolation
with zero padding.
"""
from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .geometry import GridSpec, ViewGeometry, pixel_origins, ray_box_intervals
from .phantom import RefractiveVolume, wavenumber

CHANNELS = ("attenuation", "phase")


@dataclass
class ContrastImage:
    attenuation: np.ndarray
    phase: Optional[np.ndarray]
    view: ViewGeometry

    def __post_init__(self):
        self.attenuation = np.asarray(self.attenuation)
        if self.attenuation.shape != self.view.detector_dims:
            raise ValueError(f"attenuation shape {self.attenuation.shape} != detector "
                             f"{self.view.detector_dims}")
        if self.phase is not None:
            self.phase = np.asarray(self.phase)
            if self.phase.shape != self.attenuation.shape:
                raise ValueError("phase and attenuation shapes differ")

    def channel(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        if arr is None:
            raise KeyError(f"channel {name!r} not present")
        return arr

    @property
    def complex_log(self) -> np.ndarray:
        phase = self.phase if self.phase is not None else 0.0
        return -self.attenuation - 1j * phase


@dataclass
class ProjectionStack:
    images: list
    energy: float
    channels: tuple = CHANNELS

    def __post_init__(self):
        if not self.images:
            raise ValueError("projection stack is empty")
        self.channels = tuple(self.channels)
        if not self.channels or any(c not in CHANNELS for c in self.channels):
            raise ValueError(f"channels must be a non-empty subset of {CHANNELS}, got {self.channels}")
        first = self.images[0].view
        angles = [im.view.angle for im in self.images]
        if any(b <= a for a, b in zip(angles, angles[1:])):
            raise ValueError(f"view angles must be strictly increasing, got {angles}")
        for im in self.images:
            v = im.view
            if v.detector_dims != first.detector_dims or v.pixel_size != first.pixel_size:
                raise ValueError("all views must share detector dims and pixel size")
            for c in self.channels:
                im.channel(c)

    def __len__(self):
        return len(self.images)

    @property
    def views(self) -> list:
        return [im.view for im in self.images]

    @property
    def angles(self) -> np.ndarray:
        return np.array([im.view.angle for im in self.images])

    def array(self, channel: str) -> np.ndarray:
        """``(K, H, W)`` array of one channel."""
        return np.stack([im.channel(channel) for im in self.images])

    def scaled(self, c: float) -> "ProjectionStack":
        imgs = [ContrastImage(c * im.attenuation,
                              None if im.phase is None else c * im.phase, im.view)
                for im in self.images]
        return ProjectionStack(imgs, self.energy, self.channels)

    def subset(self, indices: Sequence[int]) -> "ProjectionStack":
        return ProjectionStack([self.images[i] for i in sorted(indices)], self.energy,
                               self.channels)


@dataclass(frozen=True)
class MarchPlan:
    """Per-ray sampling of one view across one grid, in voxel-index coordinates."""

    start: np.ndarray
    step: np.ndarray
    weight: np.ndarray
    n: int
    shape: tuple = field(default=())


def march_plan(view: ViewGeometry, grid: GridSpec, n_depth: int) -> MarchPlan:
    if n_depth < 2:
        raise ValueError(f"n_depth must be >= 2, got {n_depth}")
    view.check()
    # march the whole interpolation support so a voxel's trilinear footprint integrates
    # to exactly one voxel length along axis-aligned rays
    box = grid.support()
    origins = pixel_origins(view, box).reshape(-1, 3)
    d = view.direction
    t_near, t_far, hit = ray_box_intervals(origins, d, box)
    t_near = np.where(hit, t_near, 0.0)
    dt = np.where(hit, (t_far - t_near) / n_depth, 0.0)
    first = origins + (t_near + 0.5 * dt)[:, None] * d
    start = grid.world_to_index(first)
    step = (dt[:, None] * d) / grid.voxel_size
    return MarchPlan(start, step, dt, int(n_depth), view.detector_dims)


def line_integrals(field_zyx: np.ndarray, view: ViewGeometry, grid: GridSpec, n_depth: int = 256,
                   backend=None, plan: Optional[MarchPlan] = None) -> np.ndarray:
    """``int field dt`` (meters x field units) for every pixel of ``view``."""
    plan = plan or march_plan(view, grid, n_depth)
    out = kernels.march_forward(field_zyx, plan.start, plan.step, plan.weight, plan.n, backend)
    return out.reshape(plan.shape)


def backproject(values: np.ndarray, view: ViewGeometry, grid: GridSpec, n_depth: int = 256,
                backend=None, plan: Optional[MarchPlan] = None) -> np.ndarray:
    """Adjoint of :func:`line_integrals`."""
    plan = plan or march_plan(view, grid, n_depth)
    return kernels.march_back(grid.shape, plan.start, plan.step, plan.weight,
                              np.asarray(values, dtype=float).ravel(), plan.n, backend)


def forward_project_volume(vol: RefractiveVolume, view: ViewGeometry, n_depth: int = 256,
                           backend=None) -> ContrastImage:
    for name in ("delta", "beta"):
        if not np.all(np.isfinite(getattr(vol, name))):
            raise ValueError(f"volume {name} is not finite")
    k = wavenumber(vol.energy)
    plan = march_plan(view, vol.grid, n_depth)
    att = k * line_integrals(vol.beta, view, vol.grid, plan=plan, backend=backend)
    phase = k * line_integrals(vol.delta, view, vol.grid, plan=plan, backend=backend)
    return ContrastImage(att, phase, view)


def equally_spaced(n: int, start_deg: float, stop_deg: float) -> np.ndarray:
    """``n`` angles in radians, inclusive of both endpoints."""
    if n < 1:
        raise ValueError("need at least one angle")
    if n == 1:
        return np.array([math.radians(start_deg)])
    return np.radians(np.linspace(start_deg, stop_deg, n))


_ANGLE_SPEC = re.compile(r"^\s*(\d+)\s*x\s*([-+]?[\d.]+)\s*:\s*([-+]?[\d.]+)\s*$")


def parse_angle_spec(text: str) -> np.ndarray:
    """``"8x0:140"`` -> 8 angles from 0 to 140 degrees inclusive, in radians."""
    m = _ANGLE_SPEC.match(text)
    if not m:
        raise ValueError(f"angle spec must look like 'Nxstart:stop', got {text!r}")
    return equally_spaced(int(m.group(1)), float(m.group(2)), float(m.group(3)))


def project_dataset(vol: RefractiveVolume, angles, n_depth: int = 256, detector=None,
                    pixel_size: Optional[float] = None, noise_sigma: float = 0.0,
                    rng: Optional[np.random.Generator] = None, workers: int = 1,
                    backend=None) -> ProjectionStack:
    """One two-channel contrast image per angle.

    The detector defaults to ``(nz, nx)`` pixels of the voxel size. Optional
    additive Gaussian noise of standard deviation ``noise_sigma`` is applied to
    both channels.
    """
    angles = [float(a) for a in np.atleast_1d(angles)]
    if not angles:
        raise ValueError("angles must be non-empty")
    nx, _, nz = vol.grid.dims
    detector = tuple(detector) if detector is not None else (nz, nx)
    pixel_size = vol.grid.voxel_size if pixel_size is None else pixel_size
    views = [ViewGeometry(a, detector, pixel_size, i) for i, a in enumerate(angles)]

    def one(view):
        return forward_project_volume(vol, view, n_depth, backend)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            images = list(pool.map(one, views))
    else:
        images = [one(v) for v in views]
    if noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        for im in images:
            im.attenuation = im.attenuation + rng.normal(0.0, noise_sigma, im.attenuation.shape)
            im.phase = im.phase + rng.normal(0.0, noise_sigma, im.phase.shape)
    return ProjectionStack(images, vol.energy, CHANNELS)


def intensity_to_contrast(intensity, flat) -> np.ndarray:
    """Attenuation contrast ``-ln(I / I0)`` from raw and flat-field intensities."""
    intensity = np.asarray(intensity, dtype=float)
    flat = np.asarray(flat, dtype=float)
    if np.any(intensity <= 0) or np.any(flat <= 0):
        raise ValueError("intensities must be strictly positive")
    return -np.log(intensity / flat)


def stack_from_intensities(intensities, flat, angles, pixel_size: float,
                           energy: float) -> ProjectionStack:
    """Converter for measured radiographs: attenuation-only contrast stack."""
    intensities = np.asarray(intensities, dtype=float)
    if intensities.ndim != 3 or len(intensities) != len(angles):
        raise ValueError("expected a (K, H, W) intensity array with one angle per image")
    dims = intensities.shape[1:]
    images = [ContrastImage(intensity_to_contrast(img, flat), None,
                            ViewGeometry(a, dims, pixel_size, i))
              for i, (img, a) in enumerate(zip(intensities, angles))]
    return ProjectionStack(images, energy, ("attenuation",))
