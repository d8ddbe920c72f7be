"""Volume comparison: ring mask, relative L2, slice-wise DSSIM, combination study.

Both metrics are computed per refractive-index channel and averaged over the
channels present in the reference (a channel is present when the masked
reference is not identically zero).

DSSIM is ``(1 - SSIM) / 2`` with SSIM evaluated on every axial (``z``) slice
using a 7x7 Gaussian window of standard deviation 1.5 and constants
``C1 = (0.01 L)^2``, ``C2 = (0.03 L)^2``, where ``L`` is the dynamic range of
the masked reference. The SSIM map is averaged over in-mask pixels of each
slice, then over slices.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage, stats

from .geometry import GridSpec
from .phantom import RefractiveVolume

VOLUME_CHANNELS = ("delta", "beta")
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 2.0  # radius int(2.0 * 1.5 + 0.5) = 3 -> 7x7 window
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class RingMask:
    """Cylindrical region about the grid's central z axis; radii in voxels.

    ``outer=None`` means "use the default", which callers resolve to the
    phantom cylinder radius. ``inner == outer`` gives an empty mask.
    """

    inner: float = 0.0
    outer: Optional[float] = None

    def __post_init__(self):
        if self.inner < 0:
            raise ValueError("inner radius must be >= 0")
        if self.outer is not None and self.outer < self.inner:
            raise ValueError(f"outer radius {self.outer} is below inner radius {self.inner}")

    def array(self, grid: GridSpec) -> np.ndarray:
        if self.outer is None:
            raise ValueError("ring mask has no outer radius")
        nx, ny, nz = grid.dims
        y, x = np.mgrid[0:ny, 0:nx]
        r = np.hypot(x - (nx - 1) / 2.0, y - (ny - 1) / 2.0)
        disk = (r >= self.inner) & (r < self.outer) if self.inner > 0 else r < self.outer
        return np.broadcast_to(disk, grid.shape)


MaskLike = Union[RingMask, np.ndarray, None]


def mask_array(mask: MaskLike, grid: GridSpec) -> np.ndarray:
    if mask is None:
        return np.ones(grid.shape, dtype=bool)
    if isinstance(mask, RingMask):
        return mask.array(grid)
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 2:
        m = np.broadcast_to(m, grid.shape)
    if m.shape != grid.shape:
        raise ValueError(f"mask shape {m.shape} does not match grid {grid.shape}")
    return m


def apply_mask(vol: RefractiveVolume, mask: MaskLike) -> RefractiveVolume:
    m = mask_array(mask, vol.grid)
    return RefractiveVolume(vol.grid, np.where(m, vol.delta, 0.0), np.where(m, vol.beta, 0.0),
                            vol.energy)


def _same_grid(a: RefractiveVolume, b: RefractiveVolume):
    if a.grid.dims != b.grid.dims:
        raise ValueError(f"grid mismatch: {a.grid.dims} vs {b.grid.dims}")


def present_channels(ref: RefractiveVolume, mask: MaskLike = None) -> tuple:
    m = mask_array(mask, ref.grid)
    return tuple(c for c in VOLUME_CHANNELS if np.any(getattr(ref, c)[m] != 0))


def _channels(ref, mask, channels):
    chans = tuple(channels) if channels is not None else present_channels(ref, mask)
    if not chans:
        raise ValueError("reference is zero everywhere inside the mask")
    return chans


def l2_channel(cand: np.ndarray, ref: np.ndarray, m: np.ndarray) -> float:
    den = np.linalg.norm(ref[m])
    if den == 0:
        raise ValueError("reference channel is zero inside the mask")
    return float(np.linalg.norm(cand[m] - ref[m]) / den)


def l2_metric(cand: RefractiveVolume, ref: RefractiveVolume, mask: MaskLike = None,
              channels: Optional[Sequence[str]] = None) -> float:
    """Relative L2 error over masked voxels, averaged over channels."""
    _same_grid(cand, ref)
    m = mask_array(mask, ref.grid)
    chans = _channels(ref, mask, channels)
    return float(np.mean([l2_channel(getattr(cand, c), getattr(ref, c), m) for c in chans]))


def _gauss(img: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(img, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")


def ssim_slice(x: np.ndarray, y: np.ndarray, data_range: float) -> np.ndarray:
    """SSIM map of two 2D images (``y`` is the reference)."""
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _gauss(x), _gauss(y)
    sxx = _gauss(x * x) - mx * mx
    syy = _gauss(y * y) - my * my
    sxy = _gauss(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim_channel(cand: np.ndarray, ref: np.ndarray, m: np.ndarray) -> float:
    if not m.any():
        raise ValueError("mask is empty")
    L = float(ref[m].max() - ref[m].min())
    if not L > 0:
        raise ValueError("reference has zero dynamic range inside the mask")
    cand = np.where(m, cand, 0.0)
    ref = np.where(m, ref, 0.0)
    values = []
    for z in range(ref.shape[0]):
        mz = m[z]
        if mz.any():
            values.append(ssim_slice(cand[z], ref[z], L)[mz].mean())
    return float(np.mean(values))


def dssim_channel(cand, ref, m) -> float:
    return float(np.clip((1.0 - ssim_channel(cand, ref, m)) / 2.0, 0.0, 1.0))


def dssim_metric(cand: RefractiveVolume, ref: RefractiveVolume, mask: MaskLike = None,
                 channels: Optional[Sequence[str]] = None) -> float:
    _same_grid(cand, ref)
    m = mask_array(mask, ref.grid)
    chans = _channels(ref, mask, channels)
    return float(np.mean([dssim_channel(getattr(cand, c), getattr(ref, c), m) for c in chans]))


@dataclass
class MetricReport:
    l2: float
    dssim: float
    per_channel: dict = field(default_factory=dict)
    channel_rule: str = "mean over channels present in the masked reference"

    def to_dict(self) -> dict:
        return {"l2": self.l2, "dssim": self.dssim, "per_channel": self.per_channel,
                "channel_rule": self.channel_rule}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(cand: RefractiveVolume, ref: RefractiveVolume, mask: MaskLike = None,
             channels: Optional[Sequence[str]] = None) -> MetricReport:
    _same_grid(cand, ref)
    m = mask_array(mask, ref.grid)
    chans = _channels(ref, mask, channels)
    per = {}
    for c in chans:
        a, b = getattr(cand, c), getattr(ref, c)
        per[c] = {"l2": l2_channel(a, b, m), "dssim": dssim_channel(a, b, m)}
    return MetricReport(float(np.mean([per[c]["l2"] for c in chans])),
                        float(np.mean([per[c]["dssim"] for c in chans])), per)


@dataclass
class OrthoProjections:
    top: dict    # summed over z, (ny, nx) per channel
    front: dict  # summed over y, (nz, nx)
    left: dict   # summed over x, (nz, ny)


def ortho_projections(vol: RefractiveVolume) -> OrthoProjections:
    out = {}
    for name, axis in (("top", 0), ("front", 1), ("left", 2)):
        out[name] = {c: getattr(vol, c).sum(axis=axis) for c in VOLUME_CHANNELS}
    return OrthoProjections(**out)


# --------------------------------------------------------------------------- combination study


def min_angular_gap(angles: Sequence[float]) -> float:
    """Smallest separation between any two view directions, in radians.

    Directions ``a`` and ``a + pi`` are the same parallel-beam line set, so
    separations are taken modulo ``pi``.
    """
    a = np.sort(np.mod(np.asarray(angles, dtype=float), math.pi))
    if len(a) < 2:
        return math.pi
    gaps = np.diff(np.append(a, a[0] + math.pi))
    return float(gaps.min())


def _summary(values) -> dict:
    v = np.asarray(values, dtype=float)
    return {"mean": float(v.mean()), "std": float(v.std()), "min": float(v.min()),
            "max": float(v.max())}


@dataclass
class CombinationStudy:
    k: int
    entries: list  # (subset tuple, MetricReport), sorted by DSSIM
    summary: dict
    spacing: dict

    def __len__(self):
        return len(self.entries)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["subset", "l2", "dssim"])
            for subset, rep in self.entries:
                w.writerow([" ".join(str(i) for i in subset), repr(rep.l2), repr(rep.dssim)])

    def write_summary_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "mean", "std", "min", "max"])
            for metric, s in self.summary.items():
                w.writerow([metric, repr(s["mean"]), repr(s["std"]), repr(s["min"]), repr(s["max"])])


def spacing_statistic(entries, angles) -> dict:
    """Does wider angular spacing go with lower DSSIM?

    Reports the Spearman correlation between a subset's smallest angular gap
    and its DSSIM (negative favours wide spacing) and the mean DSSIM of the
    widest and narrowest halves. Reported only; never asserted.
    """
    gaps = np.array([min_angular_gap([angles[i] for i in s]) for s, _ in entries])
    d = np.array([r.dssim for _, r in entries])
    out = {"spearman_gap_vs_dssim": None, "mean_dssim_wide": None, "mean_dssim_narrow": None}
    if len(entries) >= 2 and np.ptp(gaps) > 0 and np.ptp(d) > 0:
        out["spearman_gap_vs_dssim"] = float(stats.spearmanr(gaps, d)[0])
        med = np.median(gaps)
        wide, narrow = d[gaps > med], d[gaps <= med]
        if len(wide) and len(narrow):
            out["mean_dssim_wide"] = float(wide.mean())
            out["mean_dssim_narrow"] = float(narrow.mean())
    return out


MAX_COMBINATIONS = 500


def combination_study(model, stack, k: int, reference: RefractiveVolume, mask: MaskLike = None,
                      grid: Optional[GridSpec] = None, workers: int = 1,
                      channels: Optional[Sequence[str]] = None) -> CombinationStudy:
    """Infer and score every ``k``-subset of the stack's views as constraints."""
    from .trainer import infer

    K = len(stack)
    if not 1 <= k < K:
        raise ValueError(f"need 1 <= k < {K}, got k={k}")
    n = math.comb(K, k)
    if n > MAX_COMBINATIONS:
        raise ValueError(f"C({K},{k}) = {n} combinations exceeds the limit of {MAX_COMBINATIONS}")
    grid = grid or reference.grid
    subsets = list(itertools.combinations(range(K), k))

    def one(subset):
        return subset, evaluate(infer(model, stack, subset, grid), reference, mask, channels)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            entries = list(pool.map(one, subsets))
    else:
        entries = [one(s) for s in subsets]
    entries.sort(key=lambda e: (e[1].dssim, e[0]))
    summary = {"l2": _summary([r.l2 for _, r in entries]),
               "dssim": _summary([r.dssim for _, r in entries])}
    return CombinationStudy(k, entries, summary, spacing_statistic(entries, stack.angles))
