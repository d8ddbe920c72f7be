"""SART baseline.

The system matrix is never stored: rows are the ray-marching weights of
:mod:`xrfield.projector`, and the back projection is their exact adjoint.
Each view update is

    x += relax * B(r / row_len) / col_sum,   r = b - A x

where ``row_len = A 1`` (ray length through the grid) and ``col_sum = B 1``
(total weight a voxel receives from this view's rays).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import GridSpec
from .phantom import RefractiveVolume, wavenumber
from .projector import ProjectionStack, backproject, line_integrals, march_plan

_EPS = 1e-12


@dataclass(frozen=True)
class SartConfig:
    grid: GridSpec = field(default_factory=lambda: GridSpec.centered((64, 64, 64), 3.2e-6))
    iterations: int = 50
    relaxation_factor: float = 0.5
    angle_order: str = "sequential"
    shuffle_seed: int = 0
    n_depth: Optional[int] = None
    clamp_nonnegative: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 < self.relaxation_factor < 2.0:
            raise ValueError("relaxation_factor must lie in (0, 2)")
        if self.angle_order not in ("sequential", "shuffled"):
            raise ValueError(f"angle_order must be 'sequential' or 'shuffled', got {self.angle_order!r}")

    @property
    def depth_samples(self) -> int:
        return self.n_depth or 2 * max(self.grid.dims)


class _ViewOperator:
    def __init__(self, view, grid, n_depth, backend):
        self.view, self.grid, self.backend = view, grid, backend
        self.plan = march_plan(view, grid, n_depth)
        ones = np.ones(grid.shape)
        self.row = self.forward(ones)
        hit = (self.row > _EPS).astype(float)
        self.col = self.back(hit)
        self.row_ok = self.row > _EPS
        self.col_ok = self.col > _EPS

    def forward(self, x):
        return line_integrals(x, self.view, self.grid, plan=self.plan, backend=self.backend)

    def back(self, img):
        return backproject(img, self.view, self.grid, plan=self.plan, backend=self.backend)


def _order(n_views, cfg: SartConfig, epoch: int):
    if cfg.angle_order == "sequential":
        return range(n_views)
    rng = np.random.default_rng([cfg.shuffle_seed, epoch])
    return rng.permutation(n_views)


def reprojection_residual(x, operators, measured) -> float:
    """``||A x - b|| / ||b||`` over all views."""
    num = sum(np.sum((op.forward(x) - b) ** 2) for op, b in zip(operators, measured))
    den = sum(np.sum(b ** 2) for b in measured)
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))


def sart_reconstruct(stack: ProjectionStack, channel: str, cfg: SartConfig, backend=None,
                     history: Optional[list] = None) -> np.ndarray:
    """Line-density field (``k*beta`` or ``k*delta`` per meter) on ``cfg.grid``.

    When ``history`` is a list, the reprojection residual after each epoch is
    appended to it.
    """
    if len(stack) == 0:
        raise ValueError("empty projection stack")
    if channel not in stack.channels:
        raise ValueError(f"channel {channel!r} absent from stack (has {stack.channels})")
    grid = cfg.grid
    operators = [_ViewOperator(v, grid, cfg.depth_samples, backend) for v in stack.views]
    measured = [np.asarray(im.channel(channel), dtype=float) for im in stack.images]
    x = np.zeros(grid.shape)
    relax = cfg.relaxation_factor
    for epoch in range(cfg.iterations):
        for i in _order(len(operators), cfg, epoch):
            op, b = operators[i], measured[i]
            resid = np.where(op.row_ok, (b - op.forward(x)) / np.where(op.row_ok, op.row, 1.0), 0.0)
            upd = op.back(resid)
            x += relax * np.where(op.col_ok, upd / np.where(op.col_ok, op.col, 1.0), 0.0)
            if cfg.clamp_nonnegative:
                np.maximum(x, 0.0, out=x)
        if history is not None:
            history.append(reprojection_residual(x, operators, measured))
    return x


def sart_reconstruct_stack(stack: ProjectionStack, cfg: SartConfig, backend=None) -> RefractiveVolume:
    """Reconstruct every channel present; absent channels are zero-filled."""
    k = wavenumber(stack.energy)
    out = RefractiveVolume.zeros(cfg.grid, stack.energy)
    if "attenuation" in stack.channels:
        out.beta = sart_reconstruct(stack, "attenuation", cfg, backend) / k
    if "phase" in stack.channels:
        out.delta = sart_reconstruct(stack, "phase", cfg, backend) / k
    return out
