"""Self-supervised training of the field model from projection stacks.

Each iteration draws a mini-batch of objects. For every object a random
subset of its views is encoded as constraints, rays are drawn from all of its
views with probability following the image gradient magnitude, and the
rendered contrast along each ray is compared with the measured pixel. Views
outside the constraint set therefore supervise the field too, which is what
ties the reconstruction to a consistent 3D object.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import nnkit as nn
from .field import FieldModel, build_constraints, render_rays, render_volume
from .geometry import GridSpec, ray_box_intervals, standoff_distance, view_to_world
from .phantom import RefractiveVolume
from .projector import ProjectionStack

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    rays_per_iter: int = 1024
    depth_samples: int = 256
    batch_objects: int = 2
    constraint_count: int = 4
    lr: float = 0.005
    lr_drop_factor: float = 0.1
    lr_drop_epoch: Optional[int] = 1000  # None disables the drop
    epochs: int = 500
    seed: int = 0
    pdf_floor: float = 1e-3
    checkpoint_every: int = 50
    max_iterations: Optional[int] = None
    workers: int = 1

    def __post_init__(self):
        for name in ("rays_per_iter", "batch_objects", "constraint_count", "epochs",
                     "checkpoint_every", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.depth_samples < 2:
            raise ValueError("depth_samples must be >= 2")
        if not self.lr > 0 or not self.lr_drop_factor > 0:
            raise ValueError("lr and lr_drop_factor must be positive")
        if self.pdf_floor < 0:
            raise ValueError("pdf_floor must be >= 0")
        if self.lr_drop_epoch is not None and self.lr_drop_epoch < 0:
            raise ValueError("lr_drop_epoch must be >= 0")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    @classmethod
    def simulated(cls, **overrides) -> "TrainConfig":
        return replace(cls(), **overrides)

    @classmethod
    def experimental(cls, **overrides) -> "TrainConfig":
        base = cls(rays_per_iter=3096, depth_samples=64, constraint_count=6, epochs=1500)
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


def iterations_per_epoch(n_objects: int, batch_objects: int) -> int:
    if n_objects < 1 or batch_objects < 1:
        raise ValueError("need at least one object and a batch size >= 1")
    return -(-n_objects // batch_objects)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate in force during ``epoch`` (0-based)."""
    if cfg.lr_drop_epoch is not None and epoch >= cfg.lr_drop_epoch:
        return cfg.lr * cfg.lr_drop_factor
    return cfg.lr


# --------------------------------------------------------------------------- sampling


def select_constraints(K: int, M: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random ``M``-subset of ``range(K)``, sorted."""
    if M < 1 or M > K:
        raise ValueError(f"cannot choose {M} constraint views out of {K}")
    return np.sort(rng.choice(K, size=M, replace=False))


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude with replicated borders."""
    p = np.pad(np.asarray(img, dtype=float), 1, mode="edge")
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    return np.hypot(gx, gy)


@dataclass
class RaySampler:
    """Per-image pixel probabilities, ``(K, H*W)``; each row sums to one."""

    tables: np.ndarray
    detector_dims: tuple

    @classmethod
    def from_stack(cls, stack: ProjectionStack, channels: Optional[Sequence[str]] = None,
                   floor: float = 1e-3) -> "RaySampler":
        channels = tuple(channels or stack.channels)
        H, W = stack.images[0].view.detector_dims
        tables = np.empty((len(stack), H * W))
        for k, im in enumerate(stack.images):
            mag = sum(gradient_magnitude(im.channel(c)) for c in channels)
            mass = mag + floor * mag.mean()
            total = mass.sum()
            tables[k] = (mass / total).ravel() if total > 0 else 1.0 / (H * W)
        return cls(tables, (H, W))

    def sample(self, n: int, rng: np.random.Generator):
        """``(view, row, col)`` index arrays; views are equally likely."""
        if n < 1:
            raise ValueError("need n >= 1 rays")
        K, P = self.tables.shape
        flat = rng.choice(K * P, size=n, p=(self.tables / K).ravel())
        view, pix = np.divmod(flat, P)
        row, col = np.divmod(pix, self.detector_dims[1])
        return view, row, col


@dataclass
class RayBatch:
    view: np.ndarray
    row: np.ndarray
    col: np.ndarray
    measured: np.ndarray  # (R, C)
    channels: tuple

    def __len__(self):
        return len(self.view)

    def __getitem__(self, r):
        return int(self.view[r]), (int(self.row[r]), int(self.col[r])), tuple(self.measured[r])

    def select(self, mask) -> "RayBatch":
        return RayBatch(self.view[mask], self.row[mask], self.col[mask], self.measured[mask],
                        self.channels)


def sample_rays(stack: ProjectionStack, sampler: RaySampler, n: int, rng: np.random.Generator,
                channels: Optional[Sequence[str]] = None) -> RayBatch:
    """``n`` pixels drawn i.i.d. from the sampler, with their measured contrast attached."""
    channels = tuple(channels or stack.channels)
    view, row, col = sampler.sample(n, rng)
    data = np.stack([stack.array(c) for c in channels], axis=-1)  # (K, H, W, C)
    return RayBatch(view, row, col, data[view, row, col], channels)


def ray_geometry(stack: ProjectionStack, rays: RayBatch, grid: GridSpec):
    """Origins and unit directions ``(R, 3)`` of sampled pixel rays."""
    box = grid.aabb()
    origins = np.empty((len(rays), 3))
    dirs = np.empty((len(rays), 3))
    for k in np.unique(rays.view):
        view = stack.images[k].view
        sel = rays.view == k
        on_plane = view_to_world(rays.col[sel] + 0.5, rays.row[sel] + 0.5,
                                 np.zeros(int(sel.sum())), view)
        origins[sel] = on_plane - standoff_distance(view, box) * view.direction
        dirs[sel] = view.direction
    return origins, dirs


@dataclass(frozen=True)
class DepthSamples:
    t: np.ndarray
    t_near: float
    t_far: float

    @property
    def deltas(self) -> np.ndarray:
        """Gaps ``t_{j+1} - t_j``, the last one running to ``t_far``."""
        return np.diff(np.append(self.t, self.t_far))


def stratified_depths(t_near, t_far, n: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform draw per equal sub-interval, for every row; shape ``(R, n)``."""
    t_near = np.atleast_1d(np.asarray(t_near, dtype=float))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=float))
    if n < 2:
        raise ValueError("need at least 2 depth samples")
    if np.any(~(t_far > t_near)):
        raise ValueError("degenerate depth interval (t_far <= t_near)")
    step = (t_far - t_near)[:, None] / n
    u = rng.random((len(t_near), n))
    return t_near[:, None] + (np.arange(n) + u) * step


def sample_depths(t_near: float, t_far: float, n: int, rng: np.random.Generator) -> DepthSamples:
    t = stratified_depths([t_near], [t_far], n, rng)[0]
    return DepthSamples(t, float(t_near), float(t_far))


def loss(predicted, measured) -> float:
    """Mean over rays of the squared contrast error summed over present channels.

    ``None`` or NaN entries in ``measured`` mark absent channels.
    """
    pred = np.atleast_2d(np.asarray(predicted, dtype=float))
    meas = np.atleast_2d(np.array([[np.nan if c is None else c for c in np.atleast_1d(row)]
                                   for row in measured], dtype=float)) if len(measured) else np.zeros((0, 0))
    if len(pred) != len(meas):
        raise ValueError(f"{len(pred)} predictions for {len(meas)} measurements")
    if len(pred) == 0:
        raise ValueError("no rays")
    present = np.isfinite(meas)
    diff = np.where(present, pred - np.where(present, meas, 0.0), 0.0)
    return float(np.sum(diff * diff) / len(pred))


# --------------------------------------------------------------------------- training


@dataclass
class _Draw:
    object_index: int
    constraints: np.ndarray
    rays: RayBatch
    origins: np.ndarray
    directions: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    t: np.ndarray


@dataclass
class TrainHistory:
    iteration: list = field(default_factory=list)
    epoch: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    # rays per iteration drawn from views outside the constraint set (minimum over the batch)
    off_constraint_rays: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    iterations_per_epoch: int = 0

    def as_array(self) -> np.ndarray:
        return np.asarray(self.loss)


def _draw_object(idx: int, stack: ProjectionStack, sampler: RaySampler, cfg: TrainConfig,
                 channels: tuple, grid: GridSpec, rng: np.random.Generator) -> _Draw:
    cons = select_constraints(len(stack), cfg.constraint_count, rng)
    rays = sample_rays(stack, sampler, cfg.rays_per_iter, rng, channels)
    origins, dirs = ray_geometry(stack, rays, grid)
    t_near, t_far, hit = ray_box_intervals(origins, dirs, grid.aabb())
    # grazing rays carry no material and no usable depth interval
    keep = hit & (t_far - t_near > 1e-6 * grid.voxel_size)
    if not np.any(keep):
        raise TrainingError(f"object {idx}: no sampled ray crosses the reconstruction grid")
    t = stratified_depths(t_near[keep], t_far[keep], cfg.depth_samples, rng)
    return _Draw(idx, cons, rays.select(keep), origins[keep], dirs[keep], t_near[keep],
                 t_far[keep], t)


def _shadow(store: nn.ParamStore) -> nn.ParamStore:
    """Store sharing ``store``'s parameter arrays but with its own gradients."""
    out = nn.ParamStore(store.dtype)
    out.params = store.params
    return out


def object_loss(model: FieldModel, stack: ProjectionStack, draw: _Draw):
    """Differentiable mean-over-rays loss for one object (build inside a Tape)."""
    cons = build_constraints([stack.images[i] for i in draw.constraints], model)
    pred = render_rays(draw.origins, draw.directions, draw.t, draw.t_near, draw.t_far, cons, model)
    target = draw.rays.measured.astype(model.config.dtype)
    return nn.mean_squared_sum(pred, target)


def _object_grads(model: FieldModel, stack: ProjectionStack, draw: _Draw, weight: float):
    store = _shadow(model.params)
    m = FieldModel(model.config, store, model.energy, model.depth_half_extent)
    with nn.Tape() as tape:
        L = object_loss(m, stack, draw)
    value = float(L.data)
    if not math.isfinite(value):
        return value, None
    tape.backward(L, seed=weight)
    return value, store.grads


def _check_dataset(dataset, cfg: TrainConfig, model: FieldModel):
    if not dataset:
        raise ValueError("empty dataset")
    need = model.config.contrast_channels
    for n, stack in enumerate(dataset):
        if len(stack) < cfg.constraint_count + 1:
            raise ValueError(f"object {n} has {len(stack)} views; need at least "
                             f"{cfg.constraint_count + 1} for {cfg.constraint_count} constraints")
        missing = [c for c in need if c not in stack.channels]
        if missing:
            raise ValueError(f"object {n} lacks channels {missing}")


def default_grid(stack: ProjectionStack) -> GridSpec:
    """Cube spanned by the detector width, with the detector height along z."""
    H, W = stack.images[0].view.detector_dims
    return GridSpec.centered((W, W, H), stack.images[0].view.pixel_size)


def train(dataset: Sequence[ProjectionStack], cfg: TrainConfig, model: FieldModel,
          grid: Optional[GridSpec] = None, log_path=None, checkpoint_dir=None,
          callback: Optional[Callable] = None):
    """Optimise ``model`` in place; returns ``(model, TrainHistory)``.

    ``callback(iteration, loss)`` is invoked after every step. With
    ``cfg.workers == 1`` the loss history is bit-reproducible for a given seed.
    """
    from .formats import write_checkpoint

    dataset = list(dataset)
    _check_dataset(dataset, cfg, model)
    grid = grid or default_grid(dataset[0])
    channels = model.config.contrast_channels
    rng = np.random.default_rng(cfg.seed)
    samplers = [RaySampler.from_stack(s, channels, cfg.pdf_floor) for s in dataset]
    ipe = iterations_per_epoch(len(dataset), cfg.batch_objects)
    total = cfg.epochs * ipe
    if cfg.max_iterations is not None:
        total = min(total, cfg.max_iterations)
    adam = nn.AdamState(lr=cfg.lr)
    hist = TrainHistory(iterations_per_epoch=ipe)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_file = open(log_path, "w") if log_path is not None else None
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    best = math.inf
    it = 0
    try:
        if log_file:
            log_file.write("iteration,epoch,loss\n")
        for epoch in range(cfg.epochs):
            if it >= total:
                break
            adam.lr = learning_rate(cfg, epoch)
            order = rng.permutation(len(dataset))
            epoch_losses = []
            for b in range(ipe):
                if it >= total:
                    break
                batch = order[b * cfg.batch_objects:(b + 1) * cfg.batch_objects]
                draws = [_draw_object(int(i), dataset[i], samplers[i], cfg, channels, grid, rng)
                         for i in batch]
                weight = 1.0 / len(draws)
                jobs = [(model, dataset[d.object_index], d, weight) for d in draws]
                results = list(pool.map(lambda a: _object_grads(*a), jobs)) if pool else \
                    [_object_grads(*a) for a in jobs]
                value = sum(r[0] for r in results) * weight
                if not math.isfinite(value):
                    bad = [d.object_index for d, r in zip(draws, results) if not math.isfinite(r[0])]
                    norms = {n: float(np.linalg.norm(p)) for n, p in model.params.params.items()}
                    worst = max(norms, key=lambda n: norms[n] if math.isfinite(norms[n]) else math.inf)
                    raise TrainingError(f"non-finite loss at iteration {it} (epoch {epoch}), objects "
                                        f"{bad}; largest parameter norm {worst}={norms[worst]:.3g}")
                model.params.grads = nn.accumulate_gradients(r[1] for r in results)
                for n, g in model.params.grads.items():
                    model.params.grads[n] = g.astype(model.params.dtype)
                nn.adam_step(model.params, adam)
                off = min(int(np.sum(~np.isin(d.rays.view, d.constraints))) for d in draws)
                hist.iteration.append(it)
                hist.epoch.append(epoch)
                hist.loss.append(value)
                hist.lr.append(adam.lr)
                hist.off_constraint_rays.append(off)
                epoch_losses.append(value)
                if log_file:
                    log_file.write(f"{it},{epoch},{value!r}\n")
                if callback:
                    callback(it, value)
                it += 1
            if ckpt_dir is not None and epoch_losses:
                mean = float(np.mean(epoch_losses))
                extra = {"epoch": epoch, "iteration": it, "loss": mean}
                if (epoch + 1) % cfg.checkpoint_every == 0:
                    p = ckpt_dir / f"epoch{epoch + 1:05d}.ckpt"
                    write_checkpoint(p, model, extra)
                    hist.checkpoints.append(str(p))
                if mean < best:
                    best = mean
                    write_checkpoint(ckpt_dir / "best.ckpt", model, extra)
        if ckpt_dir is not None:
            p = ckpt_dir / "final.ckpt"
            write_checkpoint(p, model, {"iteration": it, "loss": hist.loss[-1] if hist.loss else None})
            hist.checkpoints.append(str(p))
    finally:
        if log_file:
            log_file.close()
        if pool:
            pool.shutdown()
    return model, hist


def infer(model: FieldModel, stack: ProjectionStack, indices: Sequence[int], grid: GridSpec,
          chunk: int = 32768) -> RefractiveVolume:
    """Encode the chosen views and render the field on ``grid``; parameters are untouched."""
    idx = [int(i) for i in indices]
    if not idx:
        raise ValueError("no constraint indices given")
    if len(set(idx)) != len(idx):
        raise ValueError(f"duplicate constraint indices {idx}")
    bad = [i for i in idx if not 0 <= i < len(stack)]
    if bad:
        raise IndexError(f"constraint indices {bad} out of range for {len(stack)} views")
    cons = build_constraints([stack.images[i] for i in idx], model)
    return render_volume(model, cons, grid, chunk)
