"""View-conditioned implicit field for the complex refractive index.

A small convolutional encoder turns each constraint view into a pixel-aligned
latent image. For a world point ``x`` and each constraint view ``m`` the
network reads the view-local coordinates ``(u, v, depth)``, their Fourier
encoding and the latent vector under ``(u, v)``; weight-shared residual blocks
process each view, the results are averaged over views, and head blocks map the
mean to ``(delta, beta)`` through a scaled softplus.

The model stores no voxel grid: it is evaluated at arbitrary points.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nnkit as nn
from .geometry import GridSpec, Ray, ViewGeometry, world_to_view
from .phantom import ALUMINIUM_18KEV, RefractiveVolume, wavenumber
from .projector import ContrastImage

# output channel names per output_channels setting
OUTPUTS = {2: ("delta", "beta"), 1: ("beta",)}
# contrast channel carried by each output
CONTRAST_OF = {"delta": "phase", "beta": "attenuation"}


@dataclass(frozen=True)
class FieldConfig:
    encoding_levels: int = 10
    mlp_width: int = 128
    shared_blocks: int = 3
    head_blocks: int = 2
    latent_dim: int = 64
    encoder_stages: int = 3
    stage_widths: Optional[tuple] = None
    kernel_size: int = 3
    output_channels: int = 2
    output_scale: tuple = (ALUMINIUM_18KEV.delta, ALUMINIUM_18KEV.beta)
    # softplus(-3) ~ 0.05: start from a sparse object rather than a box full of material
    output_bias_init: float = -3.0
    precision: str = "float64"

    def __post_init__(self):
        for name in ("encoding_levels", "mlp_width", "shared_blocks", "head_blocks",
                     "latent_dim", "encoder_stages", "kernel_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.output_channels not in (1, 2):
            raise ValueError("output_channels must be 1 or 2")
        if len(self.output_scale) != self.output_channels or min(self.output_scale) <= 0:
            raise ValueError("output_scale needs one positive value per output channel")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be 'float64' or 'float32'")
        widths = self.widths
        if len(widths) != self.encoder_stages or sum(widths) != self.latent_dim or min(widths) < 1:
            raise ValueError(f"stage widths {widths} must be {self.encoder_stages} positive "
                             f"counts summing to latent_dim={self.latent_dim}")
        object.__setattr__(self, "output_scale", tuple(float(s) for s in self.output_scale))
        if self.stage_widths is not None:
            object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))

    @property
    def widths(self) -> tuple:
        """Encoder stage widths; default gives the last stage half of D, e.g. 16+16+32."""
        if self.stage_widths is not None:
            return tuple(self.stage_widths)
        S, D = self.encoder_stages, self.latent_dim
        later = [D // 2 ** (S - i) for i in range(1, S)]
        return tuple([D - sum(later)] + later)

    @property
    def outputs(self) -> tuple:
        return OUTPUTS[self.output_channels]

    @property
    def contrast_channels(self) -> tuple:
        """Image channels consumed by the encoder, in stack order."""
        return ("attenuation", "phase") if self.output_channels == 2 else ("attenuation",)

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["output_scale"] = list(self.output_scale)
        if self.stage_widths is not None:
            d["stage_widths"] = list(self.stage_widths)
        return d


def positional_encoding(x, L: int) -> np.ndarray:
    """``(sin(2^l pi c), cos(2^l pi c))`` for ``l < L`` per component, concatenated.

    ``x`` has shape ``(..., 3)``; the result has shape ``(..., 6L)``, ordered
    component-major.
    """
    x = np.asarray(x, dtype=float)
    freqs = (2.0 ** np.arange(L)) * math.pi
    ang = x[..., :, None] * freqs
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
    return out.reshape(*x.shape[:-1], 6 * L)


@dataclass
class FieldModel:
    config: FieldConfig
    params: nn.ParamStore
    energy: float = 18.0
    depth_half_extent: float = 1.0

    @classmethod
    def create(cls, config: FieldConfig, grid: GridSpec, energy: float = 18.0,
               seed: int = 0) -> "FieldModel":
        """Fresh model; ``grid`` only fixes the depth normalisation constant."""
        rng = np.random.default_rng(seed)
        store = nn.ParamStore(config.dtype)
        c_in = config.output_channels
        k = config.kernel_size
        for s, w in enumerate(config.widths):
            nn.init_conv(store, f"enc{s}", c_in, w, k, rng)
            c_in = w
        width = config.mlp_width
        nn.init_dense(store, "mlp.in", 6 * config.encoding_levels + config.latent_dim, width, rng)
        for i in range(config.shared_blocks):
            nn.init_dense(store, f"mlp.shared{i}.fc0", width, width, rng)
            nn.init_dense(store, f"mlp.shared{i}.fc1", width, width, rng)
        for i in range(config.head_blocks):
            nn.init_dense(store, f"mlp.head{i}.fc0", width, width, rng)
            nn.init_dense(store, f"mlp.head{i}.fc1", width, width, rng)
        nn.init_dense(store, "mlp.out", width, config.output_channels, rng)
        store.params["mlp.out.b"][:] = config.output_bias_init
        return cls(config, store, float(energy), depth_extent(grid))

    @property
    def k(self) -> float:
        return wavenumber(self.energy)


def depth_extent(grid: GridSpec) -> float:
    """Largest ``|depth|`` any grid point reaches over all view angles."""
    c = grid.aabb().corners()
    return float(np.max(np.hypot(c[:, 0], c[:, 1])))


@dataclass
class LatentGrid:
    view: ViewGeometry
    features: object  # nn.Tensor or ndarray, (H, W, D)

    @property
    def array(self) -> np.ndarray:
        f = self.features
        return f.data if isinstance(f, nn.Tensor) else np.asarray(f)


@dataclass
class ConstraintSet:
    views: list  # of (ContrastImage, LatentGrid)

    def __post_init__(self):
        if not self.views:
            raise ValueError("constraint set is empty")

    def __len__(self):
        return len(self.views)

    @property
    def latents(self) -> list:
        return [lg for _, lg in self.views]


def _param(model: FieldModel, name: str):
    from .nnkit.tensor import current_tape
    tape = current_tape()
    if tape is None:
        return model.params.params[name]
    return tape.watch(model.params, name)


def _image_tensor(images: Sequence[ContrastImage], model: FieldModel) -> np.ndarray:
    cfg = model.config
    out = []
    for im in images:
        p = im.view.pixel_size
        W = im.view.width
        chans = []
        for name in cfg.contrast_channels:
            arr = getattr(im, name)
            if arr is None:
                raise ValueError(f"encoder expects channel {name!r}, image {im.view.view_index} lacks it")
            out_name = "beta" if name == "attenuation" else "delta"
            # material chord across the whole detector maps to 1
            norm = model.k * cfg.output_scale[cfg.outputs.index(out_name)] * W * p
            chans.append(np.asarray(arr, dtype=float) / norm)
        out.append(chans)
    return np.asarray(out, dtype=cfg.dtype)


def encode_views(images: Sequence[ContrastImage], model: FieldModel) -> list:
    """Latent grids ``(H, W, D)``, one per image, aligned with the image pixels."""
    if not images:
        raise ValueError("no images to encode")
    dims = {im.view.detector_dims for im in images}
    if len(dims) != 1:
        raise ValueError(f"images must share detector dims, got {sorted(dims)}")
    cfg = model.config
    H, W = images[0].view.detector_dims
    x = _image_tensor(images, model)
    pad = cfg.kernel_size // 2
    feats = []
    h = x
    for s in range(cfg.encoder_stages):
        h = nn.conv2d(h, _param(model, f"enc{s}.K"), _param(model, f"enc{s}.b"), pad=pad)
        h = nn.avg_pool(nn.relu(h), 2)
        feats.append(nn.bilinear_resize(h, (H, W)))
    stacked = nn.transpose(nn.concat(feats, axis=1), (0, 2, 3, 1))
    return [LatentGrid(im.view, nn.take(stacked, i)) for i, im in enumerate(images)]


def build_constraints(images: Sequence[ContrastImage], model: FieldModel) -> ConstraintSet:
    return ConstraintSet(list(zip(images, encode_views(images, model))))


def sample_latent(grid: LatentGrid, u, v):
    """Bilinear latent lookup at detector coordinates; zero off the detector.

    Pixel ``(i, j)``'s stored vector is returned at ``(u, v) = (j + 0.5, i + 0.5)``.
    """
    H, W = grid.view.detector_dims
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    off = (u < 0) | (u > W) | (v < 0) | (v > H) | ~np.isfinite(u) | ~np.isfinite(v)
    rows = np.where(off, -10.0, v - 0.5)
    cols = np.where(off, -10.0, u - 0.5)
    return nn.bilinear_gather(grid.features, rows, cols)


def local_encoding(points: np.ndarray, view: ViewGeometry, model: FieldModel):
    """Fourier features of the normalised view-local coordinates, plus ``(u, v)``."""
    H, W = view.detector_dims
    u, v, depth = world_to_view(points, view)
    local = np.stack([2.0 * u / W - 1.0, 2.0 * v / H - 1.0, depth / model.depth_half_extent], axis=-1)
    enc = positional_encoding(local, model.config.encoding_levels).astype(model.config.dtype)
    return enc, u, v


def _resblock(h, model: FieldModel, prefix: str):
    t = nn.dense(nn.relu(h), _param(model, f"{prefix}.fc0.W"), _param(model, f"{prefix}.fc0.b"))
    t = nn.dense(nn.relu(t), _param(model, f"{prefix}.fc1.W"), _param(model, f"{prefix}.fc1.b"))
    return nn.add(h, t)


def field_forward(points, constraints: ConstraintSet, model: FieldModel):
    """``(P, output_channels)`` tensor of refractive-index parts at world ``points``."""
    if len(constraints) == 0:
        raise ValueError("constraint set is empty")
    cfg = model.config
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    P = len(points)
    inputs = []
    for _, lg in constraints.views:
        enc, u, v = local_encoding(points, lg.view, model)
        inputs.append(nn.concat([enc, sample_latent(lg, u, v)], axis=1))
    h = nn.dense(nn.concat(inputs, axis=0), _param(model, "mlp.in.W"), _param(model, "mlp.in.b"))
    for i in range(cfg.shared_blocks):
        h = _resblock(h, model, f"mlp.shared{i}")
    h = nn.mean_over_views(nn.reshape(h, (len(constraints), P, cfg.mlp_width)))
    for i in range(cfg.head_blocks):
        h = _resblock(h, model, f"mlp.head{i}")
    z = nn.dense(nn.relu(h), _param(model, "mlp.out.W"), _param(model, "mlp.out.b"))
    return nn.scale(nn.softplus(z), np.asarray(cfg.output_scale))


def field_eval(x, constraints: ConstraintSet, model: FieldModel):
    """``(delta, beta)`` arrays at world points ``x``; delta is zeros for 1-channel models."""
    out = field_forward(x, constraints, model).data
    shape = np.asarray(x).shape[:-1]
    if model.config.output_channels == 2:
        return out[:, 0].reshape(shape), out[:, 1].reshape(shape)
    return np.zeros(shape, dtype=out.dtype), out[:, 0].reshape(shape)


def depth_weights(t, t_near, t_far) -> np.ndarray:
    """Quadrature weights ``t_{j+1} - t_j``; the last sample takes ``t_far - t_N``.

    The first sample also absorbs the gap ``t_0 - t_near`` so the weights sum
    to exactly ``t_far - t_near``.
    """
    t = np.atleast_2d(np.asarray(t, dtype=float))
    t_near = np.asarray(t_near, dtype=float).reshape(-1, 1)
    t_far = np.asarray(t_far, dtype=float).reshape(-1, 1)
    if t.shape[1] < 2:
        raise ValueError("need at least 2 depth samples")
    w = np.diff(np.concatenate([t, t_far], axis=1), axis=1)
    w[:, 0] += t[:, 0] - t_near[:, 0]
    return w


def render_rays(origins, directions, t, t_near, t_far, constraints: ConstraintSet,
                model: FieldModel):
    """Predicted contrast ``(R, C)`` in the model's contrast channel order."""
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    t = np.atleast_2d(np.asarray(t, dtype=float))
    R, N = t.shape
    d = np.broadcast_to(np.asarray(directions, dtype=float), origins.shape)
    pts = origins[:, None, :] + t[..., None] * d[:, None, :]
    vals = field_forward(pts.reshape(-1, 3), constraints, model)
    vals = nn.reshape(vals, (R, N, model.config.output_channels))
    w = depth_weights(t, t_near, t_far) * model.k
    integ = nn.weighted_sum(vals, w)  # columns follow config.outputs
    if model.config.output_channels == 2:
        # (delta, beta) -> (attenuation, phase)
        integ = nn.dense(integ, _SWAP.astype(integ.dtype))
    return integ


_SWAP = np.array([[0.0, 1.0], [1.0, 0.0]])


def render_ray(ray: Ray, depths, t_near: float, t_far: float, constraints: ConstraintSet,
               model: FieldModel):
    """Contrast tuple for one ray (see :func:`render_rays`)."""
    depths = np.asarray(depths, dtype=float)
    if depths.size < 2:
        raise ValueError("need at least 2 depth samples")
    out = render_rays(ray.origin[None], ray.direction, depths[None], [t_near], [t_far],
                      constraints, model)
    return tuple(float(c) for c in out.data[0])


def render_volume(model: FieldModel, constraints: ConstraintSet, grid: GridSpec,
                  chunk: int = 32768) -> RefractiveVolume:
    """Evaluate the field at every voxel centre, ``chunk`` points at a time."""
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    pts = grid.voxel_centers().reshape(-1, 3)
    delta = np.empty(len(pts))
    beta = np.empty(len(pts))
    for lo in range(0, len(pts), chunk):
        d, b = field_eval(pts[lo:lo + chunk], constraints, model)
        delta[lo:lo + chunk] = d
        beta[lo:lo + chunk] = b
    return RefractiveVolume(grid, delta.reshape(grid.shape), beta.reshape(grid.shape),
                            model.energy).check()
