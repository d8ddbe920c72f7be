"""Binary file formats.

All three share one layout: ASCII magic, a little-endian ``uint32`` header
length, a UTF-8 JSON header of that many bytes, then a raw little-endian
payload whose size the header fully determines.

ONIXVOL1
    header ``{dims: [nx, ny, nz], voxel_size_m, channels, energy_keV, origin}``;
    payload float32, channel-major, each channel ``[z][y][x]``.
ONIXPRJ1
    header ``{n_views, H, W, pixel_size_m, energy_keV, channels, angles_rad}``;
    payload float32, view-major, then channel-major, each channel ``[row][col]``.
ONIXCKPT1
    header ``{config, energy_keV, depth_half_extent_m, precision,
    params: {name: {shape, offset, dtype}}, payload_bytes, extra}``;
    payload is the concatenated parameter blobs at their stated offsets.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .field import FieldConfig, FieldModel
from .geometry import GridSpec, ViewGeometry
from .nnkit import ParamStore
from .phantom import RefractiveVolume
from .projector import CHANNELS, ContrastImage, ProjectionStack

VOL_MAGIC = b"ONIXVOL1"
PRJ_MAGIC = b"ONIXPRJ1"
CKPT_MAGIC = b"ONIXCKPT1"
_F32 = np.dtype("<f4")
_DTYPES = {"float64": np.dtype("<f8"), "float32": np.dtype("<f4")}


class FormatError(ValueError):
    pass


def _pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    h = json.dumps(header, sort_keys=True).encode("utf-8")
    return magic + struct.pack("<I", len(h)) + h + payload


def _unpack(data: bytes, magic: bytes, what: str):
    if len(data) < len(magic) + 4:
        raise FormatError(f"{what}: file truncated ({len(data)} bytes, need at least {len(magic) + 4})")
    if data[:len(magic)] != magic:
        raise FormatError(f"{what}: bad magic {data[:len(magic)]!r}, expected {magic!r}")
    (n,) = struct.unpack("<I", data[len(magic):len(magic) + 4])
    start = len(magic) + 4
    if len(data) < start + n:
        raise FormatError(f"{what}: header truncated (need {n} bytes, have {len(data) - start})")
    try:
        header = json.loads(data[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{what}: header is not valid JSON ({e})") from None
    if not isinstance(header, dict):
        raise FormatError(f"{what}: header must be a JSON object")
    return header, memoryview(data)[start + n:]


def _require(header: dict, spec: dict, what: str):
    errors = []
    for key, kind in spec.items():
        if key not in header:
            errors.append(f"missing key {key!r}")
        elif not isinstance(header[key], kind) or isinstance(header[key], bool) and kind is not bool:
            errors.append(f"key {key!r} has type {type(header[key]).__name__}")
    if errors:
        raise FormatError(f"{what}: invalid header: " + "; ".join(errors))


def _check_payload(payload, expected: int, what: str):
    if len(payload) != expected:
        kind = "truncated" if len(payload) < expected else "has trailing bytes"
        raise FormatError(f"{what}: payload {kind}: expected {expected} bytes, got {len(payload)}")


_NUM = (int, float)

# --------------------------------------------------------------------------- volumes


def volume_bytes(vol: RefractiveVolume, channels=("delta", "beta")) -> bytes:
    header = {"dims": list(vol.grid.dims), "voxel_size_m": vol.grid.voxel_size,
              "channels": list(channels), "energy_keV": vol.energy,
              "origin": list(vol.grid.origin)}
    payload = b"".join(np.ascontiguousarray(getattr(vol, c), dtype=_F32).tobytes() for c in channels)
    return _pack(VOL_MAGIC, header, payload)


def volume_from_bytes(data: bytes) -> RefractiveVolume:
    what = "ONIXVOL1"
    header, payload = _unpack(data, VOL_MAGIC, what)
    _require(header, {"dims": list, "voxel_size_m": _NUM, "channels": list,
                      "energy_keV": _NUM, "origin": list}, what)
    channels = header["channels"]
    if not channels or any(c not in ("delta", "beta") for c in channels) or len(set(channels)) != len(channels):
        raise FormatError(f"{what}: channels must be distinct entries of ['delta', 'beta'], got {channels}")
    try:
        grid = GridSpec(tuple(header["dims"]), header["voxel_size_m"], tuple(header["origin"]))
    except (ValueError, TypeError) as e:
        raise FormatError(f"{what}: invalid grid ({e})") from None
    n = grid.n_voxels
    _check_payload(payload, n * 4 * len(channels), what)
    arr = np.frombuffer(payload, dtype=_F32).reshape(len(channels), *grid.shape)
    fields = {c: np.zeros(grid.shape) for c in ("delta", "beta")}
    for i, c in enumerate(channels):
        fields[c] = arr[i].astype(np.float64)
    return RefractiveVolume(grid, fields["delta"], fields["beta"], float(header["energy_keV"]))


def write_volume(path, vol: RefractiveVolume, channels=("delta", "beta")):
    Path(path).write_bytes(volume_bytes(vol, channels))


def read_volume(path) -> RefractiveVolume:
    return volume_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------- projections


def stack_bytes(stack: ProjectionStack) -> bytes:
    v0 = stack.images[0].view
    H, W = v0.detector_dims
    header = {"n_views": len(stack), "H": H, "W": W, "pixel_size_m": v0.pixel_size,
              "energy_keV": stack.energy, "channels": list(stack.channels),
              "angles_rad": [im.view.angle for im in stack.images]}
    payload = b"".join(np.ascontiguousarray(im.channel(c), dtype=_F32).tobytes()
                       for im in stack.images for c in stack.channels)
    return _pack(PRJ_MAGIC, header, payload)


def stack_from_bytes(data: bytes) -> ProjectionStack:
    what = "ONIXPRJ1"
    header, payload = _unpack(data, PRJ_MAGIC, what)
    _require(header, {"n_views": int, "H": int, "W": int, "pixel_size_m": _NUM, "energy_keV": _NUM,
                      "channels": list, "angles_rad": list}, what)
    K, H, W = header["n_views"], header["H"], header["W"]
    channels = header["channels"]
    if K < 1 or H < 1 or W < 1:
        raise FormatError(f"{what}: n_views, H, W must be >= 1")
    if len(header["angles_rad"]) != K:
        raise FormatError(f"{what}: {len(header['angles_rad'])} angles for {K} views")
    if not channels or any(c not in CHANNELS for c in channels):
        raise FormatError(f"{what}: channels must be a subset of {list(CHANNELS)}, got {channels}")
    _check_payload(payload, K * len(channels) * H * W * 4, what)
    arr = np.frombuffer(payload, dtype=_F32).reshape(K, len(channels), H, W).astype(np.float64)
    images = []
    for i, a in enumerate(header["angles_rad"]):
        view = ViewGeometry(float(a), (H, W), float(header["pixel_size_m"]), i)
        chans = {c: arr[i, j] for j, c in enumerate(channels)}
        att = chans.get("attenuation", np.zeros((H, W)))
        images.append(ContrastImage(att, chans.get("phase"), view))
    try:
        return ProjectionStack(images, float(header["energy_keV"]), tuple(channels))
    except ValueError as e:
        raise FormatError(f"{what}: {e}") from None


def write_stack(path, stack: ProjectionStack):
    Path(path).write_bytes(stack_bytes(stack))


def read_stack(path) -> ProjectionStack:
    return stack_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------- checkpoints


def checkpoint_bytes(model: FieldModel, extra: dict | None = None) -> bytes:
    dt = _DTYPES[model.config.precision]
    table, blobs, offset = {}, [], 0
    for name in model.params.names():
        blob = np.ascontiguousarray(model.params.params[name], dtype=dt).tobytes()
        table[name] = {"shape": list(model.params.params[name].shape), "offset": offset,
                       "dtype": dt.str}
        blobs.append(blob)
        offset += len(blob)
    header = {"config": model.config.to_dict(), "energy_keV": model.energy,
              "depth_half_extent_m": model.depth_half_extent,
              "precision": model.config.precision, "params": table, "payload_bytes": offset,
              "extra": extra or {}}
    return _pack(CKPT_MAGIC, header, b"".join(blobs))


def checkpoint_from_bytes(data: bytes):
    """Returns ``(model, extra)``."""
    what = "ONIXCKPT1"
    header, payload = _unpack(data, CKPT_MAGIC, what)
    _require(header, {"config": dict, "energy_keV": _NUM, "depth_half_extent_m": _NUM,
                      "precision": str, "params": dict, "payload_bytes": int}, what)
    _check_payload(payload, header["payload_bytes"], what)
    try:
        cfg_dict = dict(header["config"])
        if cfg_dict.get("stage_widths") is not None:
            cfg_dict["stage_widths"] = tuple(cfg_dict["stage_widths"])
        cfg_dict["output_scale"] = tuple(cfg_dict["output_scale"])
        config = FieldConfig(**cfg_dict)
    except (TypeError, ValueError, KeyError) as e:
        raise FormatError(f"{what}: invalid config ({e})") from None
    store = ParamStore(config.dtype)
    for name, entry in header["params"].items():
        try:
            shape = tuple(int(s) for s in entry["shape"])
            dt = np.dtype(entry["dtype"])
            off = int(entry["offset"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{what}: bad table entry for {name!r} ({e})") from None
        size = int(np.prod(shape)) * dt.itemsize
        if off < 0 or off + size > len(payload):
            raise FormatError(f"{what}: parameter {name!r} spans bytes {off}..{off + size}, "
                              f"payload has {len(payload)}")
        store.params[name] = np.frombuffer(payload[off:off + size], dtype=dt).reshape(shape) \
            .astype(config.dtype)
    model = FieldModel(config, store, float(header["energy_keV"]), float(header["depth_half_extent_m"]))
    expected = FieldModel.create(config, GridSpec((1, 1, 1), 1.0), model.energy)
    for name, p in expected.params.params.items():
        if name not in store.params or store.params[name].shape != p.shape:
            raise FormatError(f"{what}: parameter {name!r} missing or mis-shaped for the stored config")
    unknown = sorted(set(store.params) - set(expected.params.params))
    if unknown:
        raise FormatError(f"{what}: unexpected parameters {unknown}")
    # the header table is key-sorted; restore construction order
    store.params = {n: store.params[n] for n in expected.params.names()}
    return model, header.get("extra", {})


def write_checkpoint(path, model: FieldModel, extra: dict | None = None):
    Path(path).write_bytes(checkpoint_bytes(model, extra))


def read_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())
