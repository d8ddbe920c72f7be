"""JSON run configuration.

A run configuration has one top-level ``seed`` and six sections. ``field``,
``trainer`` and ``sart`` carry the fields of :class:`FieldConfig`,
:class:`TrainConfig` and :class:`SartConfig` (seeds excepted: every random
stream derives from the top-level seed). ``phantom`` flattens
:class:`PhantomSpec` into JSON types. Unknown keys and wrong types are
rejected before any work starts, with one message per offending field.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .field import FieldConfig
from .geometry import GridSpec
from .metrics import RingMask
from .phantom import Material, PhantomSpec, rng_for
from .projector import parse_angle_spec
from .sart import SartConfig
from .trainer import TrainConfig

SECTIONS = ("phantom", "projector", "sart", "field", "trainer", "metrics")

# independent Philox streams of the run seed; dataset objects use 1 + index
STREAM_NOISE = 1 << 20
STREAM_MODEL = (1 << 20) + 1


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def _defaults() -> dict:
    ps = PhantomSpec()
    fc = FieldConfig().to_dict()
    tc = TrainConfig().to_dict()
    tc.pop("seed")
    sc = SartConfig()
    return {
        "seed": 0,
        "phantom": {
            "dims": list(ps.grid.dims), "voxel_size_m": ps.grid.voxel_size,
            "cylinder_radius": ps.cylinder_radius, "cylinder_height": ps.cylinder_height,
            "ellipsoid_count_range": list(ps.ellipsoid_count_range),
            "semi_axis_range": list(ps.semi_axis_range),
            "material": {"delta": ps.material.delta, "beta": ps.material.beta,
                         "energy_keV": ps.material.energy},
            "n_objects": 1,
        },
        "projector": {"angles": "8x0:140", "n_depth": 256, "detector": None,
                      "pixel_size_m": None, "noise_sigma": 0.0},
        "sart": {"iterations": sc.iterations, "relaxation_factor": sc.relaxation_factor,
                 "angle_order": sc.angle_order, "n_depth": sc.n_depth,
                 "clamp_nonnegative": sc.clamp_nonnegative},
        "field": fc,
        "trainer": tc,
        "metrics": {"ring_inner": 0.0, "ring_outer": None, "display_cutoff": None},
    }


# allowed types for keys whose default is null
_NULLABLE = {
    ("projector", "detector"): "int2",
    ("projector", "pixel_size_m"): "num",
    ("sart", "n_depth"): "int",
    ("field", "stage_widths"): "intlist",
    ("trainer", "lr_drop_epoch"): "int",
    ("trainer", "max_iterations"): "int",
    ("metrics", "ring_outer"): "num",
    ("metrics", "display_cutoff"): "num",
}
# keys whose list length is not fixed by the default
_VARIABLE = {("field", "output_scale"): "numlist"}


def _is_num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _is_int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _kind_of(default):
    if isinstance(default, bool):
        return "bool"
    if _is_int(default):
        return "int"
    if isinstance(default, float):
        return "num"
    if isinstance(default, str):
        return "str"
    if isinstance(default, dict):
        return "dict"
    if isinstance(default, list):
        if all(_is_int(v) for v in default):
            return f"int{len(default)}"
        return f"num{len(default)}"
    raise TypeError(default)


def _check(value, kind) -> Optional[str]:
    if kind == "bool":
        return None if isinstance(value, bool) else "expected true/false"
    if kind == "int":
        return None if _is_int(value) else "expected an integer"
    if kind == "num":
        return None if _is_num(value) else "expected a number"
    if kind == "str":
        return None if isinstance(value, str) else "expected a string"
    if kind in ("intlist", "numlist"):
        test = _is_int if kind == "intlist" else _is_num
        ok = isinstance(value, list) and value and all(test(v) for v in value)
        what = "integers" if kind == "intlist" else "numbers"
        return None if ok else f"expected a non-empty list of {what}"
    if kind[:3] in ("int", "num"):
        n = int(kind[3:])
        test = _is_int if kind.startswith("int") else _is_num
        ok = isinstance(value, list) and len(value) == n and all(test(v) for v in value)
        what = "integers" if kind.startswith("int") else "numbers"
        return None if ok else f"expected a list of {n} {what}"
    raise ValueError(kind)


def _validate_tree(doc, defaults, path, section, errors):
    if not isinstance(doc, dict):
        errors.append(f"{path}: expected an object")
        return
    for key in doc:
        if key not in defaults:
            errors.append(f"{path}.{key}: unknown key" if path else f"{key}: unknown key")
    for key, default in defaults.items():
        if key not in doc:
            continue
        value = doc[key]
        where = f"{path}.{key}" if path else key
        sec = section or key
        if isinstance(default, dict):
            _validate_tree(value, default, where, sec, errors)
            continue
        if default is None:
            kind = _NULLABLE[(sec, key)]
            if value is None:
                continue
        else:
            kind = _VARIABLE.get((sec, key)) or _kind_of(default)
            if kind == "num" and _is_int(value):
                continue
        msg = _check(value, kind)
        if msg:
            errors.append(f"{where}: {msg}, got {json.dumps(value)}")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    doc: dict = field(default_factory=_defaults)

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls(_defaults())

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        """Validate ``doc`` (a partial document; omitted keys keep defaults)."""
        errors = []
        _validate_tree(doc, _defaults(), "", None, errors)
        if errors:
            raise ConfigError(errors)
        cfg = cls(_merge(_defaults(), doc))
        cfg.build_all()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError([f"{path}: not valid JSON ({e})"]) from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.doc)

    def dumps(self) -> str:
        return json.dumps(self.doc, indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.doc, sort_keys=True).encode()).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        doc = self.to_dict()
        doc["seed"] = int(seed)
        return RunConfig(doc)

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    # ----------------------------------------------------------------- builders

    def grid(self) -> GridSpec:
        p = self.doc["phantom"]
        return GridSpec.centered(tuple(p["dims"]), p["voxel_size_m"])

    def phantom_spec(self) -> PhantomSpec:
        p = self.doc["phantom"]
        m = p["material"]
        return PhantomSpec(grid=self.grid(), cylinder_radius=float(p["cylinder_radius"]),
                           cylinder_height=float(p["cylinder_height"]),
                           ellipsoid_count_range=tuple(p["ellipsoid_count_range"]),
                           semi_axis_range=tuple(float(s) for s in p["semi_axis_range"]),
                           material=Material(m["delta"], m["beta"], m["energy_keV"]),
                           seed=self.seed).validate()

    def angles(self, spec: Optional[str] = None) -> np.ndarray:
        return parse_angle_spec(spec or self.doc["projector"]["angles"])

    def noise_rng(self) -> np.random.Generator:
        return rng_for(self.seed, STREAM_NOISE)

    def sart_config(self, grid: Optional[GridSpec] = None) -> SartConfig:
        s = self.doc["sart"]
        return SartConfig(grid=grid or self.grid(), shuffle_seed=self.seed, **s)

    def field_config(self) -> FieldConfig:
        f = dict(self.doc["field"])
        f["output_scale"] = tuple(f["output_scale"])
        if f.get("stage_widths") is not None:
            f["stage_widths"] = tuple(f["stage_widths"])
        return FieldConfig(**f)

    def train_config(self, **overrides) -> TrainConfig:
        t = dict(self.doc["trainer"])
        t.update(overrides)
        return TrainConfig(seed=self.seed, **t)

    def ring_mask(self) -> RingMask:
        m = self.doc["metrics"]
        outer = m["ring_outer"] if m["ring_outer"] is not None else self.doc["phantom"]["cylinder_radius"]
        return RingMask(float(m["ring_inner"]), float(outer))

    def build_all(self):
        """Construct every config object, collecting their validation errors."""
        errors = []
        for name, fn in (("phantom", self.phantom_spec), ("projector", self.angles),
                         ("sart", self.sart_config), ("field", self.field_config),
                         ("trainer", self.train_config), ("metrics", self.ring_mask)):
            try:
                fn()
            except (ValueError, TypeError) as e:
                errors.append(f"{name}: {e}")
        p = self.doc["projector"]
        if p["n_depth"] < 2:
            errors.append("projector.n_depth: must be >= 2")
        if p["noise_sigma"] < 0:
            errors.append("projector.noise_sigma: must be >= 0")
        if self.doc["phantom"]["n_objects"] < 1:
            errors.append("phantom.n_objects: must be >= 1")
        if errors:
            raise ConfigError(errors)


def defaults_document() -> dict:
    """The shipped defaults file."""
    text = resources.files("xrfield").joinpath("defaults.json").read_text()
    return json.loads(text)
