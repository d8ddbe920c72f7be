"""Named parameters with matching gradient buffers."""
from __future__ import annotations

import math
from typing import Iterable, Mapping

import numpy as np


class ParamStore:
    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: dict = {}
        self.grads: dict = {}

    def __contains__(self, name):
        return name in self.params

    def __len__(self):
        return len(self.params)

    def names(self):
        return list(self.params)

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already defined")
        self.params[name] = np.array(value, dtype=self.dtype)
        return self.params[name]

    def add_grad(self, name: str, g):
        g = np.asarray(g)
        if g.shape != self.params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, "
                             f"parameter has {self.params[name].shape}")
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g.astype(self.dtype, copy=True)

    def zero_grad(self):
        self.grads = {}

    def n_scalars(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ParamStore":
        out = ParamStore(self.dtype)
        out.params = {k: v.copy() for k, v in self.params.items()}
        return out

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        out.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return out


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_dense(store: ParamStore, name: str, n_in: int, n_out: int, rng: np.random.Generator):
    a = glorot_bound(n_in, n_out)
    store.add(f"{name}.W", rng.uniform(-a, a, size=(n_in, n_out)))
    store.add(f"{name}.b", np.zeros(n_out))


def init_conv(store: ParamStore, name: str, c_in: int, c_out: int, k: int, rng: np.random.Generator):
    a = glorot_bound(c_in * k * k, c_out * k * k)
    store.add(f"{name}.K", rng.uniform(-a, a, size=(c_out, c_in, k, k)))
    store.add(f"{name}.b", np.zeros(c_out))


def compensated_sum(arrays: Iterable[np.ndarray]) -> np.ndarray:
    """Elementwise Neumaier summation; nearly independent of summation order."""
    total = None
    comp = None
    for a in arrays:
        a = np.asarray(a, dtype=np.float64)
        if total is None:
            total = a.copy()
            comp = np.zeros_like(total)
            continue
        t = total + a
        big = np.abs(total) >= np.abs(a)
        comp += np.where(big, (total - t) + a, (a - t) + total)
        total = t
    if total is None:
        raise ValueError("nothing to sum")
    return total + comp


def accumulate_gradients(grad_dicts: Iterable[Mapping[str, np.ndarray]]) -> dict:
    """Combine per-graph gradients by compensated summation."""
    grad_dicts = list(grad_dicts)
    names = set().union(*[set(g) for g in grad_dicts]) if grad_dicts else set()
    return {n: compensated_sum(g[n] for g in grad_dicts if n in g) for n in sorted(names)}
