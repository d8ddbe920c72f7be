"""Tape-based reverse-mode differentiation over numpy arrays.

Operations executed inside ``with Tape() as tape:`` are recorded in order;
``tape.backward(loss)`` replays them in reverse and then drops the graph.
Outside a tape, operations compute values only.
"""
from __future__ import annotations

import threading

import numpy as np

# one tape stack per thread so independent graphs can be built concurrently
_LOCAL = threading.local()


def _stack() -> list:
    if not hasattr(_LOCAL, "tapes"):
        _LOCAL.tapes = []
    return _LOCAL.tapes


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def current_tape():
    tapes = _stack()
    return tapes[-1] if tapes else None


def record(out: Tensor, parents, backward) -> Tensor:
    """Register ``backward(g_out)`` for ``out`` when any parent needs a gradient.

    ``backward`` returns one gradient (or None) per parent.
    """
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._nodes.append((out, tuple(parents), backward))
    return out


class Tape:
    def __init__(self):
        self._nodes = []
        self._params = {}
        self._used = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def watch(self, store, name: str) -> Tensor:
        """Leaf tensor for parameter ``name`` of ``store``; one per tape."""
        key = (id(store), name)
        if key not in self._params:
            self._params[key] = (store, Tensor(store.params[name], requires_grad=True, name=name))
        return self._params[key][1]

    def backward(self, loss: Tensor, seed=None):
        """Propagate from ``loss`` and add parameter gradients into their stores."""
        if self._used:
            raise RuntimeError("tape already consumed by a previous backward()")
        if not self._nodes:
            raise RuntimeError("backward() called before any differentiable forward op was recorded")
        loss.grad = np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=loss.dtype)
        for out, parents, fn in reversed(self._nodes):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for p, g in zip(parents, grads):
                if g is not None and p.requires_grad:
                    p._accumulate(g)
        for store, leaf in self._params.values():
            if leaf.grad is not None:
                store.add_grad(leaf.name, leaf.grad)
        self._nodes.clear()
        self._used = True
