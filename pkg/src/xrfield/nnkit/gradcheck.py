"""Central finite-difference checks for ``ParamStore`` gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .params import ParamStore
from .tensor import Tape


def analytic_gradients(loss_fn: Callable[[Tape], object], store: ParamStore) -> dict:
    store.zero_grad()
    with Tape() as tape:
        loss = loss_fn(tape)
    tape.backward(loss)
    grads = {k: v.copy() for k, v in store.grads.items()}
    store.zero_grad()
    return grads


def _value(loss_fn, store):
    with Tape() as tape:
        return float(loss_fn(tape).data)


def check_gradients(loss_fn, store: ParamStore, n_samples: int = 100, h: float = 1e-5,
                    rng=None, floor: float = 1e-10):
    """Compare tape gradients with central differences at random parameter entries.

    Returns a list of ``(name, flat_index, analytic, numeric, rel_err)``. The
    relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    grads = analytic_gradients(loss_fn, store)
    sizes = np.array([store.params[n].size for n in store.names()], dtype=float)
    names = store.names()
    rows = []
    for _ in range(n_samples):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        p = store.params[name].reshape(-1)
        i = int(rng.integers(p.size))
        old = p[i]
        p[i] = old + h
        up = _value(loss_fn, store)
        p[i] = old - h
        down = _value(loss_fn, store)
        p[i] = old
        num = (up - down) / (2.0 * h)
        ana = float(grads.get(name, np.zeros_like(store.params[name])).reshape(-1)[i])
        rel = abs(ana - num) / max(abs(ana), abs(num), floor)
        rows.append((name, i, ana, num, rel))
    return rows
