"""Backend selection for the ray-marching kernels.

The compiled extension is used when it imports; otherwise, or when the
environment variable ``XRFIELD_PURE_PYTHON`` is set to a non-empty value other
than ``0``, the numpy implementation is used.
"""
import os

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_force_py = os.environ.get("XRFIELD_PURE_PYTHON", "") not in ("", "0")

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["cython"] = _compiled

BACKEND = "cython" if (_compiled is not None and not _force_py) else "python"
_impl = BACKENDS[BACKEND]


def get(name=None):
    """Kernel module for ``name`` (``"cython"`` / ``"python"``), default active one."""
    if name is None:
        return _impl
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}") from None


def march_forward(vol, start, step, weight, n, backend=None):
    return get(backend).march_forward(vol, start, step, weight, n)


def march_back(shape, start, step, weight, values, n, backend=None):
    return get(backend).march_back(shape, start, step, weight, values, n)
