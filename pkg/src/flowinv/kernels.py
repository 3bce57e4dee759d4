"""Hot per-pixel kernels, compiled when available.

The Cython extension ``flowinv._ckernels`` is used if it imports; otherwise
the numpy fallback in ``flowinv._pykernels`` is used. Set ``FLOWINV_PURE=1``
to force the fallback. ``BACKEND`` names the active choice.
"""
import os

import numpy as np

from . import _pykernels

_py = _pykernels
_c = None
if os.environ.get("FLOWINV_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _c
    except ImportError:  # extension not built
        _c = None

BACKEND = "cython" if _c is not None else "python"
_impl = _c if _c is not None else _py


def backends():
    """Available kernel modules keyed by name (used by tests and benchmarks)."""
    out = {"python": _py}
    if _c is not None:
        out["cython"] = _c
    return out


def _f64(a, ndim):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {a.shape}")
    return a


def channel_mean(v, signed=False):
    return _impl.channel_mean(_f64(v, 3), signed)


def minmax_normalize(m, eps):
    return _impl.minmax_normalize(_f64(m, 2), float(eps))


def edit_update(z, vs, vt, m, omega, dt):
    z, vs, vt = _f64(z, 3), _f64(vs, 3), _f64(vt, 3)
    if not (z.shape == vs.shape == vt.shape):
        raise ValueError("latent shapes differ")
    m = _f64(m, 2)
    if m.shape != z.shape[1:]:
        raise ValueError(f"mask shape {m.shape} does not match spatial dims {z.shape[1:]}")
    return _impl.edit_update(z, vs, vt, m, float(omega), float(dt))


def analytic_velocity(z, t, mu, sigma):
    z = _f64(z, 3)
    mu = np.ascontiguousarray(np.broadcast_to(np.asarray(mu, dtype=np.float64), (z.shape[0],)))
    return _impl.analytic_velocity(z, float(t), mu, float(sigma))


def ssim_channel(a, b, win, stride, c1, c2):
    return _impl.ssim_channel(_f64(a, 2), _f64(b, 2), int(win), int(stride), float(c1), float(c2))
