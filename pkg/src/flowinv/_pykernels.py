"""Pure numpy versions of the compiled kernels.

Operation order matches ``_ckernels.pyx`` so both backends produce identical
bits for everything except the SSIM window sums.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def channel_mean(v, signed=False):
    acc = np.zeros(v.shape[1:], dtype=np.float64)
    for c in range(v.shape[0]):
        acc += v[c] if signed else np.abs(v[c])
    return acc / v.shape[0]


def minmax_normalize(m, eps):
    lo, hi = m.min(), m.max()
    span = hi - lo
    if span < eps:
        return np.full(m.shape, 0.5)
    return (m - lo) / span


def edit_update(z, vs, vt, m, omega, dt):
    vm = vt - vs
    s = (omega * dt * (1.0 + m))[None] * vm
    vf = m[None] * vt + (1.0 - m)[None] * vs
    return (z + s) + dt * vf


def analytic_velocity(z, t, mu, sigma):
    s2 = sigma * sigma
    gain = (t - (1.0 - t) * s2) / (t * t + (1.0 - t) * (1.0 - t) * s2)
    mu = np.asarray(mu, dtype=np.float64)[:, None, None]
    return gain * (z - (1.0 - t) * mu) - mu


def ssim_channel(a, b, win, stride, c1, c2):
    wa = sliding_window_view(a, (win, win))[::stride, ::stride]
    wb = sliding_window_view(b, (win, win))[::stride, ::stride]
    n = win * win
    ma = wa.sum(axis=(-2, -1)) / n
    mb = wb.sum(axis=(-2, -1)) / n
    da = wa - ma[..., None, None]
    db = wb - mb[..., None, None]
    va = (da * da).sum(axis=(-2, -1)) / (n - 1.0)
    vb = (db * db).sum(axis=(-2, -1)) / (n - 1.0)
    cov = (da * db).sum(axis=(-2, -1)) / (n - 1.0)
    s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    return float(s.mean())
