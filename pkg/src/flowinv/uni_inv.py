"""Predictor-corrector inversion and its local-error (convergence order) study."""
import math
from dataclasses import dataclass

import numpy as np

from .fields import make_step_rule
from .samplers import AT_PREV, AT_TARGET, INVERSE, Trajectory, roundtrip, vanilla_invert
from .tensor_core import TimeGrid, check_finite

UNI_INV = "uni_inv"
METHODS = (UNI_INV, AT_PREV, AT_TARGET)


def uni_inv(rule, z0, c=None):
    """Invert ``z0`` from ``t_0`` to the end of ``rule.grid``.

    Each step first backtracks the sample to ``t_i`` with the cached direction
    (correction), evaluates the direction there (prediction), then redoes the
    inversion step from ``t_{i-1}`` with that fresh direction. One evaluation
    per step plus one at ``t_0``.
    """
    if np.any(rule.a == 0):
        raise ValueError("step rule has a zero coefficient a_i; its steps are not invertible")
    grid = rule.grid
    n0 = rule.field.nfe()
    z = np.array(z0, dtype=np.float64)
    v_hat = rule.direction(z, 0, c)
    times, latents, dirs = [grid[0]], [z], []
    for i in range(1, grid.n_steps + 1):
        z_bar = rule.invert_step(z, i, v_hat)
        v_hat = rule.direction(z_bar, i, c)
        z = check_finite(rule.invert_step(z, i, v_hat), i)
        dirs.append(v_hat)
        times.append(grid[i])
        latents.append(z)
    return Trajectory(times, latents, INVERSE, dirs, rule.field.nfe() - n0)


def get_inverter(name):
    if name == UNI_INV:
        return uni_inv
    if name in (AT_PREV, AT_TARGET):
        return lambda rule, z0, c=None: vanilla_invert(rule, z0, c, name)
    raise ValueError(f"unknown inverter {name!r}; expected one of {METHODS}")


def reconstruct(rule, z0, c=None, inverter=UNI_INV):
    """Invert then regenerate from the endpoint only.

    Returns ``(z0_hat, metrics)`` with MSE/PSNR (and SSIM when the latent is
    image-sized) plus inversion and total NFE.
    """
    from .metrics import mse, psnr, ssim, SSIM_WIN

    inv, fwd = roundtrip(rule, z0, c, inverter)
    z0_hat = fwd.end
    z0 = np.asarray(z0, dtype=np.float64)
    out = {"mse": mse(z0, z0_hat), "psnr": psnr(z0, z0_hat), "nfe_inv": inv.nfe, "nfe": inv.nfe + fwd.nfe}
    if z0.ndim == 3 and min(z0.shape[1:]) >= SSIM_WIN:
        out["ssim"] = ssim(z0, z0_hat)
    return z0_hat, out


@dataclass
class LocalErrorStudy:
    method: str
    kind: str
    dts: list
    errors: list
    slope: float | None
    exact: bool

    def rows(self):
        return list(zip(self.dts, self.errors))


def fit_slope(dts, errors):
    """Least-squares slope of log(error) against log(dt)."""
    x = np.log(np.asarray(dts, dtype=np.float64))
    y = np.log(np.asarray(errors, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


def local_error_study(kind, field, z_start, dt_list, t_i=0.75, method=UNI_INV, c=None,
                      exact_tol=1e-13):
    """One-step inversion error against step size at a fixed interior time.

    For each dt: ``z_start`` is the exact state at ``t_i``; one forward step of
    the rule gives the state at ``t_i - dt``; a single inversion step of
    ``method`` is taken back up, and its distance to ``z_start`` recorded.
    Uni-Inv is seeded with the direction evaluated at the lower point, i.e.
    with an exact extra evaluation in place of the cached one.

    When every error is below ``exact_tol`` (relative to ``|z_start|``), the
    inversion is flagged exact and no slope is fitted.
    """
    if len(dt_list) < 3:
        raise ValueError("need at least three step sizes")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    z_start = np.asarray(z_start, dtype=np.float64)
    errors = []
    for dt in dt_list:
        if not 0 < dt <= t_i:
            raise ValueError(f"step {dt} does not fit below t_i = {t_i}")
        lo = t_i - dt
        # uniform spacing below t_i so a Heun slope at t_i - dt spans one step, as mid-run
        times = [t for t in (lo - dt, lo) if t > 0.0]
        grid = TimeGrid(tuple([0.0] + times + [t_i]), 0)
        rule = make_step_rule(kind, field, grid)
        k = grid.n_steps
        z_prev = rule.step(z_start, k, rule.direction(z_start, k, c))
        if method == UNI_INV:
            v_bar = rule.direction(z_prev, k - 1, c)
            z_bar = rule.invert_step(z_prev, k, v_bar)
            d = rule.direction(z_bar, k, c)
        elif method == AT_PREV:
            d = rule.direction(z_prev, k - 1, c)
        else:
            d = rule.direction(z_prev, k, c)
        z_hat = rule.invert_step(z_prev, k, d)
        errors.append(float(np.linalg.norm((z_hat - z_start).ravel())))
    scale = max(1.0, float(np.linalg.norm(z_start.ravel())))
    exact = all(e <= exact_tol * scale for e in errors)
    slope = None if exact else fit_slope(dt_list, errors)
    return LocalErrorStudy(method, kind, list(dt_list), errors, slope, exact)


def octave_dts(dt_min, dt_max):
    """Powers of two from ``dt_max`` down to ``dt_min`` inclusive."""
    hi = round(math.log2(dt_max))
    lo = round(math.log2(dt_min))
    if lo > hi:
        raise ValueError("dt_min exceeds dt_max")
    return [2.0 ** e for e in range(hi, lo - 1, -1)]
