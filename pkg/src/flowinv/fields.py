"""Velocity fields with evaluation accounting, plus the one-step rule abstraction.

Conventions: ``t = 0`` is data and ``t = 1`` is noise; generation runs the grid
downward. Every solver is written against :class:`StepRule`, whose forward
(denoising) step over interval ``i`` is::

    z(t_{i-1}) = a_i * z(t_i) + b_i * direction(z(t_i), i)

Euler, Heun and DDIM differ only in ``a_i``, ``b_i`` and ``direction``.
"""
import math
import threading
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import kernels
from .tensor_core import TimeGrid

EULER, HEUN, DDIM = "euler", "heun", "ddim"
RULE_KINDS = (EULER, HEUN, DDIM)


class VelocityField:
    """Base class: ``eval(z, t, c)`` with a race-free evaluation counter.

    Subclasses implement ``_velocity``. ``vocab_size`` is the number of
    non-NULL condition tokens accepted; ``None`` is the NULL condition.
    """

    vocab_size = 0
    accepts_null = True

    def __init__(self):
        self._nfe = 0
        self._lock = threading.Lock()

    def eval(self, z, t, c=None):
        self.check_condition(c)
        with self._lock:
            self._nfe += 1
        return self._velocity(z, float(t), c)

    __call__ = eval

    def nfe(self):
        return self._nfe

    def reset_nfe(self):
        with self._lock:
            self._nfe = 0

    def check_condition(self, c):
        if self.vocab_size == 0:  # unconditional: the condition is ignored
            return
        if c is None:
            if not self.accepts_null:
                raise ValueError(f"{type(self).__name__} has no NULL condition")
            return
        if not isinstance(c, (int, np.integer)) or not 0 <= c < self.vocab_size:
            raise ValueError(f"condition token {c!r} outside vocabulary of size {self.vocab_size}")

    def _velocity(self, z, t, c):
        raise NotImplementedError


class ZeroField(VelocityField):
    def _velocity(self, z, t, c):
        return np.zeros_like(z, dtype=np.float64)


class ConstantField(VelocityField):
    def __init__(self, value):
        super().__init__()
        self.value = np.asarray(value, dtype=np.float64)

    def _velocity(self, z, t, c):
        return np.broadcast_to(self.value, np.shape(z)).astype(np.float64)


class TimeOnlyField(VelocityField):
    """Velocity depends on t alone; ``f(t)`` returns a scalar or a latent-shaped array."""

    def __init__(self, f):
        super().__init__()
        self.f = f

    def _velocity(self, z, t, c):
        return np.broadcast_to(np.asarray(self.f(t), dtype=np.float64), np.shape(z)).astype(np.float64)


def analytic_velocity(z, t, mu0, sigma0):
    """Exact marginal velocity E[Z1 - Z0 | Z_t = z] for Z0 ~ N(mu0, sigma0^2), Z1 ~ N(0, 1).

    ``mu0`` is a scalar or one value per channel.
    """
    if sigma0 <= 0:
        raise ValueError("sigma0 must be positive")
    z = np.asarray(z, dtype=np.float64)
    squeeze = z.ndim != 3
    z3 = z.reshape((1, 1, -1)) if squeeze else z
    out = kernels.analytic_velocity(z3, t, _channel_mu(mu0, z3.shape[0]), sigma0)
    return out.reshape(z.shape) if squeeze else out


def _channel_mu(mu0, n_channels):
    mu = np.asarray(mu0, dtype=np.float64).reshape(-1)
    if mu.size == 1:
        return np.full(n_channels, mu[0])
    if mu.size != n_channels:
        raise ValueError(f"{mu.size} channel means for {n_channels} channels")
    return mu


def _mu_like(mu0, z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 3:
        return _channel_mu(mu0, z.shape[0])[:, None, None]
    return float(np.asarray(mu0).reshape(-1)[0])


def _std_at(t, sigma0):
    return math.sqrt(t * t + (1.0 - t) ** 2 * sigma0 * sigma0)


def analytic_flow_map(z0, t, mu0, sigma0):
    """Exact solution at time t of dz/dt = analytic_velocity from z(0) = z0.

    The field is affine in z with gain V'(t) / 2V(t), V(t) = t^2 + (1-t)^2 sigma0^2,
    so z(t) - (1-t) mu0 = (z0 - mu0) * sqrt(V(t) / V(0)).
    """
    if sigma0 <= 0:
        raise ValueError("sigma0 must be positive")
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    mu = _mu_like(mu0, z0)
    return (1.0 - t) * mu + (np.asarray(z0, dtype=np.float64) - mu) * (_std_at(t, sigma0) / sigma0)


def analytic_flow_map_inverse(zt, t, mu0, sigma0):
    """The z0 whose exact trajectory passes through ``zt`` at time t."""
    mu = _mu_like(mu0, zt)
    return mu + (np.asarray(zt, dtype=np.float64) - (1.0 - t) * mu) * (sigma0 / _std_at(t, sigma0))


class AnalyticGaussianField(VelocityField):
    """Exact velocity for Gaussian data N(mu0, sigma0^2) (per channel) under the linear interpolant."""

    def __init__(self, mu0=0.0, sigma0=1.0):
        super().__init__()
        if sigma0 <= 0:
            raise ValueError("sigma0 must be positive")
        self.mu0 = mu0
        self.sigma0 = float(sigma0)

    def _velocity(self, z, t, c):
        return analytic_velocity(z, t, self.mu0, self.sigma0)

    def flow_map(self, z0, t):
        return analytic_flow_map(z0, t, self.mu0, self.sigma0)

    def flow_map_inverse(self, zt, t):
        return analytic_flow_map_inverse(zt, t, self.mu0, self.sigma0)

    def sample_data(self, rng, shape):
        return _mu_like(self.mu0, np.empty(shape)) + self.sigma0 * rng.standard_normal(shape)


class ConditionalAnalyticField(VelocityField):
    """One analytic Gaussian field per condition token.

    ``table`` maps token (``None`` allowed for NULL) to ``(mu0, sigma0)``.
    """

    def __init__(self, table):
        super().__init__()
        self.fields = {k: AnalyticGaussianField(mu, s) for k, (mu, s) in table.items()}
        tokens = [k for k in table if k is not None]
        self.vocab_size = max(tokens) + 1 if tokens else 0
        missing = set(range(self.vocab_size)) - set(tokens)
        if missing:
            raise ValueError(f"tokens without an entry: {sorted(missing)}")
        self.accepts_null = None in table

    def _velocity(self, z, t, c):
        f = self.fields[None if c is None else int(c)]
        return analytic_velocity(z, t, f.mu0, f.sigma0)

    def for_condition(self, c):
        return self.fields[None if c is None else int(c)]


def ddim_analytic_eps(z, abar, sigma0):
    """E[eps | Z = z] for Z = sqrt(abar) X + sqrt(1 - abar) eps with X ~ N(0, sigma0^2)."""
    if not 0.0 < abar <= 1.0:
        raise ValueError(f"abar must lie in (0, 1], got {abar}")
    return math.sqrt(1.0 - abar) * np.asarray(z, dtype=np.float64) / (abar * sigma0 * sigma0 + 1.0 - abar)


def cosine_abar(t, abar_min=1e-3):
    """Default DDIM schedule over t in [0, 1]: 1 at t = 0, decreasing to ``abar_min`` at t = 1."""
    return (1.0 - abar_min) * math.cos(0.5 * math.pi * t) ** 2 + abar_min


class DDIMAnalyticPredictor(VelocityField):
    """Exact noise predictor for Gaussian data under a DDIM schedule ``abar(t)``."""

    def __init__(self, sigma0=1.0, schedule=cosine_abar):
        super().__init__()
        self.sigma0 = float(sigma0)
        self.schedule = schedule

    def _velocity(self, z, t, c):
        return ddim_analytic_eps(z, self.schedule(t), self.sigma0)

    def sample_data(self, rng, shape):
        return self.sigma0 * rng.standard_normal(shape)


@dataclass
class StepRule:
    """Coefficients and direction of one denoising step on every interval of a grid.

    ``a[i - 1]`` and ``b[i - 1]`` belong to interval ``i`` (from ``t_i`` down to ``t_{i-1}``).
    """

    kind: str
    field: VelocityField
    grid: TimeGrid
    a: np.ndarray
    b: np.ndarray
    abar: np.ndarray | None = None
    nested_heun: bool = dc_field(default=False, repr=False)

    @property
    def n_steps(self):
        return self.grid.n_steps

    @property
    def nfe_per_direction(self):
        return 2 if self.kind == HEUN else 1

    def coeffs(self, i):
        return self.a[i - 1], self.b[i - 1]

    def direction(self, z, i, c=None):
        """Direction at grid index ``i``; for Heun the second slope lands on the
        adjacent grid point below (or above, at ``i = 0``)."""
        t = self.grid[i]
        if self.kind != HEUN:
            return self.field.eval(z, t, c)
        k1 = self.field.eval(z, t, c)
        if self.nested_heun:
            # nested variant: velocity fed back as the sample, same time
            return 0.5 * (k1 + self.field.eval(k1, t, c))
        j = i - 1 if i >= 1 else 1
        tj = self.grid[j]
        return 0.5 * (k1 + self.field.eval(z + (tj - t) * k1, tj, c))

    def step(self, z, i, d):
        """Forward (denoising) step from ``t_i`` to ``t_{i-1}`` with direction ``d``."""
        a, b = self.coeffs(i)
        return a * z + b * d

    def invert_step(self, z_prev, i, d):
        """Algebraic inverse of :meth:`step` for a given direction value."""
        a, b = self.coeffs(i)
        return (z_prev - b * d) / a


def make_step_rule(kind, field, grid, schedule=None, nested_heun=False):
    """Build the Euler, Heun or DDIM rule for ``field`` on ``grid``.

    For DDIM, ``field`` predicts noise and ``schedule`` is either a callable
    ``abar(t)`` or one value per grid time; it defaults to the predictor's own
    schedule, then to :func:`cosine_abar`.
    """
    if kind not in RULE_KINDS:
        raise ValueError(f"unknown rule kind {kind!r}; expected one of {RULE_KINDS}")
    t = grid.as_array()
    if kind in (EULER, HEUN):
        n = grid.n_steps
        return StepRule(kind, field, grid, np.ones(n), t[:-1] - t[1:], nested_heun=nested_heun)
    if schedule is None:
        schedule = getattr(field, "schedule", cosine_abar)
    abar = np.array([schedule(x) for x in t]) if callable(schedule) else np.asarray(schedule, dtype=np.float64)
    if abar.shape != t.shape:
        raise ValueError("schedule must give one abar per grid time")
    if np.any(abar <= 0) or np.any(abar > 1):
        raise ValueError("abar values must lie in (0, 1]")
    if np.any(np.diff(abar) > 0):
        raise ValueError("DDIM schedule must be non-increasing along the grid")
    a = np.sqrt(abar[:-1] / abar[1:])
    b = np.sqrt(1.0 - abar[:-1]) - a * np.sqrt(1.0 - abar[1:])
    return StepRule(kind, field, grid, a, b, abar=abar)
