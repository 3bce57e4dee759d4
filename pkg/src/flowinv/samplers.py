"""Deterministic sampling under a StepRule and the two vanilla inversions."""
from dataclasses import dataclass, field

import numpy as np

from .tensor_core import check_finite

FORWARD, INVERSE = "forward", "inverse"
AT_PREV, AT_TARGET = "at_prev", "at_target"


@dataclass
class Trajectory:
    """States visited by a solver, in visiting order.

    A FORWARD trajectory runs from the last grid time down to ``t_0``; an
    INVERSE one from ``t_0`` up. ``directions[k]`` is the direction value used
    for the k-th step, so the record can be replayed algebraically.
    """

    times: list
    latents: list
    kind: str
    directions: list = field(default_factory=list)
    nfe: int = 0

    @property
    def start(self):
        return self.latents[0]

    @property
    def end(self):
        return self.latents[-1]

    def at(self, t):
        return self.latents[self.times.index(t)]


def sample(rule, z_end, c=None):
    """Run the rule's denoising steps from the grid's last time down to ``t_0``."""
    grid = rule.grid
    n0 = rule.field.nfe()
    z = np.array(z_end, dtype=np.float64)
    times, latents, dirs = [grid[-1]], [z], []
    for i in range(grid.n_steps, 0, -1):
        d = rule.direction(z, i, c)
        z = check_finite(rule.step(z, i, d), i)
        dirs.append(d)
        times.append(grid[i - 1])
        latents.append(z)
    return Trajectory(times, latents, FORWARD, dirs, rule.field.nfe() - n0)


def vanilla_invert(rule, z0, c=None, mode=AT_PREV):
    """Invert by guessing each step's direction from the already-known sample.

    ``AT_PREV`` evaluates at the previous grid time (DDIM-inversion style);
    ``AT_TARGET`` evaluates the same sample at the step's target time.
    """
    if mode not in (AT_PREV, AT_TARGET):
        raise ValueError(f"unknown inversion mode {mode!r}")
    if np.any(rule.a == 0):
        raise ValueError("step rule has a zero coefficient a_i; its steps are not invertible")
    grid = rule.grid
    n0 = rule.field.nfe()
    z = np.array(z0, dtype=np.float64)
    times, latents, dirs = [grid[0]], [z], []
    for i in range(1, grid.n_steps + 1):
        d = rule.direction(z, i - 1 if mode == AT_PREV else i, c)
        z = check_finite(rule.invert_step(z, i, d), i)
        dirs.append(d)
        times.append(grid[i])
        latents.append(z)
    return Trajectory(times, latents, INVERSE, dirs, rule.field.nfe() - n0)


def replay_forward(rule, traj):
    """Undo an inverse trajectory step by step using its recorded directions."""
    z = traj.end
    for k in range(len(traj.directions), 0, -1):
        z = rule.step(z, k, traj.directions[k - 1])
    return z


def _resolve_inverter(inverter):
    if callable(inverter):
        return inverter
    from .uni_inv import get_inverter

    return get_inverter(inverter)


def roundtrip(rule, z0, c=None, inverter=AT_PREV):
    """Invert to the grid end, then regenerate from that latent alone."""
    inv = _resolve_inverter(inverter)(rule, z0, c)
    return inv, sample(rule, inv.end, c)


def roundtrip_error(rule, z0, c=None, inverter=AT_PREV):
    """MSE between ``z0`` and its reconstruction from the inverted endpoint."""
    _, fwd = roundtrip(rule, z0, c, inverter)
    return float(np.mean((np.asarray(z0, dtype=np.float64) - fwd.end) ** 2))
