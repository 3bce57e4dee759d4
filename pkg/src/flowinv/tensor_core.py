"""Array primitives shared by every solver: time grids, seeded RNG, mask maps.

Latents are plain ``float64`` numpy arrays laid out ``[C, H, W]``; spatial
maps are ``[H, W]``. The only broadcasting rule used anywhere is a spatial map
applied across channels.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels

MASK_EPS = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing times ``t_0 = 0 < t_1 < ... < t_K``.

    ``n_full`` is the step count of the untruncated grid this one was cut
    from; ``times[-1] == 1`` only when ``len(times) - 1 == n_full``.
    """

    times: tuple
    n_full: int

    def __post_init__(self):
        t = self.times
        if len(t) < 2:
            raise ValueError("a grid needs at least two times")
        if t[0] != 0.0:
            raise ValueError("grid must start exactly at 0")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("grid times must be strictly increasing")
        if t[-1] > 1.0:
            raise ValueError("grid must end at or before 1")

    @property
    def n_steps(self):
        return len(self.times) - 1

    def __len__(self):
        return len(self.times)

    def __getitem__(self, i):
        return self.times[i]

    def __iter__(self):
        return iter(self.times)

    def as_array(self):
        return np.asarray(self.times, dtype=np.float64)


def n_active_steps(n_steps, alpha=1.0):
    """round(alpha * n_steps), the number of steps an edit with delay rate alpha uses."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    k = int(round(alpha * n_steps))
    if k < 1:
        raise ValueError(f"round(alpha * n_steps) = {k}; need at least one step")
    return k


def uniform_grid(n_steps, alpha=1.0):
    """Times ``k / n_steps`` for ``k = 0 .. round(alpha * n_steps)``."""
    k = n_active_steps(n_steps, alpha)
    return TimeGrid(tuple(i / n_steps for i in range(k + 1)), n_steps)


def make_rng(seed):
    # PCG64: documented 128-bit LCG with permuted output, platform-independent stream
    return np.random.Generator(np.random.PCG64(int(seed)))


def child_seed(seed, run_index):
    return int(seed) ^ int(run_index)


def channel_mean_abs(v, signed=False):
    """Mean over channels of |v| (or of v when ``signed``), shape ``[H, W]``."""
    return kernels.channel_mean(v, signed)


def minmax_normalize(m, eps=MASK_EPS):
    """Rescale a map to [0, 1]; a map with range below ``eps`` becomes constant 0.5."""
    return kernels.minmax_normalize(m, eps)


class NonFiniteError(FloatingPointError):
    """A solver produced NaN/Inf; ``step`` is the grid index where it happened."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


def check_finite(z, step=None, what="latent"):
    if not np.all(np.isfinite(z)):
        where = "" if step is None else f" at step {step}"
        raise NonFiniteError(f"non-finite {what}{where}", step)
    return z
