"""Noise level grid for the variance-exploding process."""

import numpy as np

from agd import hashing
from agd.errors import InputError


class NoiseSchedule:
    """Decreasing sigma grid with a terminal zero.

    Levels follow the rho-warped spacing
        sigma_i = (sigma_max^(1/rho) + i/(N-1) * (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho
    for i = 0..N-1, and sigma_N = 0 so the final update lands on the data
    manifold.  `sigmas` therefore has N+1 entries for N sampler steps.
    """

    def __init__(self, num_steps=64, sigma_min=0.01, sigma_max=10.0, rho=7.0):
        if num_steps < 2:
            raise InputError("num_steps must be at least 2")
        if not 0.0 < sigma_min < sigma_max:
            raise InputError("need 0 < sigma_min < sigma_max")
        self.num_steps = int(num_steps)
        self.sigma_min = float(sigma_min)
        self.sigma_max = float(sigma_max)
        self.rho = float(rho)
        i = np.arange(num_steps, dtype=np.float64)
        lo = sigma_min ** (1.0 / rho)
        hi = sigma_max ** (1.0 / rho)
        grid = (hi + i / (num_steps - 1) * (lo - hi)) ** rho
        self.sigmas = np.concatenate([grid, [0.0]])

    def __len__(self):
        return self.num_steps

    def schedule_hash(self):
        head = np.array(
            [self.num_steps, self.sigma_min, self.sigma_max, self.rho],
            dtype=np.float64,
        )
        h = hashing.fnv1a64(head.tobytes())
        return hashing.fnv1a64(self.sigmas.tobytes(), h)

    def draw_log_uniform(self, n, stream):
        """Training-time noise levels: log sigma ~ Unif(log min, log max)."""
        u = stream.random(n)
        return np.exp(
            np.log(self.sigma_min)
            + u * (np.log(self.sigma_max) - np.log(self.sigma_min))
        )
