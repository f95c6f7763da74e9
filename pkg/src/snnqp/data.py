"""Synthetic 4-class spatio-temporal Poisson event patterns.

Each sample is a blob that drifts across a ``(2, H, W)`` sensor in one of
four directions (the class). Polarity 0 fires around the current blob
position, polarity 1 around the previous one, and both channels carry
uniform background noise. Per-cell, per-timestep firing is Bernoulli.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DIRECTIONS = ((0, 1), (0, -1), (1, 0), (-1, 0))  # (dy, dx): right, left, down, up


@dataclass(frozen=True)
class SyntheticTask:
    height: int = 12
    width: int = 12
    timesteps: int = 8
    signal_rate: float = 0.8
    noise_rate: float = 0.02
    radius: float = 1.5
    speed: float = 1.0
    trail: int = 2

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (2, self.height, self.width)

    def rate_maps(self, label: int, start: tuple[float, float]) -> np.ndarray:
        dy, dx = DIRECTIONS[label]
        yy, xx = np.mgrid[0:self.height, 0:self.width]
        rates = np.full((self.timesteps, 2, self.height, self.width), self.noise_rate)
        for t in range(self.timesteps):
            for pol, lag in ((0, 0), (1, self.trail)):
                cy = start[0] + dy * self.speed * (t - lag)
                cx = start[1] + dx * self.speed * (t - lag)
                blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= self.radius ** 2
                rates[t, pol][blob] = self.signal_rate
        return rates

    def sample(self, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """``n`` spike trains of shape ``(T, 2, H, W)`` with balanced labels."""
        rng = np.random.default_rng(seed)
        labels = np.arange(n) % len(DIRECTIONS)
        rng.shuffle(labels)
        travel = self.speed * (self.timesteps - 1)
        x = np.zeros((n, self.timesteps, *self.input_shape))
        for i, label in enumerate(labels):
            dy, dx = DIRECTIONS[label]
            # start so that the whole trajectory stays on the sensor
            ys = (travel if dy < 0 else 0.0, self.height - 1 - (travel if dy > 0 else 0.0))
            xs = (travel if dx < 0 else 0.0, self.width - 1 - (travel if dx > 0 else 0.0))
            start = (rng.uniform(*ys), rng.uniform(*xs))
            x[i] = rng.random(x[i].shape) < self.rate_maps(int(label), start)
        return x, labels.astype(np.int64)

    def splits(self, train_size: int, test_size: int, seed: int):
        return self.sample(train_size, seed), self.sample(test_size, seed + 10_007)
