"""Uniform time grids and reproducible per-particle Brownian increments.

Every stochastic quantity in the package is a pure function of a 64-bit seed,
a particle index and a grid.  Streams are counter-based (Philox), so ensembles
are reproducible regardless of evaluation order or thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_SEED = 20240 + 317  # documented default for the CLI --seed flag


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k*h for k = -m ... K covering [-tau, T].

    h = tau/m exactly, and T must be an integer multiple of h.  The m+1
    leading points carry the initial history segment.
    """

    tau: float
    horizon: float
    h: float
    steps_per_delay: int
    n_history: int
    n_steps: int  # K, number of Euler steps on [0, T]

    @property
    def n_points(self) -> int:
        """Total number of grid points, history included."""
        return self.n_history + self.n_steps + 1

    def times(self) -> np.ndarray:
        """All grid times from -tau to T."""
        k = np.arange(-self.n_history, self.n_steps + 1)
        return k * self.h

    def step_times(self) -> np.ndarray:
        """Grid times on [0, T] only."""
        return np.arange(self.n_steps + 1) * self.h

    def index_of(self, t: float) -> int:
        """Index into the full point array of an (exactly) on-grid time."""
        u = t / self.h + self.n_history
        k = int(round(u))
        if not 0 <= k < self.n_points or abs(u - k) > 1e-9:
            raise ValueError(f"t={t} is not a grid point of this grid")
        return k


def make_grid(tau: float, horizon: float, steps_per_delay: int) -> TimeGrid:
    """Build the uniform grid with h = tau/steps_per_delay.

    Raises ValueError unless tau, horizon > 0, steps_per_delay >= 1 and
    horizon is an integer multiple of h (relative tolerance 1e-9).
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    if steps_per_delay < 1:
        raise ValueError(f"steps_per_delay must be >= 1, got {steps_per_delay}")
    h = tau / steps_per_delay
    ratio = horizon / h
    n_steps = round(ratio)
    if n_steps < 1 or abs(ratio - n_steps) > 1e-9 * max(1.0, ratio):
        raise ValueError(
            f"horizon {horizon} is not an integer multiple of the step "
            f"h = tau/m = {h} (ratio {ratio}); choose commensurate tau, T, m"
        )
    return TimeGrid(
        tau=float(tau),
        horizon=float(horizon),
        h=h,
        steps_per_delay=int(steps_per_delay),
        n_history=int(steps_per_delay),
        n_steps=int(n_steps),
    )


@dataclass(frozen=True)
class NoiseStream:
    """Descriptor of one particle's Brownian increment stream.

    Distinct particle indices under the same seed give independent streams;
    the realized increments depend only on (seed, particle_index, grid).
    """

    seed: int
    particle_index: int
    dimension: int

    def generator(self) -> np.random.Generator:
        key = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.particle_index,)
        )
        return np.random.Generator(np.random.Philox(key))


def sample_increments(stream: NoiseStream, grid: TimeGrid) -> np.ndarray:
    """Draw the K Brownian increments of one particle, shape (K, d).

    Each row is N(0, h I_d).  Calling twice with equal arguments returns
    bit-identical arrays.
    """
    gen = stream.generator()
    return gen.normal(
        0.0, np.sqrt(grid.h), size=(grid.n_steps, stream.dimension)
    )


def ensemble_noise(seed: int, n_particles: int, grid: TimeGrid, dim: int) -> np.ndarray:
    """Increments for a whole ensemble, shape (N, K, d).

    Row i is exactly sample_increments(NoiseStream(seed, i, dim), grid), so
    the ensemble noise is a pure function of (seed, N, grid).
    """
    out = np.empty((n_particles, grid.n_steps, dim))
    for i in range(n_particles):
        out[i] = sample_increments(NoiseStream(seed, i, dim), grid)
    return out
