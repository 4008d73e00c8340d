"""Self-consistent interacting-particle simulation.

Unlike the frozen-flow solver, the drift here reads the running ensemble's
own empirical joint law: at each step the measure is rebuilt from all
current paths (a synchronization barrier), then every particle advances one
Euler step against that immutable snapshot.  As the ensemble grows this
approximates the distribution-dependent dynamics whose law the Picard
iteration computes.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ._parallel import parallel_map
from .measure import EmpiricalMeasure
from .model import DelayedState, ModelSpec, validate_delays
from .solver import (
    BlowupError,
    ParticlePath,
    _fill_history,
    ensemble_states_at_step,
)
from .stochastics import NoiseStream, TimeGrid, sample_increments


def simulate_particles(model: ModelSpec, seed: int, n_particles: int,
                       grid: TimeGrid, noise: Optional[np.ndarray] = None,
                       noise_indices: Optional[Sequence[int]] = None,
                       threads: int = 1) -> list:
    """Lock-step Euler simulation of the N-particle system.

    Every particle's drift sees the full current empirical measure (no
    leave-one-out correction; the O(1/N) self-interaction bias is accepted
    and documented).  Particle i is driven by stream (seed, i), so output is
    independent of thread count.
    """
    validate_delays(model, grid)
    if noise is None:
        indices = list(noise_indices) if noise_indices is not None else list(range(n_particles))
        noise = np.stack([
            sample_increments(NoiseStream(seed, j, model.d), grid) for j in indices
        ])
    if noise.shape != (n_particles, grid.n_steps, model.d):
        raise ValueError(
            f"noise shape {noise.shape}, expected ({n_particles}, {grid.n_steps}, {model.d})"
        )

    m = grid.n_history
    h = grid.h
    values = np.stack([_fill_history(model, grid, i) for i in range(n_particles)])

    for k in range(grid.n_steps):
        states = ensemble_states_at_step(model, grid, values, k)
        measure = EmpiricalMeasure(states.copy())

        def advance(i):
            state = DelayedState(states[i])
            b = np.asarray(model.drift(state, measure), dtype=float)
            sig = np.asarray(model.diffusion(state), dtype=float)
            return b, sig

        moves = parallel_map(advance, range(n_particles), threads)
        drifts = np.stack([mv[0] for mv in moves])
        sigs = np.stack([mv[1] for mv in moves])
        if not (np.all(np.isfinite(drifts)) and np.all(np.isfinite(sigs))):
            bad = int(np.argmax(~(
                np.all(np.isfinite(drifts.reshape(n_particles, -1)), axis=1)
                & np.all(np.isfinite(sigs.reshape(n_particles, -1)), axis=1)
            )))
            raise BlowupError(
                f"non-finite drift/diffusion at step {k}, particle {bad}",
                bad, k,
            )
        values[:, m + k + 1] = (
            values[:, m + k] + drifts * h
            + np.einsum("nij,nj->ni", sigs, noise[:, k])
        )
        if not np.all(np.isfinite(values[:, m + k + 1])):
            bad = int(np.argmax(~np.all(
                np.isfinite(values[:, m + k + 1]), axis=1)))
            raise BlowupError(
                f"non-finite state at step {k + 1}, particle {bad}", bad, k,
            )

    return [
        ParticlePath(grid=grid, values=values[i], particle_index=i)
        for i in range(n_particles)
    ]
