"""Frozen-flow Euler-Maruyama integration by the method of steps.

The candidate measure flow is held fixed while each particle is integrated:
X_{k+1} = X_k + b(state_k, mu_{t_k}) h + sigma(state_k) dW_k, with the
delayed components of state_k read from the already-computed part of the
path.  The measure is frozen left-constant over each step, matching the
flow's interpolation convention.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._parallel import parallel_map
from .measure import FLOAT_FMT, MeasureFlow
from .model import (
    DelayedState,
    LyapunovSpec,
    ModelSpec,
    interpolate_values,
    validate_delays,
)
from .stochastics import NoiseStream, TimeGrid, ensemble_noise, sample_increments


class BlowupError(RuntimeError):
    """Non-finite drift, diffusion or state during integration."""

    def __init__(self, message: str, particle_index: int, step: int):
        super().__init__(message)
        self.particle_index = particle_index
        self.step = step


@dataclass(eq=False)
class ParticlePath:
    """One particle's trajectory on the full grid [-tau, T]."""

    grid: TimeGrid
    values: np.ndarray  # (n_points, d)
    particle_index: int

    def value_at(self, t: float) -> np.ndarray:
        return interpolate_values(self.grid, self.values, t)

    def at_step(self, k: int) -> np.ndarray:
        """Value at grid time t_k (k may be negative back to -m)."""
        return self.values[k + self.grid.n_history]


def _constant_lags(model: ModelSpec, grid: TimeGrid) -> list:
    """Integer grid lags for delays that are constant and grid-aligned.

    Entry i is the lag of tau_{i+1} in steps, or None when the delay varies
    in time or is not commensurate with h (those fall back to interpolation).
    """
    lags = []
    probe_times = grid.step_times()[:: max(1, grid.n_steps // 7)]
    for delay in model.delays:
        vals = [float(delay(t)) for t in probe_times]
        if max(vals) - min(vals) > 0.0:
            lags.append(None)
            continue
        ratio = vals[0] / grid.h
        lag = round(ratio)
        if lag >= 1 and abs(ratio - lag) <= 1e-9 * max(1.0, ratio):
            lags.append(lag)
        else:
            lags.append(None)
    return lags


def _fill_history(model: ModelSpec, grid: TimeGrid, particle_index: int) -> np.ndarray:
    values = np.full((grid.n_points, model.d), np.nan)
    for k in range(-grid.n_history, 1):
        xi = np.asarray(model.initial_segment(particle_index, k * grid.h), dtype=float)
        values[k + grid.n_history] = xi
    return values


def history_only_path(model: ModelSpec, grid: TimeGrid, particle_index: int) -> ParticlePath:
    """Path holding only the initial segment; post-0 values are NaN."""
    return ParticlePath(
        grid=grid,
        values=_fill_history(model, grid, particle_index),
        particle_index=particle_index,
    )


def ensemble_states_at_step(model: ModelSpec, grid: TimeGrid,
                            stacked_values: np.ndarray, k: int) -> np.ndarray:
    """Delayed states of a whole ensemble at grid step k, shape (N, n+1, d).

    stacked_values is (N, n_points, d).  Delays are deterministic in t, so
    the lookup position is shared by all particles and each component is one
    vectorized gather (or a two-point interpolation).
    """
    from .model import grid_position

    t = k * grid.h
    m = grid.n_history
    rows = []
    for i in range(model.n_delays, 0, -1):
        s = t - float(model.delays[i - 1](t))
        base, frac = grid_position(grid, s)
        if frac == 0.0:
            rows.append(stacked_values[:, base])
        else:
            rows.append((1.0 - frac) * stacked_values[:, base]
                        + frac * stacked_values[:, base + 1])
    rows.append(stacked_values[:, m + k])
    return np.stack(rows, axis=1)


def solve_frozen(model: ModelSpec, flow: MeasureFlow, grid: TimeGrid,
                 increments: np.ndarray, particle_index: int = 0) -> ParticlePath:
    """Integrate one particle under a frozen measure flow.

    increments has shape (K, d) and is consumed one row per step; supplying
    it explicitly lets callers share one noise realization across repeated
    solves (Picard iterations compare solutions driven by the same noise).
    """
    increments = np.asarray(increments, dtype=float)
    if increments.shape != (grid.n_steps, model.d):
        raise ValueError(
            f"increments shape {increments.shape}, expected ({grid.n_steps}, {model.d})"
        )
    validate_delays(model, grid)
    lags = _constant_lags(model, grid)
    m = grid.n_history
    h = grid.h
    values = _fill_history(model, grid, particle_index)
    path = ParticlePath(grid=grid, values=values, particle_index=particle_index)

    state_rows = np.empty((model.n_delays + 1, model.d))
    for k in range(grid.n_steps):
        t = k * h
        for slot, i in enumerate(range(model.n_delays, 0, -1)):
            lag = lags[i - 1]
            if lag is not None:
                state_rows[slot] = values[m + k - lag]
            else:
                s = t - float(model.delays[i - 1](t))
                state_rows[slot] = interpolate_values(grid, values, s)
        state_rows[-1] = values[m + k]
        state = DelayedState(state_rows)

        mu = flow.at_step(k)
        b = np.asarray(model.drift(state, mu), dtype=float)
        sig = np.asarray(model.diffusion(state), dtype=float)
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(sig))):
            raise BlowupError(
                f"non-finite drift/diffusion at step {k} (t={t}), "
                f"particle {particle_index}",
                particle_index, k,
            )
        values[m + k + 1] = values[m + k] + b * h + sig @ increments[k]
        if not np.all(np.isfinite(values[m + k + 1])):
            raise BlowupError(
                f"non-finite state at step {k + 1}, particle {particle_index}",
                particle_index, k,
            )
    return path


def solve_ensemble_frozen(model: ModelSpec, flow: MeasureFlow, seed: int,
                          n_particles: int, grid: TimeGrid,
                          noise: Optional[np.ndarray] = None,
                          noise_indices: Optional[Sequence[int]] = None,
                          threads: int = 1) -> list:
    """N independent frozen-flow solves; particle i is driven by stream (seed, i).

    noise, when given, overrides stream sampling (shape (N, K, d)).
    noise_indices remaps which stream drives which particle; the default is
    the identity 0..N-1.
    """
    if noise is None:
        indices = list(noise_indices) if noise_indices is not None else list(range(n_particles))
        noise = np.stack([
            sample_increments(NoiseStream(seed, j, model.d), grid) for j in indices
        ])
    if noise.shape[0] != n_particles:
        raise ValueError(f"noise carries {noise.shape[0]} particles, expected {n_particles}")

    def one(i):
        return solve_frozen(model, flow, grid, noise[i], particle_index=i)

    return parallel_map(one, range(n_particles), threads)


def ensemble_xi_v_norm(paths: Sequence[ParticlePath], lyapunov: LyapunovSpec) -> float:
    """Estimate E[sup_{u in [-tau,0]} V(xi(u))] from the stored history segments."""
    m = paths[0].grid.n_history
    sups = [np.max(lyapunov.V(p.values[: m + 1])) for p in paths]
    return float(np.mean(sups))


def write_paths_csv(paths: Sequence[ParticlePath], fh: io.TextIOBase) -> None:
    """Long-format dump: columns particle, t, x_1 ... x_d over the full grid."""
    d = paths[0].values.shape[1]
    header = ["particle", "t"] + [f"x_{j + 1}" for j in range(d)]
    fh.write(",".join(header) + "\n")
    times = paths[0].grid.times()
    for p in paths:
        for t, row in zip(times, p.values):
            vals = ",".join(FLOAT_FMT % v for v in row)
            fh.write(f"{p.particle_index},{FLOAT_FMT % t},{vals}\n")
