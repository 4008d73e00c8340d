"""Error-vs-parameter sweeps: strong order in the step size and
fixed-point/particle agreement in the ensemble size.

The strong-order sweep couples each coarse run to a reference on a grid
refined 64-fold by block-summing the reference's Brownian increments, so the
comparison is pathwise.  Coarse paths go through the production solver; only
the fine reference uses a dedicated vectorized integrator (validated against
the solver in the test suite) to keep the sweep affordable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .fixedpoint import picard_iterate
from .measure import (
    EmpiricalMeasure,
    constant_flow,
    empirical_from_ensemble,
    wasserstein_psi_v,
)
from .model import ModelSpec, psi_identity, zero_v
from .models import delayed_ou
from .particle import simulate_particles
from .solver import solve_ensemble_frozen
from .stochastics import TimeGrid, ensemble_noise, make_grid

PARTICLE_SEED_OFFSET = 1  # picard runs at 2*seed, the particle system at 2*seed+1


def integrate_delayed_ou_ensemble(a_coef: float, c_coef: float, sigma: float,
                                  grid: TimeGrid, xi0: float,
                                  noise: np.ndarray) -> np.ndarray:
    """Vectorized Euler for the scalar delayed OU drift -a x_0 - c x_{-1}.

    noise is (N, K, 1); returns the full value matrix (N, n_points).  The
    constant delay tau is exactly n_history steps on any commensurate grid.
    """
    n_paths = noise.shape[0]
    m = grid.n_history
    h = grid.h
    values = np.empty((n_paths, grid.n_points))
    values[:, : m + 1] = xi0
    dw = noise[:, :, 0]
    for k in range(grid.n_steps):
        cur = values[:, m + k]
        lag = values[:, k]  # index m + k - m
        values[:, m + k + 1] = cur + (-a_coef * cur - c_coef * lag) * h + sigma * dw[:, k]
    return values


def block_sum_noise(noise_fine: np.ndarray, refine: int) -> np.ndarray:
    """Coarse increments as sums of refine consecutive fine increments."""
    n, k_fine, d = noise_fine.shape
    if k_fine % refine != 0:
        raise ValueError(f"{k_fine} fine steps do not split into blocks of {refine}")
    return noise_fine.reshape(n, k_fine // refine, refine, d).sum(axis=2)


@dataclass
class StrongOrderResult:
    steps: list  # h values
    rms_errors: list
    order: float


def strong_order_sweep(tau: float = 0.5, horizon: float = 1.0,
                       a_coef: float = 1.0, c_coef: float = 0.5,
                       sigma: float = 0.3, xi0: float = 1.0,
                       m_values: Sequence[int] = (16, 32, 64, 128, 256),
                       n_paths: int = 1000, seed: int = 2024,
                       refine: int = 64, threads: int = 1) -> StrongOrderResult:
    """Pathwise RMS error at T of the solver against a 64x-refined reference.

    The order is the negated slope of log2(rms) against log2(h) by least
    squares; additive noise should give an observed order close to 1.
    """
    model = delayed_ou(a_coef=a_coef, c_coef=c_coef, sigma=sigma,
                       tau=tau, xi0=xi0)
    dummy_flow_atoms = np.zeros((1, model.n_delays + 1, model.d))
    steps, errors = [], []
    for m in m_values:
        grid_c = make_grid(tau, horizon, m)
        grid_f = make_grid(tau, horizon, m * refine)
        noise_f = ensemble_noise(seed, n_paths, grid_f, 1)
        noise_c = block_sum_noise(noise_f, refine)

        ref_values = integrate_delayed_ou_ensemble(
            a_coef, c_coef, sigma, grid_f, xi0, noise_f)
        flow = constant_flow(EmpiricalMeasure(dummy_flow_atoms), grid_c)
        coarse = solve_ensemble_frozen(model, flow, seed, n_paths, grid_c,
                                       noise=noise_c, threads=threads)
        x_coarse = np.array([p.values[-1, 0] for p in coarse])
        x_ref = ref_values[:, -1]
        rms = float(np.sqrt(np.mean((x_coarse - x_ref) ** 2)))
        steps.append(grid_c.h)
        errors.append(rms)

    slope = np.polyfit(np.log2(steps), np.log2(errors), 1)[0]
    return StrongOrderResult(steps=steps, rms_errors=errors, order=float(slope))


def fixpoint_particle_gap(model: ModelSpec, grid: TimeGrid, n_particles: int,
                          seed: int, tol: float = 1e-3, max_iter: int = 50,
                          threads: int = 1) -> float:
    """Terminal-law W1 between the Picard fixed point and the particle system.

    The two simulators run on distinct noise (seeds 2s and 2s+1): with shared
    noise the converged fixed point coincides with the particle system
    exactly, which would only measure the Picard stopping tolerance.
    """
    report = picard_iterate(model, 2 * seed, n_particles, grid,
                            tol=tol, max_iter=max_iter, threads=threads)
    paths = simulate_particles(model, 2 * seed + PARTICLE_SEED_OFFSET,
                               n_particles, grid, threads=threads)
    terminal_fixed = report.final_flow.measures[-1]
    terminal_direct = empirical_from_ensemble(paths, grid.horizon, model)
    return wasserstein_psi_v(terminal_fixed, terminal_direct,
                             psi_identity(), zero_v())


@dataclass
class ParticleGapResult:
    n_values: list
    medians: list
    gaps: dict  # n -> list over seeds


def fixpoint_particle_sweep(model: ModelSpec, grid: TimeGrid,
                            n_values: Sequence[int] = (64, 128, 256),
                            seeds: Sequence[int] = tuple(range(20)),
                            tol: float = 1e-3, max_iter: int = 50,
                            threads: int = 1) -> ParticleGapResult:
    """Median over seeds of the terminal-law gap for each ensemble size."""
    gaps = {}
    medians = []
    for n in n_values:
        vals = [
            fixpoint_particle_gap(model, grid, n, seed, tol=tol,
                                  max_iter=max_iter, threads=threads)
            for seed in seeds
        ]
        gaps[n] = vals
        medians.append(float(np.median(vals)))
    return ParticleGapResult(n_values=list(n_values), medians=medians, gaps=gaps)
