"""Empirical measures on the joint delayed state space and transport metrics.

The metric between equal-size empirical measures is computed exactly as an
optimal assignment under the weighted cost psi(||x-y||)(1 + V(x) + V(y));
no 1-d sorting shortcut is used because the V-weights break monotonicity of
the optimal coupling.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from ._parallel import parallel_map
from .model import (
    DelayedState,
    LyapunovSpec,
    ModelSpec,
    PsiSpec,
    component_average_norm,
    delayed_state_at,
)

FLOAT_FMT = "%.17g"


@dataclass(eq=False)
class EmpiricalMeasure:
    """Equal-weight atoms on the delayed state space, shape (N, n+1, d)."""

    atoms: np.ndarray

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=float)
        if self.atoms.ndim != 3 or self.atoms.shape[0] < 1:
            raise ValueError(
                f"atoms must have shape (N, n+1, d) with N >= 1, got {self.atoms.shape}"
            )

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_components(self) -> int:
        return self.atoms.shape[1]

    @property
    def dim(self) -> int:
        return self.atoms.shape[2]

    def marginal(self, i: int) -> np.ndarray:
        """Atoms of the x_{-i} marginal, shape (N, d); i = 0 is current."""
        n = self.n_components - 1
        if not 0 <= i <= n:
            raise ValueError(f"marginal index {i} out of range 0..{n}")
        return self.atoms[:, n - i, :]

    def states(self):
        return [DelayedState(a) for a in self.atoms]


def mu_of_v(mu: EmpiricalMeasure, lyapunov: LyapunovSpec) -> float:
    """mu(V): average over atoms of V summed over all state components."""
    return float(lyapunov.big_v(mu.atoms).mean())


def transport_cost(x: DelayedState, y: DelayedState, psi: PsiSpec,
                   lyapunov: LyapunovSpec) -> float:
    """psi(||x - y||) * (1 + V(x) + V(y)) for a single atom pair."""
    if x.values.shape != y.values.shape:
        raise ValueError(
            f"shape mismatch: {x.values.shape} vs {y.values.shape}"
        )
    r = component_average_norm(x.values - y.values)
    weight = 1.0 + lyapunov.big_v(x.values) + lyapunov.big_v(y.values)
    return float(psi.psi(r) * weight)


def cost_matrix(mu: EmpiricalMeasure, nu: EmpiricalMeasure, psi: PsiSpec,
                lyapunov: LyapunovSpec) -> np.ndarray:
    """All pairwise transport costs, shape (N_mu, N_nu)."""
    if mu.atoms.shape[1:] != nu.atoms.shape[1:]:
        raise ValueError(
            f"atom shape mismatch: {mu.atoms.shape[1:]} vs {nu.atoms.shape[1:]}"
        )
    delta = mu.atoms[:, None, :, :] - nu.atoms[None, :, :, :]
    r = component_average_norm(delta)
    vx = lyapunov.big_v(mu.atoms)
    vy = lyapunov.big_v(nu.atoms)
    return np.asarray(psi.psi(r)) * (1.0 + vx[:, None] + vy[None, :])


def wasserstein_psi_v(mu: EmpiricalMeasure, nu: EmpiricalMeasure, psi: PsiSpec,
                      lyapunov: LyapunovSpec) -> float:
    """Exact weighted transport distance between equal-size atom sets.

    With equal weights 1/N the optimal coupling is an assignment, so the
    Hungarian-class solver returns the exact infimum over couplings.
    """
    if mu.n_atoms != nu.n_atoms:
        raise ValueError(
            f"atom counts differ ({mu.n_atoms} vs {nu.n_atoms}); "
            "resample to a common N before comparing"
        )
    cost = cost_matrix(mu, nu, psi, lyapunov)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / mu.n_atoms)


@dataclass(eq=False)
class MeasureFlow:
    """One empirical measure per grid time on [0, T], constant-left in time."""

    grid: object
    measures: Sequence[EmpiricalMeasure]

    def __post_init__(self):
        if len(self.measures) != self.grid.n_steps + 1:
            raise ValueError(
                f"flow needs {self.grid.n_steps + 1} measures for this grid, "
                f"got {len(self.measures)}"
            )

    @property
    def n_atoms(self) -> int:
        return self.measures[0].n_atoms

    def at_step(self, k: int) -> EmpiricalMeasure:
        return self.measures[k]

    def at_time(self, t: float) -> EmpiricalMeasure:
        """Measure governing time t: the grid measure at or left of t."""
        if t < -1e-9 or t > self.grid.horizon + 1e-9:
            raise ValueError(f"t={t} outside [0, {self.grid.horizon}]")
        k = min(int(np.floor(t / self.grid.h + 1e-9)), self.grid.n_steps)
        return self.measures[max(k, 0)]


def constant_flow(measure: EmpiricalMeasure, grid) -> MeasureFlow:
    """Flow freezing one measure at every grid time."""
    return MeasureFlow(grid=grid, measures=[measure] * (grid.n_steps + 1))


def _check_same_grid(a: MeasureFlow, b: MeasureFlow) -> None:
    ga, gb = a.grid, b.grid
    if (ga.h, ga.n_steps, ga.n_history) != (gb.h, gb.n_steps, gb.n_history):
        raise ValueError("flows live on different grids")
    if a.n_atoms != b.n_atoms:
        raise ValueError(f"flows carry {a.n_atoms} vs {b.n_atoms} atoms")


def flow_distance_profile(mu: MeasureFlow, nu: MeasureFlow, psi: PsiSpec,
                          lyapunov: LyapunovSpec, threads: int = 1) -> np.ndarray:
    """W_{psi,V}(mu_t, nu_t) at every grid time, shape (K+1,)."""
    _check_same_grid(mu, nu)

    def one(k):
        return wasserstein_psi_v(mu.measures[k], nu.measures[k], psi, lyapunov)

    return np.array(parallel_map(one, range(mu.grid.n_steps + 1), threads))


def flow_distance_lambda(mu: MeasureFlow, nu: MeasureFlow, lam: float,
                         psi: PsiSpec, lyapunov: LyapunovSpec,
                         threads: int = 1) -> float:
    """sup_t e^{-lambda t} W_{psi,V}(mu_t, nu_t) over the grid."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    profile = flow_distance_profile(mu, nu, psi, lyapunov, threads)
    return discounted_sup(profile, mu.grid, lam)


def discounted_sup(profile: np.ndarray, grid, lam: float) -> float:
    """max_k e^{-lambda t_k} profile_k for a per-time distance profile."""
    return float(np.max(np.exp(-lam * grid.step_times()) * profile))


def empirical_from_ensemble(paths: Sequence, t: float, model: ModelSpec) -> EmpiricalMeasure:
    """Joint empirical law of (delayed..., current) positions at time t."""
    grid = paths[0].grid
    if t < -1e-9 or t > grid.horizon + 1e-9:
        raise ValueError(f"t={t} outside [0, {grid.horizon}]")
    atoms = np.stack([delayed_state_at(model, p, t).values for p in paths])
    return EmpiricalMeasure(atoms)


# --- CSV serialization -------------------------------------------------------

def measure_header(n_delays: int, dim: int) -> list:
    cols = ["particle"]
    for i in range(n_delays, 0, -1):
        cols += [f"x_m{i}_{j + 1}" for j in range(dim)]
    cols += [f"x_0_{j + 1}" for j in range(dim)]
    return cols


def write_measure_csv(mu: EmpiricalMeasure, fh: io.TextIOBase) -> None:
    """One row per atom: particle index then all components, 17 sig digits."""
    n, d = mu.n_components - 1, mu.dim
    fh.write(",".join(measure_header(n, d)) + "\n")
    for i, atom in enumerate(mu.atoms):
        vals = ",".join(FLOAT_FMT % v for v in atom.reshape(-1))
        fh.write(f"{i},{vals}\n")


def read_measure_csv(fh: io.TextIOBase) -> EmpiricalMeasure:
    header = fh.readline().strip().split(",")
    if not header or header[0] != "particle":
        raise ValueError("not a measure CSV: first column must be 'particle'")
    n_cols = len(header) - 1
    dim = sum(1 for c in header if c.startswith("x_0_"))
    if dim == 0 or n_cols % dim != 0:
        raise ValueError(f"malformed measure header: {header}")
    rows = []
    for line in fh:
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        rows.append([float(v) for v in parts[1:]])
    atoms = np.array(rows).reshape(len(rows), n_cols // dim, dim)
    return EmpiricalMeasure(atoms)
