"""Problem data and pointwise evaluation.

A model bundles the drift b, diffusion sigma, Lyapunov data V, the cost
shape psi, the delay functions and the initial segment xi.  States carry the
current position together with all delayed positions, ordered from most
delayed to current: (x_{-n}, ..., x_{-1}, x_0).

Vectorization contract: V maps arrays of shape (..., d) to shape (...);
gradV maps (..., d) -> (..., d); hessV maps (..., d) -> (..., d, d); psi and
dpsi map elementwise.  All shipped models follow this, which lets measure
functionals evaluate whole ensembles without Python loops.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np


@dataclass(eq=False)
class DelayedState:
    """Joint point of delayed and current positions, shape (n+1, d).

    Row r holds x_{-(n-r)}: row 0 is the most delayed component, the last
    row is the current position x_0.
    """

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError(
                f"DelayedState values must be (n+1, d), got shape {self.values.shape}"
            )

    @property
    def n_delays(self) -> int:
        return self.values.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def current(self) -> np.ndarray:
        """x_0, the undelayed position."""
        return self.values[-1]

    def delayed(self, i: int) -> np.ndarray:
        """x_{-i}, the position delayed by tau_i (i = 1 ... n)."""
        if not 1 <= i <= self.n_delays:
            raise ValueError(f"delay index {i} out of range 1..{self.n_delays}")
        return self.values[-1 - i]


def delayed_state(*components) -> DelayedState:
    """Convenience constructor from scalars or vectors, most delayed first."""
    rows = [np.atleast_1d(np.asarray(c, dtype=float)) for c in components]
    return DelayedState(np.stack(rows))


def component_average_norm(delta: np.ndarray) -> np.ndarray:
    """Average of Euclidean component norms: (1/(n+1)) sum_i |delta_{-i}|.

    delta has shape (..., n+1, d); the result drops the last two axes.
    """
    return np.linalg.norm(delta, axis=-1).mean(axis=-1)


def eval_norm(x: DelayedState, y: DelayedState) -> float:
    """State-space distance (1/(n+1)) sum_i |x_{-i} - y_{-i}|."""
    if x.values.shape != y.values.shape:
        raise ValueError(
            f"shape mismatch: {x.values.shape} vs {y.values.shape}"
        )
    return float(component_average_norm(x.values - y.values))


@dataclass(frozen=True)
class LyapunovSpec:
    """Lyapunov function with analytic derivatives and envelope constants.

    c1 |x|^p <= V(x) <= c2 |x|^p is a declared envelope, checked only by
    probing (see diagnostics).  zeta is the declared generator-growth
    constant.  ZERO_V below is a degenerate instance (V identically 0) kept
    for transport-cost comparisons; it is not a valid Lyapunov certificate.
    """

    V: Callable[[np.ndarray], np.ndarray]
    gradV: Callable[[np.ndarray], np.ndarray]
    hessV: Callable[[np.ndarray], np.ndarray]
    p: float
    c1: float
    c2: float
    zeta: float

    def big_v(self, values: np.ndarray) -> np.ndarray:
        """V summed over all state components: values (..., n+1, d) -> (...)."""
        return np.asarray(self.V(values)).sum(axis=-1)


def quadratic_v(zeta: float = 1.0) -> LyapunovSpec:
    """V(x) = |x|^2 with exact derivatives."""

    def v(x):
        return (np.asarray(x) ** 2).sum(axis=-1)

    def grad(x):
        return 2.0 * np.asarray(x)

    def hess(x):
        x = np.asarray(x)
        d = x.shape[-1]
        eye = 2.0 * np.eye(d)
        return np.broadcast_to(eye, x.shape[:-1] + (d, d)).copy()

    return LyapunovSpec(V=v, gradV=grad, hessV=hess, p=2.0, c1=1.0, c2=1.0, zeta=zeta)


def zero_v() -> LyapunovSpec:
    """Degenerate weight V = 0 (plain psi-transport cost)."""

    def v(x):
        return np.zeros(np.asarray(x).shape[:-1])

    def grad(x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def hess(x):
        x = np.asarray(x)
        d = x.shape[-1]
        return np.zeros(x.shape[:-1] + (d, d))

    return LyapunovSpec(V=v, gradV=grad, hessV=hess, p=1.0, c1=0.0, c2=0.0, zeta=0.0)


@dataclass(frozen=True)
class PsiSpec:
    """Increasing cost shape with psi(0) = 0 and its first derivative."""

    psi: Callable[[np.ndarray], np.ndarray]
    dpsi: Callable[[np.ndarray], np.ndarray]
    name: str = ""


def psi_identity() -> PsiSpec:
    return PsiSpec(psi=lambda r: np.asarray(r, dtype=float),
                   dpsi=lambda r: np.ones_like(np.asarray(r, dtype=float)),
                   name="identity")


def psi_r_plus_half_r2() -> PsiSpec:
    """psi(r) = r + r^2/2, a convex admissible cost shape."""
    return PsiSpec(psi=lambda r: np.asarray(r) * (1.0 + 0.5 * np.asarray(r)),
                   dpsi=lambda r: 1.0 + np.asarray(r, dtype=float),
                   name="r_plus_half_r2")


PSI_SPECS = {
    "identity": psi_identity,
    "r_plus_half_r2": psi_r_plus_half_r2,
}

V_SPECS = {
    "zero": zero_v,
    "quadratic": quadratic_v,
}


@dataclass(frozen=True)
class ModelSpec:
    """Full problem data for one equation.

    drift(state, measure) -> (d,) and diffusion(state) -> (d, d) act on a
    single DelayedState; the diffusion never sees the measure.  delays[i-1]
    is tau_i(t), each mapping [0, T] into (0, tau].  initial_segment(i, t)
    gives particle i's history on [-tau, 0].  lipschitz_k / measure_lipschitz
    _theta are the declared constants of the one-sided Lipschitz condition
    (None when unknown; diagnostics then estimates them).
    """

    name: str
    d: int
    n_delays: int
    tau: float
    delays: tuple
    drift: Callable
    diffusion: Callable
    lyapunov: LyapunovSpec
    psi: PsiSpec
    initial_segment: Callable[[int, float], np.ndarray]
    lipschitz_k: Optional[float] = None
    measure_lipschitz_theta: Optional[float] = None

    def with_delays(self, delays: Sequence[Callable]) -> "ModelSpec":
        return replace(self, delays=tuple(delays), n_delays=len(delays))


def validate_delays(model: ModelSpec, grid) -> None:
    """Reject delay functions leaving (0, tau] anywhere on the [0, T] grid."""
    if len(model.delays) != model.n_delays:
        raise ValueError(
            f"model declares {model.n_delays} delays but carries {len(model.delays)}"
        )
    for i, delay in enumerate(model.delays, start=1):
        taus = np.array([float(delay(t)) for t in grid.step_times()])
        if np.any(taus <= 0.0) or np.any(taus > model.tau * (1 + 1e-12)):
            bad = float(taus[np.argmax((taus <= 0) | (taus > model.tau))])
            raise ValueError(
                f"delay tau_{i} leaves (0, tau={model.tau}] on the grid (value {bad})"
            )


# --- history lookup ---------------------------------------------------------

_SNAP = 1e-9


def grid_position(grid, s: float) -> tuple[int, float]:
    """Locate time s in the full grid: (base index, fractional offset).

    The offset is snapped to 0 when s sits on a grid point to within 1e-9
    steps, so constant grid-aligned delays never interpolate.
    """
    u = s / grid.h + grid.n_history
    base = int(np.floor(u))
    frac = u - base
    if frac < _SNAP:
        frac = 0.0
    elif frac > 1.0 - _SNAP:
        base += 1
        frac = 0.0
    if base < 0 or base + (1 if frac > 0.0 else 0) > grid.n_points - 1:
        raise ValueError(
            f"time {s} outside the stored range [{-grid.tau}, {grid.horizon}]"
        )
    return base, frac


def interpolate_values(grid, values: np.ndarray, s: float) -> np.ndarray:
    """Value at time s from stored grid values, linear between points."""
    base, frac = grid_position(grid, s)
    if frac == 0.0:
        return values[base]
    return (1.0 - frac) * values[base] + frac * values[base + 1]


def eval_history(model: ModelSpec, path, t: float, delay_i: int) -> np.ndarray:
    """X(t - tau_i(t)) read from a stored path.

    Exact grid lookup when the delayed time is a grid point, linear
    interpolation otherwise.  Raises when the lookup falls before -tau.
    """
    if not 1 <= delay_i <= model.n_delays:
        raise ValueError(f"delay index {delay_i} out of range 1..{model.n_delays}")
    s = t - float(model.delays[delay_i - 1](t))
    return interpolate_values(path.grid, path.values, s)


def delayed_state_at(model: ModelSpec, path, t: float) -> DelayedState:
    """Assemble (X(t-tau_n(t)), ..., X(t-tau_1(t)), X(t)) from a path."""
    rows = [eval_history(model, path, t, i) for i in range(model.n_delays, 0, -1)]
    rows.append(interpolate_values(path.grid, path.values, t))
    return DelayedState(np.stack(rows))


# --- generator --------------------------------------------------------------

def eval_generator(x: DelayedState, mu, model: ModelSpec) -> float:
    """L V at one point: gradV(x0).b(x, mu) + (1/2) tr(sigma^T hessV(x0) sigma)."""
    x0 = x.current
    b = np.asarray(model.drift(x, mu), dtype=float)
    if b.shape != (model.d,):
        raise ValueError(f"drift returned shape {b.shape}, expected ({model.d},)")
    sig = np.asarray(model.diffusion(x), dtype=float)
    if sig.shape != (model.d, model.d):
        raise ValueError(
            f"diffusion returned shape {sig.shape}, expected ({model.d}, {model.d})"
        )
    grad = np.asarray(model.lyapunov.gradV(x0), dtype=float)
    hess = np.asarray(model.lyapunov.hessV(x0), dtype=float)
    return float(grad @ b + 0.5 * np.trace(sig.T @ hess @ sig))


# --- finite-difference fallback (diagnostics only) ---------------------------

def fd_gradient(V: Callable, x: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient; for cross-checking analytic derivatives."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for j in range(x.shape[-1]):
        step = rel_step * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += step
        xm[j] -= step
        out[j] = (float(V(xp)) - float(V(xm))) / (2 * step)
    return out


def fd_hessian(V: Callable, x: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    out = np.empty((d, d))
    for j in range(d):
        step = rel_step * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += step
        xm[j] -= step
        out[j] = (fd_gradient(V, xp, rel_step) - fd_gradient(V, xm, rel_step)) / (2 * step)
    return 0.5 * (out + out.T)
