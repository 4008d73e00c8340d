"""Numerical probes of the model assumptions and growth bounds.

Nothing here is symbolic: each check evaluates the claimed inequality on a
caller-supplied sample set and reports the worst ratio together with the
witness achieving it.  Deterministic identities are held to 1e-12; statements
about expectations get three Monte Carlo standard errors of slack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._parallel import parallel_map
from .measure import (
    EmpiricalMeasure,
    MeasureFlow,
    mu_of_v,
    wasserstein_psi_v,
)
from .model import (
    DelayedState,
    ModelSpec,
    component_average_norm,
    eval_generator,
)
from .solver import (
    ensemble_states_at_step,
    ensemble_xi_v_norm,
    solve_ensemble_frozen,
)
from .stochastics import TimeGrid, ensemble_noise

EXACT_TOL = 1e-12


@dataclass
class ProbeReport:
    """Outcome of probing one assumption on a sample set.

    worst_violation is the excess of the worst sample over the declared
    constant (-inf when the model declares none, so nothing can be
    violated).  The witness carries the exact inputs of the worst sample and
    re-evaluating them reproduces the reported ratio.
    """

    samples: int
    estimated_constant: float
    worst_violation: float
    witness: Optional[object] = None
    declared_constant: Optional[float] = None
    inconclusive: bool = False
    details: dict = field(default_factory=dict)

    @property
    def violated(self) -> bool:
        return self.worst_violation > EXACT_TOL


@dataclass
class LyapunovWitness:
    state: DelayedState
    measure: EmpiricalMeasure
    ratio: float
    part: str  # "generator" or "noise_gradient"


@dataclass
class LipschitzWitness:
    x: DelayedState
    y: DelayedState
    mu: EmpiricalMeasure
    nu: EmpiricalMeasure
    lhs: float
    rhs: float
    ratio: float


def lyapunov_ratios(model: ModelSpec, state: DelayedState,
                    measure: EmpiricalMeasure) -> tuple:
    """(generator ratio, noise-gradient ratio) of one sample."""
    big_v = float(model.lyapunov.big_v(state.values))
    gen = eval_generator(state, measure, model)
    r_gen = gen / (1.0 + mu_of_v(measure, model.lyapunov) + big_v)
    x0 = state.current
    sig = np.asarray(model.diffusion(state), dtype=float)
    push = sig @ np.asarray(model.lyapunov.gradV(x0), dtype=float)
    r_noise = float(np.linalg.norm(push)) / (1.0 + float(model.lyapunov.V(x0)))
    return r_gen, r_noise


def check_lyapunov(model: ModelSpec, sample_points: Sequence[DelayedState],
                   sample_measures: Sequence[EmpiricalMeasure]) -> ProbeReport:
    """Estimate the growth constant over samples and flag declared violations.

    Point i is paired with measure i mod len(sample_measures).  The estimate
    is the max over samples of both the generator ratio LV / (1 + mu(V) +
    V(x)) and the noise-gradient ratio |sigma gradV(x0)| / (1 + V(x0)).
    """
    declared = model.lyapunov.zeta
    best = -math.inf
    witness = None
    for i, state in enumerate(sample_points):
        measure = sample_measures[i % len(sample_measures)]
        r_gen, r_noise = lyapunov_ratios(model, state, measure)
        for ratio, part in ((r_gen, "generator"), (r_noise, "noise_gradient")):
            if ratio > best:
                best = ratio
                witness = LyapunovWitness(state=state, measure=measure,
                                          ratio=ratio, part=part)
    violation = best - declared if declared is not None else -math.inf
    return ProbeReport(
        samples=len(sample_points),
        estimated_constant=best,
        worst_violation=violation,
        witness=witness,
        declared_constant=declared,
    )


def lipschitz_sides(model: ModelSpec, x: DelayedState, y: DelayedState,
                    mu: EmpiricalMeasure, nu: EmpiricalMeasure,
                    w_dist: Optional[float] = None) -> tuple:
    """(lhs, |x0-y0| K-part, |x0-y0| W-part) of the one-sided condition."""
    bx = np.asarray(model.drift(x, mu), dtype=float)
    by = np.asarray(model.drift(y, nu), dtype=float)
    sx = np.asarray(model.diffusion(x), dtype=float)
    sy = np.asarray(model.diffusion(y), dtype=float)
    dx0 = x.current - y.current
    lhs = max(0.0, float(dx0 @ (bx - by))) + 0.5 * float(np.sum((sx - sy) ** 2))
    gap = float(np.linalg.norm(dx0))
    if w_dist is None:
        w_dist = wasserstein_psi_v(mu, nu, model.psi, model.lyapunov)
    state_part = gap * float(component_average_norm(x.values - y.values))
    measure_part = gap * w_dist
    return lhs, state_part, measure_part


def check_lipschitz(model: ModelSpec,
                    sample_pairs: Sequence,
                    sample_measure_pairs: Sequence,
                    k: Optional[float] = None,
                    theta: Optional[float] = None) -> ProbeReport:
    """Probe the one-sided Lipschitz condition over state and measure pairs.

    Pairs with x0 = y0 are skipped (the condition is vacuous there); if all
    are degenerate the report is flagged inconclusive.  k/theta default to
    the model's declared constants; when neither is declared the report only
    estimates the smallest (K, theta) compatible with the samples (details
    keys estimated_k / estimated_theta) and declares no violation.
    """
    k = model.lipschitz_k if k is None else k
    theta = model.measure_lipschitz_theta if theta is None else theta
    declared = None if (k is None or theta is None) else True

    w_cache = {}
    rows = []  # (lhs, state_part, measure_part, pair index, measure index)
    skipped = 0
    for i, (x, y) in enumerate(sample_pairs):
        j = i % len(sample_measure_pairs)
        mu, nu = sample_measure_pairs[j]
        if j not in w_cache:
            w_cache[j] = wasserstein_psi_v(mu, nu, model.psi, model.lyapunov)
        if float(np.linalg.norm(x.current - y.current)) == 0.0:
            skipped += 1
            continue
        lhs, state_part, measure_part = lipschitz_sides(
            model, x, y, mu, nu, w_dist=w_cache[j])
        rows.append((lhs, state_part, measure_part, i, j))

    if not rows:
        return ProbeReport(samples=0, estimated_constant=math.nan,
                           worst_violation=-math.inf, inconclusive=True,
                           details={"skipped": skipped})

    lhs = np.array([r[0] for r in rows])
    state_part = np.array([r[1] for r in rows])
    measure_part = np.array([r[2] for r in rows])

    est_k, est_theta = _fit_constants(lhs, state_part, measure_part)
    details = {"estimated_k": est_k, "estimated_theta": est_theta,
               "skipped": skipped}

    if declared is None:
        return ProbeReport(samples=len(rows), estimated_constant=est_k,
                           worst_violation=-math.inf, details=details)

    denom = k * state_part + theta * measure_part
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(denom > 0.0, lhs / denom,
                          np.where(lhs > EXACT_TOL, math.inf, 0.0))
    worst = int(np.argmax(ratios))
    _, _, _, pair_idx, meas_idx = rows[worst]
    x, y = sample_pairs[pair_idx]
    mu, nu = sample_measure_pairs[meas_idx]
    witness = LipschitzWitness(
        x=x, y=y, mu=mu, nu=nu,
        lhs=float(lhs[worst]), rhs=float(denom[worst]),
        ratio=float(ratios[worst]),
    )
    return ProbeReport(
        samples=len(rows),
        estimated_constant=float(np.max(ratios)),
        worst_violation=float(np.max(ratios)) - 1.0,
        witness=witness,
        declared_constant=1.0,
        details=details,
    )


def _fit_constants(lhs, state_part, measure_part) -> tuple:
    """Smallest (K, theta) with lhs <= K*state_part + theta*measure_part.

    For each theta on a coarse geometric grid the minimal K is closed-form;
    the (K, theta) with the smallest sum wins.
    """
    thetas = np.concatenate([[0.0], 2.0 ** np.arange(-8, 9, dtype=float)])
    best = (math.inf, math.inf)
    for theta in thetas:
        resid = lhs - theta * measure_part
        with np.errstate(divide="ignore", invalid="ignore"):
            need = np.where(state_part > 0.0, resid / state_part,
                            np.where(resid > EXACT_TOL, math.inf, 0.0))
        k = max(0.0, float(np.max(need)))
        if math.isfinite(k) and k + theta < best[0] + best[1]:
            best = (k, float(theta))
    return best


# --- moment bound -------------------------------------------------------------

def moment_bound_formula(ev0: float, zeta: float, horizon: float,
                         xi_v_norm: float, n_delays: int = 1) -> float:
    """Growth bound (E V(X0) + zeta T + 2 n zeta E||xi||_V) e^{2(n+1) zeta T}.

    n is the number of delay terms; n = 1 gives the two-component bound
    (E V(X0) + zeta T + 2 zeta E||xi||_V) e^{4 zeta T}.
    """
    return (ev0 + zeta * horizon
            + 2.0 * n_delays * zeta * xi_v_norm) * math.exp(
                2.0 * (n_delays + 1) * zeta * horizon)


def moment_bound(model: ModelSpec, ensemble: Sequence) -> tuple:
    """(observed, bound): sup_t of the ensemble mean of V against the formula.

    E[V(X(0))] and E||xi||_V are estimated from the ensemble's own initial
    segments; the bound uses the model's declared zeta.
    """
    grid = ensemble[0].grid
    m = grid.n_history
    stacked = np.stack([p.values for p in ensemble])  # (N, P, d)
    v_vals = model.lyapunov.V(stacked)  # (N, P)
    observed = float(np.max(v_vals[:, m:].mean(axis=0)))
    ev0 = float(v_vals[:, m].mean())
    xi_norm = ensemble_xi_v_norm(ensemble, model.lyapunov)
    bound = moment_bound_formula(ev0, model.lyapunov.zeta, grid.horizon,
                                 xi_norm, model.n_delays)
    return observed, bound


# --- absolute-value smoothing family ------------------------------------------

def gn_breakpoint(n: int) -> float:
    """a_n = e^{-n(n+1)/2}; consecutive breakpoints satisfy log(a_{n-1}/a_n) = n."""
    return math.exp(-n * (n + 1) / 2.0)


def gn_eval(n: int, r) -> tuple:
    """(g_n, g_n', g_n'') of the even C^2 approximation of |r|.

    Built from the density rho_n(u) = 1/(n u) on (a_n, a_{n-1}): g_n rises
    from 0 on [0, a_n], bends through the transition window, and equals
    |r| - (a_{n-1} - a_n)/n beyond a_{n-1}.  Vectorized in r.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    a_lo = gn_breakpoint(n)
    a_hi = gn_breakpoint(n - 1)
    r = np.asarray(r, dtype=float)
    s = np.abs(r)
    sign = np.sign(r)

    mid = (s > a_lo) & (s < a_hi)
    high = s >= a_hi
    s_safe = np.clip(s, a_lo, a_hi)

    slope = np.where(high, 1.0, np.where(mid, np.log(s_safe / a_lo) / n, 0.0))
    g_mid = (s_safe * np.log(s_safe / a_lo) - s_safe + a_lo) / n
    g = np.where(high, s - (a_hi - a_lo) / n, np.where(mid, g_mid, 0.0))
    g1 = sign * slope
    with np.errstate(divide="ignore"):
        g2 = np.where(mid, 1.0 / (n * np.where(mid, s, 1.0)), 0.0)
    return g, g1, g2


# --- radial process inequality -------------------------------------------------

@dataclass
class RadialReport:
    """Per-grid-time margins of the coupled-difference growth inequality.

    margin[j] = RHS(t_j) - LHS(t_j) estimated over the ensemble; the check
    passes where margin >= -3 * se (the martingale term has zero mean).
    """

    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    margin: np.ndarray
    se: np.ndarray
    passed: np.ndarray

    @property
    def all_passed(self) -> bool:
        return bool(np.all(self.passed))


def radial_check(model: ModelSpec, flow_mu: MeasureFlow, flow_nu: MeasureFlow,
                 seed: int, n_particles: int, grid: TimeGrid,
                 threads: int = 1) -> RadialReport:
    """Check E|Z(t)| <= E|Z(0)| + int_0^t (K E||Z(u)|| + theta W(mu_u, nu_u)) du.

    Z is the difference of the two frozen-flow solutions driven by identical
    noise; integrals are left Riemann sums on the grid.  Requires declared
    K and theta on the model.
    """
    if model.lipschitz_k is None or model.measure_lipschitz_theta is None:
        raise ValueError("radial_check needs declared lipschitz_k and "
                         "measure_lipschitz_theta on the model")
    k_const = model.lipschitz_k
    theta = model.measure_lipschitz_theta

    noise = ensemble_noise(seed, n_particles, grid, model.d)
    paths_mu = solve_ensemble_frozen(model, flow_mu, seed, n_particles, grid,
                                     noise=noise, threads=threads)
    paths_nu = solve_ensemble_frozen(model, flow_nu, seed, n_particles, grid,
                                     noise=noise, threads=threads)
    z_vals = (np.stack([p.values for p in paths_mu])
              - np.stack([p.values for p in paths_nu]))  # (N, P, d)

    m = grid.n_history
    n_times = grid.n_steps + 1
    abs_z = np.linalg.norm(z_vals[:, m:], axis=-1)  # (N, K+1) current |Z(t_j)|

    state_norms = np.empty((n_particles, n_times))
    for k in range(n_times):
        states = ensemble_states_at_step(model, grid, z_vals, k)
        state_norms[:, k] = component_average_norm(states)

    def w_at(k):
        return wasserstein_psi_v(flow_mu.at_step(k), flow_nu.at_step(k),
                                 model.psi, model.lyapunov)

    w_profile = np.array(parallel_map(w_at, range(n_times), threads))

    h = grid.h
    # left Riemann sums: integral up to t_j uses nodes 0 .. j-1
    state_int = np.concatenate([
        np.zeros((n_particles, 1)),
        np.cumsum(state_norms[:, :-1], axis=1) * h,
    ], axis=1)
    w_int = np.concatenate([[0.0], np.cumsum(w_profile[:-1]) * h])

    # per-particle random part; the deterministic theta term is added after
    d_rand = abs_z[:, :1] + k_const * state_int - abs_z
    margin = d_rand.mean(axis=0) + theta * w_int
    se = d_rand.std(axis=0, ddof=1) / math.sqrt(n_particles)
    lhs = abs_z.mean(axis=0)
    rhs = margin + lhs
    passed = margin >= -3.0 * se
    return RadialReport(
        times=grid.step_times(),
        lhs=lhs,
        rhs=rhs,
        margin=margin,
        se=se,
        passed=passed,
    )


# --- probe set generation -------------------------------------------------------

def uniform_states(rng: np.random.Generator, count: int, n_delays: int,
                   dim: int, low: float, high: float) -> list:
    """Uniform probes in the box [low, high]^((n+1) d)."""
    raw = rng.uniform(low, high, size=(count, n_delays + 1, dim))
    return [DelayedState(a) for a in raw]


def uniform_measures(rng: np.random.Generator, count: int, n_atoms: int,
                     n_delays: int, dim: int, low: float, high: float) -> list:
    return [
        EmpiricalMeasure(rng.uniform(low, high, size=(n_atoms, n_delays + 1, dim)))
        for _ in range(count)
    ]


def probe_pairs(rng: np.random.Generator, count: int, n_delays: int, dim: int,
                low: float, high: float, close_fraction: float = 0.5) -> list:
    """State pairs mixing independent draws with nearby perturbations.

    Close pairs matter: the worst Lipschitz ratios live where the two states
    nearly coincide in some components.
    """
    scale = 0.1 * (high - low)
    pairs = []
    for _ in range(count):
        x = rng.uniform(low, high, size=(n_delays + 1, dim))
        if rng.uniform() < close_fraction:
            y = x + rng.normal(0.0, scale, size=x.shape) * rng.uniform(0.0, 1.0)
            y = np.clip(y, low, high)
        else:
            y = rng.uniform(low, high, size=x.shape)
        pairs.append((DelayedState(x), DelayedState(y)))
    return pairs


def probe_measure_pairs(rng: np.random.Generator, count: int, n_atoms: int,
                        n_delays: int, dim: int, low: float, high: float,
                        identical_fraction: float = 0.5) -> list:
    """Measure pairs, a share of them identical so the state part is isolated."""
    pairs = []
    for _ in range(count):
        mu = EmpiricalMeasure(
            rng.uniform(low, high, size=(n_atoms, n_delays + 1, dim)))
        if rng.uniform() < identical_fraction:
            nu = mu
        else:
            nu = EmpiricalMeasure(
                rng.uniform(low, high, size=(n_atoms, n_delays + 1, dim)))
        pairs.append((mu, nu))
    return pairs
