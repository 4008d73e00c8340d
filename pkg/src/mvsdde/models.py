"""Ready-made models: opinion dynamics, delayed Ornstein-Uhlenbeck, multi-delay.

The opinion model couples each agent to the population through compactly
supported interaction kernels applied to both the current and the delayed
opinion, plus a Lipschitz reversion term and additive noise.  Its growth and
one-sided Lipschitz constants follow closed-form expressions in the kernel
sup, kernel Lipschitz constant, support radius and reversion slope.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .model import (
    DelayedState,
    ModelSpec,
    PsiSpec,
    psi_identity,
    quadratic_v,
)
from .measure import EmpiricalMeasure


@dataclass(frozen=True)
class Kernel:
    """Interaction kernel r >= 0 -> R+ with declared sup/Lipschitz/support."""

    fn: Callable[[np.ndarray], np.ndarray]
    sup: float
    lipschitz: float
    radius: float


def tent_kernel(height: float = 1.0, radius: float = 1.0) -> Kernel:
    """height * max(0, 1 - r/radius); Lipschitz constant height/radius."""

    def fn(r):
        return height * np.maximum(0.0, 1.0 - np.asarray(r) / radius)

    return Kernel(fn=fn, sup=height, lipschitz=height / radius, radius=radius)


def bump_kernel(height: float = 1.0, radius: float = 1.0) -> Kernel:
    """Smooth bump height * max(0, 1 - (r/radius)^2)^2.

    The slope peaks at r = radius/sqrt(3), giving Lipschitz constant
    8*height / (3*sqrt(3)*radius).
    """

    def fn(r):
        u = np.asarray(r) / radius
        return height * np.maximum(0.0, 1.0 - u**2) ** 2

    lip = 8.0 * height / (3.0 * math.sqrt(3.0) * radius)
    return Kernel(fn=fn, sup=height, lipschitz=lip, radius=radius)


KERNEL_SHAPES = {"tent": tent_kernel, "bump": bump_kernel}


@dataclass(frozen=True)
class OpinionParams:
    """Data of the scalar opinion model.

    kernel_delayed / kernel_current act on the delayed and current opinion;
    reversion_delayed / reversion_current are b-Lipschitz drifts (typically
    reversion to 0) with the shared slope bound reversion_lipschitz.
    """

    kernel_delayed: Kernel
    kernel_current: Kernel
    reversion_delayed: Callable[[float], float]
    reversion_current: Callable[[float], float]
    reversion_lipschitz: float
    sigma: float
    tau: float

    @property
    def kernel_sup(self) -> float:
        return max(self.kernel_delayed.sup, self.kernel_current.sup)

    @property
    def kernel_lipschitz(self) -> float:
        return max(self.kernel_delayed.lipschitz, self.kernel_current.lipschitz)

    @property
    def support_radius(self) -> float:
        return max(self.kernel_delayed.radius, self.kernel_current.radius)


def default_opinion_params(sigma: float = 1.0, tau: float = 0.25,
                           kappa: float = 1.0, shape: str = "tent",
                           height: float = 1.0, radius: float = 1.0) -> OpinionParams:
    """Opinion parameters with matching kernels and linear reversion -kappa*x."""
    kern = KERNEL_SHAPES[shape](height, radius)
    return OpinionParams(
        kernel_delayed=kern,
        kernel_current=kern,
        reversion_delayed=lambda x: -kappa * x,
        reversion_current=lambda x: -kappa * x,
        reversion_lipschitz=kappa,
        sigma=sigma,
        tau=tau,
    )


@dataclass(frozen=True)
class OpinionConstants:
    """Closed-form growth/Lipschitz constants of the opinion model.

    zeta_quadratic_kernel is the variant with the kernel sup squared in the
    growth constant; the verify command reports both (see diagnostics).
    """

    A: float
    K: float
    theta: float
    zeta: float
    zeta_quadratic_kernel: float


def opinion_constants(params: OpinionParams) -> OpinionConstants:
    phi_sup = params.kernel_sup
    a_r = params.kernel_lipschitz * params.support_radius
    b = params.reversion_lipschitz
    amp = 2.0 * max(phi_sup, a_r)
    rev0 = (float(params.reversion_current(0.0)) ** 2
            + float(params.reversion_delayed(0.0)) ** 2 + params.sigma**2)
    zeta = max(6.0 + phi_sup / 2.0 + 2.0 * b**2, rev0)
    zeta_sq = max(6.0 + phi_sup**2 / 2.0 + 2.0 * b**2, rev0)
    return OpinionConstants(
        A=amp,
        K=2.0 * max(amp, b),
        theta=amp,
        zeta=zeta,
        zeta_quadratic_kernel=zeta_sq,
    )


def opinion_drift(x: DelayedState, mu: EmpiricalMeasure,
                  params: OpinionParams) -> np.ndarray:
    """Kernel-interaction drift against the empirical marginals of mu.

    The two kernel integrals run against the delayed and current marginals
    of the joint measure; reversion terms are added pointwise.  Scalar
    opinions only (d = 1, one delay).
    """
    if x.dim != 1 or x.n_delays != 1:
        raise ValueError("opinion drift is defined for d=1 with a single delay")
    x_del = float(x.delayed(1)[0])
    x_cur = float(x.current[0])
    y_del = mu.marginal(1)[:, 0]
    y_cur = mu.marginal(0)[:, 0]

    diff_del = x_del - y_del
    diff_cur = x_cur - y_cur
    kern_del = float(np.mean(params.kernel_delayed.fn(np.abs(diff_del)) * diff_del))
    kern_cur = float(np.mean(params.kernel_current.fn(np.abs(diff_cur)) * diff_cur))
    total = (kern_del + float(params.reversion_delayed(x_del))
             + kern_cur + float(params.reversion_current(x_cur)))
    return np.array([total])


def gaussian_initial_segment(scale: float = 1.0, seed: int = 7,
                             dim: int = 1) -> Callable:
    """Per-particle constant-in-time Gaussian start, reproducible in the index."""

    def xi(particle_index: int, t: float) -> np.ndarray:
        key = np.random.SeedSequence(entropy=seed, spawn_key=(particle_index,))
        gen = np.random.Generator(np.random.Philox(key))
        return gen.normal(0.0, scale, size=dim)

    return xi


def opinion_model(params: Optional[OpinionParams] = None,
                  xi: Optional[Callable] = None,
                  xi_scale: float = 1.0, xi_seed: int = 7) -> ModelSpec:
    """Scalar opinion model as a ModelSpec with declared constants."""
    params = params or default_opinion_params()
    consts = opinion_constants(params)
    sigma_mat = np.array([[params.sigma]])
    xi_fn = xi if xi is not None else gaussian_initial_segment(xi_scale, xi_seed, 1)
    return ModelSpec(
        name="opinion",
        d=1,
        n_delays=1,
        tau=params.tau,
        delays=(lambda t: params.tau,),
        drift=lambda state, mu: opinion_drift(state, mu, params),
        diffusion=lambda state: sigma_mat,
        lyapunov=quadratic_v(zeta=consts.zeta),
        psi=psi_identity(),
        initial_segment=xi_fn,
        lipschitz_k=consts.K,
        measure_lipschitz_theta=consts.theta,
    )


def delayed_ou(a_coef: float = 1.0, c_coef: float = 0.5, sigma: float = 0.3,
               tau: float = 0.5, xi0: float = 1.0,
               xi: Optional[Callable] = None) -> ModelSpec:
    """Delayed Ornstein-Uhlenbeck benchmark: b = -a x_0 - c x_{-1}, sigma const.

    The mean solves m'(t) = -a m(t) - c m(t - tau), integrable in closed form
    interval by interval; with c = 0 this is the ordinary OU process.
    """
    if a_coef < 0:
        raise ValueError("a_coef must be >= 0 for the declared constants to hold")
    sigma_mat = np.array([[sigma]])
    zeta = max(abs(c_coef), sigma**2, abs(sigma))
    xi_fn = xi if xi is not None else (lambda i, t: np.array([xi0]))

    def drift(state, mu):
        return -a_coef * state.current - c_coef * state.delayed(1)

    return ModelSpec(
        name="delayed_ou",
        d=1,
        n_delays=1,
        tau=tau,
        delays=(lambda t: tau,),
        drift=drift,
        diffusion=lambda state: sigma_mat,
        lyapunov=quadratic_v(zeta=zeta),
        psi=psi_identity(),
        initial_segment=xi_fn,
        lipschitz_k=2.0 * abs(c_coef),
        measure_lipschitz_theta=0.0,
    )


def pure_delay(tau: float = 1.0) -> ModelSpec:
    """Deterministic pure-delay benchmark b = -x_{-1}, sigma = 0, xi = 1.

    Solution: X(t) = 1 - t on [0, tau] for tau = 1, and X(2) = -1/2.
    """
    model = delayed_ou(a_coef=0.0, c_coef=1.0, sigma=0.0, tau=tau, xi0=1.0)
    return dataclasses.replace(model, name="pure_delay")


def build_multi_delay(base: ModelSpec, delays: Sequence[Callable]) -> ModelSpec:
    """Attach n deterministic delay functions tau_i(t) to a model.

    Each tau_i must map into (0, tau]; this is probed on a dense sample of
    [0, 8*tau] here and re-checked on the actual grid at solve time.  The
    drift of base must accept states with len(delays)+1 components.
    """
    probes = np.linspace(0.0, 8.0 * base.tau, 257)
    for i, delay in enumerate(delays, start=1):
        vals = np.array([float(delay(t)) for t in probes])
        if np.any(vals <= 0.0) or np.any(vals > base.tau * (1 + 1e-12)):
            raise ValueError(
                f"delay tau_{i} leaves (0, tau={base.tau}]: "
                f"range [{vals.min()}, {vals.max()}] on [0, {probes[-1]}]"
            )
    return base.with_delays(delays)


def sinusoidal_delay(base_value: float, amplitude: float,
                     frequency: float = 1.0) -> Callable:
    """tau(t) = base_value + amplitude * sin(frequency * t)."""
    return lambda t: base_value + amplitude * math.sin(frequency * t)


# --- config-file entry points -------------------------------------------------

def _kernel_from_config(cfg: dict) -> Kernel:
    shape = cfg.get("shape", "tent")
    if shape not in KERNEL_SHAPES:
        raise ValueError(f"unknown kernel shape {shape!r}; options {sorted(KERNEL_SHAPES)}")
    return KERNEL_SHAPES[shape](cfg.get("height", 1.0), cfg.get("radius", 1.0))


def _opinion_from_config(cfg: dict, tau: float) -> ModelSpec:
    kern = _kernel_from_config(cfg.get("kernel", {}))
    kappa = cfg.get("kappa", 1.0)
    params = OpinionParams(
        kernel_delayed=kern,
        kernel_current=kern,
        reversion_delayed=lambda x: -kappa * x,
        reversion_current=lambda x: -kappa * x,
        reversion_lipschitz=kappa,
        sigma=cfg.get("sigma", 1.0),
        tau=tau,
    )
    return opinion_model(params, xi_scale=cfg.get("xi_scale", 1.0),
                         xi_seed=cfg.get("xi_seed", 7))


def _delayed_ou_from_config(cfg: dict, tau: float) -> ModelSpec:
    return delayed_ou(
        a_coef=cfg.get("a", 1.0),
        c_coef=cfg.get("c", 0.5),
        sigma=cfg.get("sigma", 0.3),
        tau=tau,
        xi0=cfg.get("xi0", 1.0),
    )


def _pure_delay_from_config(cfg: dict, tau: float) -> ModelSpec:
    return pure_delay(tau=tau)


def _delay_fn_from_config(cfg: dict, i: int) -> Callable:
    kind = cfg.get("kind", "constant")
    if kind == "constant":
        value = cfg["value"]
        return lambda t: value
    if kind == "sinusoidal":
        return sinusoidal_delay(cfg["base"], cfg["amplitude"], cfg.get("frequency", 1.0))
    raise ValueError(f"unknown delay kind {kind!r} for tau_{i}")


def _multi_delay_from_config(cfg: dict, tau: float) -> ModelSpec:
    base_cfg = dict(cfg.get("base", {}))
    base_name = base_cfg.pop("name", "delayed_ou")
    if base_name == "multi_delay":
        raise ValueError("multi_delay cannot nest another multi_delay base")
    base = build_model({"name": base_name, **base_cfg}, tau)
    delays = [_delay_fn_from_config(d, i + 1) for i, d in enumerate(cfg["delays"])]
    return build_multi_delay(base, delays)


MODEL_BUILDERS = {
    "opinion": _opinion_from_config,
    "delayed_ou": _delayed_ou_from_config,
    "pure_delay": _pure_delay_from_config,
    "multi_delay": _multi_delay_from_config,
}


def build_model(cfg: dict, tau: float) -> ModelSpec:
    """Construct a ModelSpec from a config-file model section.

    tau comes from the grid section so the model and grid cannot disagree
    about the maximal delay.
    """
    if "name" not in cfg:
        raise ValueError("model section needs a 'name' field")
    name = cfg["name"]
    if name not in MODEL_BUILDERS:
        raise ValueError(f"unknown model {name!r}; options {sorted(MODEL_BUILDERS)}")
    return MODEL_BUILDERS[name](cfg, tau)
