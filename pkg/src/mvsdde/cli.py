"""Command-line front end: simulate, fixpoint, verify, transport, convergence.

One JSON config per run, sections {grid, model, run, fixpoint, verify,
convergence}.  Exit codes: 0 success, 1 verification failure, 2 usage or
config error, 3 numeric failure.  All outputs are deterministic functions of
(config, seed); the --threads flag only affects wall time.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import convergence as conv
from .diagnostics import (
    check_lipschitz,
    check_lyapunov,
    moment_bound,
    probe_measure_pairs,
    probe_pairs,
    uniform_measures,
    uniform_states,
)
from .fixedpoint import calibrate_lambda, picard_iterate
from .measure import (
    FLOAT_FMT,
    empirical_from_ensemble,
    read_measure_csv,
    wasserstein_psi_v,
    write_measure_csv,
)
from .model import PSI_SPECS, V_SPECS, DelayedState
from .models import build_model, opinion_constants
from .particle import simulate_particles
from .solver import BlowupError, write_paths_csv
from .stochastics import DEFAULT_SEED, make_grid


class ConfigError(ValueError):
    """Malformed or incomplete configuration."""


def _load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}")


def _section(cfg: dict, name: str, required: bool = True) -> dict:
    sec = cfg.get(name)
    if sec is None:
        if required:
            raise ConfigError(f"config section '{name}' is missing")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    return sec


def _require(section: dict, section_name: str, key: str):
    if key not in section:
        raise ConfigError(f"required config field '{section_name}.{key}' is missing")
    return section[key]


def _build_grid(cfg: dict):
    grid_cfg = _section(cfg, "grid")
    tau = _require(grid_cfg, "grid", "tau")
    horizon = _require(grid_cfg, "grid", "T")
    m = _require(grid_cfg, "grid", "m")
    try:
        return make_grid(tau, horizon, m)
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}")


def _build_model(cfg: dict, grid):
    model_cfg = _section(cfg, "model")
    try:
        return build_model(model_cfg, grid.tau)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"model: {exc}")


def _fmt(x: float) -> str:
    return FLOAT_FMT % x


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


# --- commands ------------------------------------------------------------------

def cmd_simulate(cfg: dict, seed: int, out_dir: Path, threads: int) -> int:
    grid = _build_grid(cfg)
    model = _build_model(cfg, grid)
    run_cfg = _section(cfg, "run", required=False)
    n_particles = int(run_cfg.get("n_particles", 64))
    measure_times = run_cfg.get("measure_times", [])

    paths = simulate_particles(model, seed, n_particles, grid, threads=threads)
    with open(out_dir / "paths.csv", "w") as fh:
        write_paths_csv(paths, fh)
    for t in measure_times:
        mu = empirical_from_ensemble(paths, float(t), model)
        with open(out_dir / f"measure_t{t:g}.csv", "w") as fh:
            write_measure_csv(mu, fh)
    observed, bound = moment_bound(model, paths)
    with open(out_dir / "moment.csv", "w") as fh:
        fh.write("observed,bound\n")
        fh.write(f"{_fmt(observed)},{_fmt(bound)}\n")
    print(f"simulate: {n_particles} particles, {grid.n_steps} steps; "
          f"sup_t mean V = {observed:.6g} (bound {bound:.6g})")
    return 0


def cmd_fixpoint(cfg: dict, seed: int, out_dir: Path, threads: int) -> int:
    grid = _build_grid(cfg)
    model = _build_model(cfg, grid)
    run_cfg = _section(cfg, "run", required=False)
    fp_cfg = _section(cfg, "fixpoint", required=False)
    n_particles = int(run_cfg.get("n_particles", 64))
    tol = float(fp_cfg.get("tol", 1e-3))
    max_iter = int(fp_cfg.get("max_iter", 50))
    lam = float(fp_cfg.get("lambda", 0.0))
    if max_iter < 1:
        raise ConfigError(f"fixpoint.max_iter must be >= 1, got {max_iter}")
    if tol <= 0:
        raise ConfigError(f"fixpoint.tol must be positive, got {tol}")

    report = picard_iterate(model, seed, n_particles, grid, lam=lam,
                            tol=tol, max_iter=max_iter, threads=threads)

    with open(out_dir / "picard.csv", "w") as fh:
        fh.write("iteration,distance,ratio\n")
        for i, (dist, ratio) in enumerate(zip(report.distances, report.ratios), start=1):
            r = "" if math.isnan(ratio) else _fmt(ratio)
            fh.write(f"{i},{_fmt(dist)},{r}\n")

    if len(report.time_profiles) >= 2:
        cal = calibrate_lambda(report.time_profiles[0], report.time_profiles[1], grid)
    else:
        cal = calibrate_lambda(report.time_profiles[0], report.time_profiles[0], grid)
    summary = {
        "converged": report.converged,
        "iterations": report.iterations,
        "lambda_used": report.lam,
        "final_distance": report.distances[-1],
        "calibrated_lambda": cal.lam,
        "calibration_ratio": cal.ratio,
        "calibration_achieved": cal.achieved,
        "exact_fixed_point": cal.exact_fixed_point,
        "growth_n": report.growth_n,
        "mu0_v": report.mu0_v,
        "xi_v_norm": report.xi_v_norm,
    }
    _write_json(out_dir / "summary.json", summary)

    if fp_cfg.get("dump_flow", False):
        flow_dir = out_dir / "final_flow"
        flow_dir.mkdir(exist_ok=True)
        for k, mu in enumerate(report.final_flow.measures):
            with open(flow_dir / f"flow_{k:05d}.csv", "w") as fh:
                write_measure_csv(mu, fh)

    print(f"fixpoint: converged={report.converged} after {report.iterations} "
          f"iterations; final distance {report.distances[-1]:.6g}; "
          f"calibrated lambda {cal.lam:g} (ratio {cal.ratio:.4g})")
    return 0


def _witness_payload(witness) -> dict:
    if witness is None:
        return {}
    payload = {}
    for name in ("x", "y", "state"):
        st = getattr(witness, name, None)
        if isinstance(st, DelayedState):
            payload[name] = st.values.tolist()
    for name in ("ratio", "lhs", "rhs", "part"):
        val = getattr(witness, name, None)
        if val is not None:
            payload[name] = val
    return payload


def cmd_verify(cfg: dict, seed: int, out_dir: Path, threads: int) -> int:
    grid = _build_grid(cfg)
    model = _build_model(cfg, grid)
    ver_cfg = _section(cfg, "verify", required=False)
    run_cfg = _section(cfg, "run", required=False)
    n_points = int(ver_cfg.get("n_points", 10_000))
    n_atoms = int(ver_cfg.get("n_atoms", 32))
    n_measures = int(ver_cfg.get("n_measures", 64))
    box = ver_cfg.get("box", [-5.0, 5.0])
    if not (isinstance(box, list) and len(box) == 2 and box[0] < box[1]):
        raise ConfigError(f"verify.box must be [low, high], got {box}")
    low, high = float(box[0]), float(box[1])
    k_scale = float(ver_cfg.get("k_scale", 1.0))
    theta_scale = float(ver_cfg.get("theta_scale", 1.0))

    rng = np.random.Generator(np.random.Philox(seed))
    states = uniform_states(rng, n_points, model.n_delays, model.d, low, high)

    # realistic-region probes: states visited by a short particle run
    n_sim = int(run_cfg.get("n_particles", 64))
    sim_paths = simulate_particles(model, seed, n_sim, grid, threads=threads)
    sim_times = grid.step_times()[:: max(1, grid.n_steps // 8)]
    sim_measures = [empirical_from_ensemble(sim_paths, float(t), model)
                    for t in sim_times]
    sim_states = [s for mu in sim_measures for s in mu.states()][: n_points // 4]
    # tail probes: Gaussians scaled out to |x| ~ 10
    tail = [
        DelayedState(rng.normal(0.0, 10.0 / 3.0,
                                size=(model.n_delays + 1, model.d)))
        for _ in range(n_points // 4)
    ]
    states = states + sim_states + tail

    measures = uniform_measures(rng, n_measures, n_atoms, model.n_delays,
                                model.d, low, high) + [
        mu if mu.n_atoms <= n_atoms else
        type(mu)(mu.atoms[:n_atoms]) for mu in sim_measures
    ]
    lyap = check_lyapunov(model, states, measures)

    pairs = probe_pairs(rng, n_points, model.n_delays, model.d, low, high)
    measure_pairs = probe_measure_pairs(rng, n_measures, n_atoms,
                                        model.n_delays, model.d, low, high)
    k_val = None if model.lipschitz_k is None else model.lipschitz_k * k_scale
    theta_val = (None if model.measure_lipschitz_theta is None
                 else model.measure_lipschitz_theta * theta_scale)
    lip = check_lipschitz(model, pairs, measure_pairs, k=k_val, theta=theta_val)

    with open(out_dir / "lyapunov.csv", "w") as fh:
        fh.write("samples,estimated_zeta,declared_zeta,worst_violation\n")
        decl = "" if lyap.declared_constant is None else _fmt(lyap.declared_constant)
        fh.write(f"{lyap.samples},{_fmt(lyap.estimated_constant)},{decl},"
                 f"{_fmt(lyap.worst_violation)}\n")
    with open(out_dir / "lipschitz.csv", "w") as fh:
        fh.write("samples,worst_ratio,estimated_k,estimated_theta,worst_violation\n")
        fh.write(f"{lip.samples},{_fmt(lip.estimated_constant)},"
                 f"{_fmt(lip.details['estimated_k'])},"
                 f"{_fmt(lip.details['estimated_theta'])},"
                 f"{_fmt(lip.worst_violation)}\n")

    summary = {
        "lyapunov": {
            "estimated_zeta": lyap.estimated_constant,
            "declared_zeta": lyap.declared_constant,
            "violated": lyap.violated,
            "witness": _witness_payload(lyap.witness) if lyap.violated else {},
        },
        "lipschitz": {
            "worst_ratio": lip.estimated_constant,
            "declared_k": k_val,
            "declared_theta": theta_val,
            "estimated_k": lip.details.get("estimated_k"),
            "estimated_theta": lip.details.get("estimated_theta"),
            "violated": lip.violated,
            "inconclusive": lip.inconclusive,
            "witness": _witness_payload(lip.witness) if lip.violated else {},
        },
    }
    if model.name == "opinion":
        # both growth-constant readings (kernel sup vs its square) for the record
        model_cfg = _section(cfg, "model")
        from .models import _kernel_from_config, OpinionParams  # local: config echo
        kern = _kernel_from_config(model_cfg.get("kernel", {}))
        kappa = model_cfg.get("kappa", 1.0)
        params = OpinionParams(
            kernel_delayed=kern, kernel_current=kern,
            reversion_delayed=lambda x: -kappa * x,
            reversion_current=lambda x: -kappa * x,
            reversion_lipschitz=kappa,
            sigma=model_cfg.get("sigma", 1.0), tau=grid.tau,
        )
        consts = opinion_constants(params)
        summary["opinion_constants"] = {
            "A": consts.A, "K": consts.K, "theta": consts.theta,
            "zeta": consts.zeta,
            "zeta_quadratic_kernel": consts.zeta_quadratic_kernel,
        }
    failed = lyap.violated or lip.violated
    summary["passed"] = not failed
    _write_json(out_dir / "summary.json", summary)

    print(f"verify: lyapunov zeta est {lyap.estimated_constant:.6g} "
          f"(declared {lyap.declared_constant}), "
          f"lipschitz worst ratio {lip.estimated_constant:.6g}; "
          f"{'FAIL' if failed else 'PASS'}")
    return 1 if failed else 0


def cmd_transport(file_a: str, file_b: str, psi_name: str, v_name: str) -> int:
    if psi_name not in PSI_SPECS:
        raise ConfigError(f"unknown psi {psi_name!r}; options {sorted(PSI_SPECS)}")
    if v_name not in V_SPECS:
        raise ConfigError(f"unknown V {v_name!r}; options {sorted(V_SPECS)}")
    try:
        with open(file_a) as fh:
            mu = read_measure_csv(fh)
        with open(file_b) as fh:
            nu = read_measure_csv(fh)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc))
    if mu.n_atoms != nu.n_atoms:
        raise ConfigError(
            f"atom counts differ: {mu.n_atoms} vs {nu.n_atoms}")
    dist = wasserstein_psi_v(mu, nu, PSI_SPECS[psi_name](), V_SPECS[v_name]())
    print(f"{dist:.12g}")
    return 0


def cmd_convergence(cfg: dict, seed: int, out_dir: Path, threads: int) -> int:
    conv_cfg = _section(cfg, "convergence")
    sweep = _require(conv_cfg, "convergence", "sweep")
    if sweep == "h":
        result = conv.strong_order_sweep(
            tau=float(conv_cfg.get("tau", 0.5)),
            horizon=float(conv_cfg.get("T", 1.0)),
            a_coef=float(conv_cfg.get("a", 1.0)),
            c_coef=float(conv_cfg.get("c", 0.5)),
            sigma=float(conv_cfg.get("sigma", 0.3)),
            m_values=conv_cfg.get("m_values", [16, 32, 64, 128, 256]),
            n_paths=int(conv_cfg.get("n_paths", 1000)),
            seed=seed,
            threads=threads,
        )
        with open(out_dir / "strong_order.csv", "w") as fh:
            fh.write("h,rms_error\n")
            for h, err in zip(result.steps, result.rms_errors):
                fh.write(f"{_fmt(h)},{_fmt(err)}\n")
        _write_json(out_dir / "summary.json", {"observed_order": result.order})
        print(f"convergence(h): observed strong order {result.order:.4g}")
        return 0
    if sweep == "N":
        grid = _build_grid(cfg)
        model = _build_model(cfg, grid)
        n_seeds = int(conv_cfg.get("n_seeds", 20))
        result = conv.fixpoint_particle_sweep(
            model, grid,
            n_values=conv_cfg.get("n_values", [64, 128, 256]),
            seeds=[seed + i for i in range(n_seeds)],
            tol=float(conv_cfg.get("tol", 1e-3)),
            max_iter=int(conv_cfg.get("max_iter", 50)),
            threads=threads,
        )
        with open(out_dir / "particle_gap.csv", "w") as fh:
            fh.write("n_particles,seed,gap\n")
            for n in result.n_values:
                for s, gap in zip(range(n_seeds), result.gaps[n]):
                    fh.write(f"{n},{seed + s},{_fmt(gap)}\n")
        _write_json(out_dir / "summary.json", {
            "n_values": result.n_values, "medians": result.medians,
        })
        meds = ", ".join(f"N={n}: {m:.6g}"
                         for n, m in zip(result.n_values, result.medians))
        print(f"convergence(N): median terminal-law gaps {meds}")
        return 0
    raise ConfigError(f"convergence.sweep must be 'h' or 'N', got {sweep!r}")


# --- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvsdde",
        description="Distribution-dependent stochastic delay equation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED,
                       help=f"RNG seed (default {DEFAULT_SEED})")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads (output is independent of this)")

    add_common(sub.add_parser("simulate", help="direct particle simulation"))
    add_common(sub.add_parser("fixpoint", help="Picard iteration to the law fixed point"))
    add_common(sub.add_parser("verify", help="probe model assumptions"))
    add_common(sub.add_parser("convergence", help="error sweeps over h or N"))

    tp = sub.add_parser("transport", help="distance between two measure CSVs")
    tp.add_argument("file_a")
    tp.add_argument("file_b")
    tp.add_argument("--psi", default="identity", choices=sorted(PSI_SPECS))
    tp.add_argument("--v", default="quadratic", choices=sorted(V_SPECS))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        if args.command == "transport":
            return cmd_transport(args.file_a, args.file_b, args.psi, args.v)
        cfg = _load_config(args.config)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}")
        handler = {
            "simulate": cmd_simulate,
            "fixpoint": cmd_fixpoint,
            "verify": cmd_verify,
            "convergence": cmd_convergence,
        }[args.command]
        return handler(cfg, args.seed, out_dir, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BlowupError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
