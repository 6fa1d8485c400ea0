"""Config-driven experiment pipeline.

Subcommands: ``simulate`` (open-loop run), ``train`` (density surrogate),
``verify`` (structural checks and the model-error bound), ``control``
(closed-loop run with the decrement audit) and ``sweep`` (fan out a
directory of configs).  Every run writes CSV outputs plus the resolved
config into the output directory; all randomness is seeded through the
config, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import control as ctl
from . import learn, swe
from .dphs import SpatialGrid, StateField, validate_io_matrices
from .gp import Hyperparams, nlml
from .sim import (
    SimConfig,
    Trajectory,
    finite_difference_rate,
    robustness_audit,
    simulate_closed_loop,
    simulate_open_loop,
)

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "runs/out",
    "grid": {"n_points": 101},
    "swe": {
        "length_l": 1.0, "d": 0.5, "g": 9.81, "delta_center": 5.0,
        "q_bar": 0.2, "p_bar": 10.0, "xi1": 0.5, "xi2": 0.5,
    },
    "sim": {
        "dt": 1e-3, "horizon": 10.0, "log_every": 10,
        "cfl_guard": 0.5, "cfl_check_every": 100, "dissipation": 0.0,
    },
    "initial": {"level": 1.0, "momentum": 0.0, "level_bump": 0.0, "bump_mode": 1},
    "excitation": {
        "flow_amplitude": 0.2, "flow_frequency": 0.5,
        "pressure_amplitude": 0.5, "pressure_frequency": 0.3,
    },
    "train": {
        "n_samples": 100, "q_range": [0.0, 10.0], "p_range": [-10.0, 10.0],
        "sigma_f": 0.3, "phi_l": 1.0, "sigma_n": 1e-4,
        "optimize": True, "n_starts": 8, "validation_points": 50,
    },
    "eta": {
        "mode": "oracle", "confidence": 0.95,
        "q_range": [0.5, 3.0], "p_range": [-2.0, 2.0], "epsilon": None,
    },
    "control": {"design": "learned"},
}


class ConfigError(ValueError):
    pass


def _merge_checked(defaults, overrides, path=""):
    out = copy.deepcopy(defaults)
    for key, value in overrides.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be a mapping")
            out[key] = _merge_checked(defaults[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path=None, seed=None, out=None) -> dict:
    """Merge a YAML config over the defaults, rejecting unknown keys."""
    overrides = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            overrides = yaml.safe_load(fh) or {}
        if not isinstance(overrides, dict):
            raise ConfigError("config file must hold a mapping")
    cfg = _merge_checked(DEFAULT_CONFIG, overrides)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["output_dir"] = str(out)
    if cfg["seed"] is None:
        raise ConfigError("a seed is required")
    return cfg


def _grid(cfg) -> SpatialGrid:
    return SpatialGrid(a=0.0, b=cfg["swe"]["length_l"],
                       n_points=cfg["grid"]["n_points"])


def _params(cfg) -> swe.SweParams:
    return swe.SweParams(**cfg["swe"])


def _sim_config(cfg) -> SimConfig:
    return SimConfig(**cfg["sim"])


def _initial_state(cfg, grid: SpatialGrid) -> StateField:
    ic = cfg["initial"]
    z = grid.z
    level = ic["level"] + ic["level_bump"] * np.sin(
        np.pi * ic["bump_mode"] * (z - grid.a) / grid.length)
    momentum = np.full_like(z, ic["momentum"])
    return StateField(grid=grid, values=np.stack([level, momentum], axis=1))


def _excitation(cfg, params: swe.SweParams):
    ex = cfg["excitation"]
    rest_pressure = params.g * cfg["initial"]["level"]

    def u_fn(t):
        return np.array([
            ex["flow_amplitude"] * np.sin(2 * np.pi * ex["flow_frequency"] * t),
            rest_pressure
            + ex["pressure_amplitude"] * np.sin(2 * np.pi * ex["pressure_frequency"] * t),
        ])

    return u_fn


def _fmt(x) -> str:
    return repr(float(x))


def write_csv(path, header_comments, columns, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in header_comments:
            fh.write(f"# {line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def write_trajectory_csv(path, traj: Trajectory):
    n_points, n = traj.states.shape[1:]
    columns = ["t"]
    for j in range(n_points):
        columns += [f"q{j:03d}", f"p{j:03d}"][:n]
    comments = [
        "open-channel state trajectory; t in s",
        "z-major state block: level q (m) and momentum p (kg m^-1 s^-1) per grid point",
        "grid z (m): " + ",".join(_fmt(z) for z in traj.grid.z),
    ]
    rows = [np.concatenate([[t], traj.states[i].ravel()])
            for i, t in enumerate(traj.times)]
    write_csv(path, comments, columns, rows)


def write_energies_csv(path, traj: Trajectory):
    closed = traj.total_energy is not None
    columns = ["t", "plant_energy", "dissipated", "u0", "u1", "y0", "y1", "power_uy"]
    if closed:
        columns += ["design_energy", "controller_energy", "total_energy",
                    "dissipated_design", "ybar0", "ybar1", "power_ybar_u", "c1", "c2"]
    rows = []
    for i, t in enumerate(traj.times):
        row = [t, traj.plant_energy[i], traj.dissipated[i],
               traj.u[i, 0], traj.u[i, 1], traj.y[i, 0], traj.y[i, 1],
               traj.power_uy[i]]
        if closed:
            row += [traj.design_energy[i], traj.controller_energy[i],
                    traj.total_energy[i], traj.dissipated_design[i],
                    traj.ybar[i, 0], traj.ybar[i, 1], traj.power_ybar_u[i],
                    traj.casimirs[i, 0], traj.casimirs[i, 1]]
        rows.append(row)
    comments = ["energy traces; t in s, energies in J, powers in W"]
    write_csv(path, comments, columns, rows)


def write_audit_csv(path, traj: Trajectory, audit):
    columns = ["t", "plant_energy", "design_energy", "controller_energy",
               "total_energy", "c1", "c2", "power_uy", "power_ybar_u",
               "decrement_bound", "measured_dhd_dt"]
    rows = []
    for i, t in enumerate(traj.times):
        rows.append([
            t, traj.plant_energy[i], traj.design_energy[i],
            traj.controller_energy[i], traj.total_energy[i],
            traj.casimirs[i, 0], traj.casimirs[i, 1],
            traj.power_uy[i], traj.power_ybar_u[i],
            audit.bound[i], audit.measured[i],
        ])
    comments = [
        "closed-loop decrement audit; measured shaped-energy rate vs robust bound",
    ]
    write_csv(path, comments, columns, rows)


def _write_resolved_config(cfg, outdir: Path):
    with open(outdir / "resolved_config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)


def _write_report(outdir: Path, report: dict):
    with open(outdir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(cfg) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(cfg) -> int:
    outdir = _outdir(cfg)
    grid = _grid(cfg)
    params = _params(cfg)
    plant = swe.build_plant(params, grid)
    traj = simulate_open_loop(plant, _excitation(cfg, params),
                              _initial_state(cfg, grid), _sim_config(cfg))
    write_trajectory_csv(outdir / "trajectory.csv", traj)
    write_energies_csv(outdir / "energies.csv", traj)
    _write_resolved_config(cfg, outdir)
    _write_report(outdir, {
        "command": "simulate",
        "records": int(traj.times.size),
        "final_plant_energy": float(traj.plant_energy[-1]),
    })
    print(f"simulate: wrote {traj.times.size} records to {outdir}")
    return 0


def _train_samples(cfg, params):
    tr = cfg["train"]
    rng = np.random.default_rng(cfg["seed"])
    q = rng.uniform(tr["q_range"][0], tr["q_range"][1], tr["n_samples"])
    p = rng.uniform(tr["p_range"][0], tr["p_range"][1], tr["n_samples"])
    x = np.stack([q, p], axis=1)
    y = swe.ChannelEnergy(params).density(x)
    return np.column_stack([x, y])


def cmd_train(cfg, model_path=None) -> int:
    outdir = _outdir(cfg)
    grid = _grid(cfg)
    params = _params(cfg)
    tr = cfg["train"]
    samples = _train_samples(cfg, params)
    prior = swe.KnownChannelEnergy(g=params.g)
    h_init = Hyperparams(sigma_f=tr["sigma_f"], phi_l=tr["phi_l"],
                         sigma_n=tr["sigma_n"])
    train = (samples[:, :2], samples[:, 2])
    nlml_before = nlml(train, h_init, prior_mean=prior)
    lh = learn.fit_hamiltonian_density(
        samples, prior, h_init, grid, optimize=tr["optimize"], seed=cfg["seed"])
    nlml_after = nlml(train, lh.density_gp.hyper, prior_mean=prior)

    m = tr["validation_points"]
    qv = np.linspace(tr["q_range"][0], tr["q_range"][1], m)
    pv = np.linspace(tr["p_range"][0], tr["p_range"][1], m)
    qq, pp = np.meshgrid(qv, pv, indexing="ij")
    grid_pts = np.stack([qq.ravel(), pp.ravel()], axis=1)
    truth = swe.ChannelEnergy(params).density(grid_pts)
    rms_error = float(np.sqrt(np.mean((lh.density(grid_pts) - truth) ** 2)))
    residual = truth - prior(grid_pts)
    rms_residual = float(np.sqrt(np.mean(residual**2)))

    model_file = Path(model_path) if model_path else outdir / "model.json"
    learn.save_learned_hamiltonian(lh, model_file)
    _write_resolved_config(cfg, outdir)
    report = {
        "command": "train",
        "nlml_before": nlml_before,
        "nlml_after": nlml_after,
        "hyperparams": {"sigma_f": lh.density_gp.hyper.sigma_f,
                        "phi_l": lh.density_gp.hyper.phi_l,
                        "sigma_n": lh.density_gp.hyper.sigma_n},
        "validation_rms_error": rms_error,
        "validation_rms_residual": rms_residual,
        "model_file": str(model_file),
    }
    _write_report(outdir, report)
    print(f"train: NLML {nlml_before:.4f} -> {nlml_after:.4f}, "
          f"validation RMS {rms_error:.3e} (residual RMS {rms_residual:.3e})")
    return 0


def _eta_box(cfg):
    eta = cfg["eta"]
    return np.array([eta["q_range"], eta["p_range"]], dtype=float)


def cmd_verify(cfg, model_path) -> int:
    outdir = _outdir(cfg)
    grid = _grid(cfg)
    params = _params(cfg)
    lh = learn.load_learned_hamiltonian(model_path)
    x0 = _initial_state(cfg, grid)
    wiring = swe.build_closed_loop(params, grid, x0, design_model=lh, check=False)
    io_report = validate_io_matrices(wiring.loop.plant.io)
    eta_cfg = cfg["eta"]
    bound = learn.estimate_model_error_bound(
        lh, _eta_box(cfg), eta_cfg["confidence"], grid,
        wiring.loop.plant.structure, mode=eta_cfg["mode"],
        true_model=swe.ChannelEnergy(params) if eta_cfg["mode"] == "oracle" else None,
        seed=cfg["seed"])
    checks = {
        "io_pair": bool(io_report.passed),
        "casimir_pde": bool(wiring.casimir_report.passed),
        "matching_conditions": bool(wiring.matching_report.passed),
    }
    report = {
        "command": "verify",
        "checks": checks,
        "casimir_pde_residuals": wiring.casimir_report.residuals.tolist(),
        "matching_residual_structure": wiring.matching_report.residual_structure.tolist(),
        "matching_residual_gain": wiring.matching_report.residual_gain.tolist(),
        "io_residuals": {
            "w_sigma_w": io_report.residual_wsw,
            "w_sigma_wt": io_report.residual_wswt,
            "wt_sigma_wt": io_report.residual_wtswt,
        },
        "feedthrough": wiring.loop.output_cfg.s_matrix.tolist(),
        "eta_bar": bound.eta_bar,
        "eta_mode": eta_cfg["mode"],
        "confidence": bound.confidence,
    }
    _write_resolved_config(cfg, outdir)
    _write_report(outdir, report)
    all_passed = all(checks.values())
    for name, ok in checks.items():
        print(f"verify: {name}: {'pass' if ok else 'FAIL'}")
    print(f"verify: eta_bar = {bound.eta_bar:.6e} ({eta_cfg['mode']} mode)")
    return 0 if all_passed else 2


def cmd_control(cfg, model_path=None) -> int:
    outdir = _outdir(cfg)
    grid = _grid(cfg)
    params = _params(cfg)
    design_kind = cfg["control"]["design"]
    if design_kind == "learned":
        if model_path is None:
            raise ConfigError("control with a learned design needs --model")
        design = learn.load_learned_hamiltonian(model_path)
    elif design_kind == "true":
        design = None
    else:
        raise ConfigError(f"unknown design {design_kind!r}")
    x0 = _initial_state(cfg, grid)
    wiring = swe.build_closed_loop(params, grid, x0, design_model=design)
    traj = simulate_closed_loop(wiring.loop, _sim_config(cfg), x0, wiring.x_c0)

    eta_cfg = cfg["eta"]
    if design_kind == "learned":
        bound = learn.estimate_model_error_bound(
            design, _eta_box(cfg), eta_cfg["confidence"], grid,
            wiring.loop.plant.structure, mode=eta_cfg["mode"],
            true_model=swe.ChannelEnergy(params) if eta_cfg["mode"] == "oracle" else None,
            seed=cfg["seed"])
        eta_bar = bound.eta_bar
    else:
        eta_bar = 0.0
    lam = ctl.coercivity_on_range(wiring.loop.plant.structure.g0)
    epsilon = eta_cfg["epsilon"] if eta_cfg["epsilon"] is not None else lam
    ledger = ctl.RobustnessLedger(lam=lam, epsilon=epsilon, eta_bar=eta_bar,
                                  confidence=eta_cfg["confidence"])
    audit = robustness_audit(traj, ledger)

    write_trajectory_csv(outdir / "trajectory.csv", traj)
    write_energies_csv(outdir / "energies.csv", traj)
    write_audit_csv(outdir / "audit.csv", traj, audit)
    _write_resolved_config(cfg, outdir)

    eq = wiring.equilibrium.state.values
    dist = np.sqrt(np.trapezoid(((traj.states - eq) ** 2).sum(axis=2),
                                grid.z, axis=1))
    casimir_drift = np.abs(traj.casimirs - traj.casimirs[0]).max(axis=0)
    report = {
        "command": "control",
        "design": design_kind,
        "eta_bar": eta_bar,
        "lambda": lam,
        "epsilon": epsilon,
        "offset": ledger.offset,
        "initial_distance": float(dist[0]),
        "final_distance": float(dist[-1]),
        "distance_ratio": float(dist[-1] / dist[0]) if dist[0] > 0 else 0.0,
        "casimir_drift": casimir_drift.tolist(),
        "max_hd_increment": float(np.diff(traj.total_energy).max()),
        "records": int(traj.times.size),
    }
    _write_report(outdir, report)
    print(f"control ({design_kind}): distance to equilibrium "
          f"{dist[0]:.4f} -> {dist[-1]:.4f}, Casimir drift {casimir_drift}")
    return 0


def cmd_sweep(cfg_dir, out_base, seed=None) -> int:
    """Run every config in a directory, each into its own subdirectory."""
    configs = sorted(Path(cfg_dir).glob("*.yaml"))
    if not configs:
        print(f"sweep: no .yaml configs under {cfg_dir}", file=sys.stderr)
        return 1
    jobs = []
    for path in configs:
        cfg = load_config(path, seed=seed)
        cfg["output_dir"] = str(Path(out_base) / path.stem)
        jobs.append(cfg)
    codes = []
    with concurrent.futures.ProcessPoolExecutor() as pool:
        for code in pool.map(cmd_simulate, jobs):
            codes.append(code)
    return max(codes)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="portham",
        description="Experiment pipeline for learned boundary control of "
                    "a 1-D port-Hamiltonian channel")
    parser.add_argument("command",
                        choices=["simulate", "train", "verify", "control", "sweep"])
    parser.add_argument("--config", type=Path, default=None,
                        help="YAML config (defaults apply when omitted)")
    parser.add_argument("--out", type=Path, default=None,
                        help="output directory (overrides the config)")
    parser.add_argument("--seed", type=int, default=None,
                        help="seed override")
    parser.add_argument("--model", type=Path, default=None,
                        help="serialized density surrogate")
    args = parser.parse_args(argv)
    try:
        if args.command == "sweep":
            if args.config is None or args.out is None:
                parser.error("sweep needs --config <dir> and --out <dir>")
            return cmd_sweep(args.config, args.out, seed=args.seed)
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "train":
            return cmd_train(cfg, model_path=args.model)
        if args.command == "verify":
            if args.model is None:
                parser.error("verify needs --model")
            return cmd_verify(cfg, args.model)
        if args.command == "control":
            return cmd_control(cfg, model_path=args.model)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # simulation/training failures surface with context
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
