"""Command-line front end: ``cphase simulate | linearize | identify | certify``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 certificate refusal.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    build_devices,
    build_network,
    build_scenario,
    load_config,
    operating_point,
)
from .device import DroopVoltageSource, ResonanceError, Setpoints, device_transfer_matrix
from .linearize import (
    PhaseInvarianceError,
    full_system_jacobian,
    invariant_direction_residual,
    linearize_alphabeta,
    linearize_complex_phase,
    linearize_dq,
)
from .network import PowerFlowError
from .sim import CHANNELS, SimulationError, read_trajectory_csv, simulate
from .stability import (
    DIRECTIONS,
    BoundsViolation,
    CertificateRefusal,
    GridBounds,
    certify,
    cross_validate,
    sample_s_grid,
)
from .sysid import RankDeficientError, build_dataset, estimate_eta, fit_hw

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_REFUSED = 0, 2, 3, 4
DEFAULT_PHASES = (0.0, 0.4, 0.8, 1.2)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, complex):
        return [x.real, x.imag]
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _manifest(args, cfg_hash: str, seed, outputs: list[str]) -> dict:
    return {
        "tool": "cphase",
        "version": __version__,
        "command": args.command,
        "config": str(args.config),
        "config_sha256": cfg_hash,
        "seed": seed,
        "outputs": sorted(outputs),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    cfg, digest = load_config(args.config)
    sc = build_scenario(cfg, seed=args.seed, base_dir=Path(args.config).parent)
    traj = simulate(sc)
    sim = cfg["simulation"]
    buses = sim.get("buses")
    if buses is not None and any(b >= sc.network.n_bus for b in buses):
        raise ConfigError("/simulation/buses: bus index outside the grid")
    out = _prepare_out(args)
    traj.to_csv(out / "trajectory.csv", channels=sim.get("channels", CHANNELS), buses=buses)
    _write_json(out / "manifest.json", _manifest(args, digest, sc.seed, ["trajectory.csv"]))
    print(f"wrote {out / 'trajectory.csv'} ({traj.t.size} samples, {sc.network.n_bus} buses)")
    return EXIT_OK


def _max_diff(mats) -> float:
    return float(max(np.max(np.abs(m - mats[0])) for m in mats))


def cmd_linearize(args) -> int:
    cfg, digest = load_config(args.config)
    block = cfg.get("linearize", {})
    bus = args.bus if args.bus is not None else block.get("bus", 0)
    phases = block.get("phases", DEFAULT_PHASES)
    net = build_network(cfg)
    devices = build_devices(cfg, Path(args.config).parent)
    if bus not in devices:
        raise ConfigError(f"bus {bus} carries no device (device buses: {sorted(devices)})")
    op = operating_point(cfg, net)
    prm = devices[bus]
    omega_nom = cfg.get("simulation", {}).get("omega_nom", 0.0)
    sigma, phi, p, q = float(op.sigma[bus]), float(op.phi[bus]), float(op.p[bus]), float(op.q[bus])

    cp_models = [linearize_complex_phase(prm, (sigma, phi + a, p, q)) for a in phases]
    result = {
        "bus": bus,
        "complex_phase": {"j_eta": cp_models[0].j_eta, "d_eta": cp_models[0].d_eta,
                          "state": ["sigma", "phi"], "input": ["Q", "P"]},
        "phase_sweep": {"phases": list(phases),
                        "complex_phase_max_diff": _max_diff([np.hstack([m.j_eta, m.d_eta]) for m in cp_models])},
    }
    if prm.n_x == 0:
        dev = DroopVoltageSource(prm, omega_nom=omega_nom)
        v = complex(op.v[bus])
        i = np.conj(complex(p, q) / v)
        J, D = linearize_alphabeta(dev, v, i)
        dq_models = []
        for a in phases:
            r = np.exp(1j * a)
            dq_models.append(linearize_dq(dev, omega_nom, v * r, i * r))
        result["alphabeta_t0"] = {"J": J, "D": D}
        result["dq"] = {"J": dq_models[0].j_dq, "D": dq_models[0].d_dq, "frame_omega": omega_nom}
        result["phase_sweep"]["dq_max_diff"] = _max_diff([np.hstack([m.j_dq, m.d_dq]) for m in dq_models])
        result["invariant_direction_residual"] = invariant_direction_residual(J, D, v, i, omega_nom)
    else:
        result["alphabeta_t0"] = None
        result["dq"] = None
        result["note"] = "alpha-beta and dq blocks are produced for stateless (n_x = 0) devices only"
    out = _prepare_out(args)
    _write_json(out / "linearization.json", result)
    _write_json(out / "manifest.json", _manifest(args, digest, None, ["linearization.json"]))
    sweep = result["phase_sweep"]
    print(f"bus {bus}: complex-phase max difference over phases {sweep['complex_phase_max_diff']:.3e}")
    if "dq_max_diff" in sweep:
        print(f"bus {bus}: dq max difference over phases {sweep['dq_max_diff']:.3e}")
    return EXIT_OK


def cmd_identify(args) -> int:
    cfg, digest = load_config(args.config)
    if "identify" not in cfg:
        raise ConfigError("an 'identify' block is required for this command")
    block = cfg["identify"]
    bus = args.bus if args.bus is not None else block.get("bus", 0)
    order = args.order if args.order is not None else block.get("order", 1)
    path = Path(block["trajectory"])
    if not path.is_absolute():
        path = Path(args.config).parent / path
    if not path.exists():
        raise ConfigError(f"/identify/trajectory: file not found: {path}")
    cols = read_trajectory_csv(path)
    if "setpoints" in block:
        sp = Setpoints(**block["setpoints"])
    else:
        # the recorded run is assumed to start at the device's equilibrium
        first = {}
        for c in ("p", "q", "sigma"):
            if f"bus{bus}_{c}" not in cols:
                raise KeyError(f"trajectory is missing channel bus{bus}_{c}")
            first[c] = float(cols[f"bus{bus}_{c}"][0])
        sp = Setpoints(first["p"], first["q"], float(np.exp(first["sigma"])))
    omega_ref = block.get("omega_ref", cfg.get("simulation", {}).get("omega_nom", 0.0))
    use_eta = block.get("use_recorded_eta", True)
    ds = build_dataset(cols, bus, sp, omega_ref=omega_ref, use_eta=use_eta)
    if ds.eta is None:
        eta = estimate_eta((ds.theta[:, 0], ds.theta[:, 1]), ds.dt, block.get("smoothing_window", 1))
        ds.eta = np.column_stack([eta.rho, eta.omega - omega_ref])
    fit = fit_hw(ds, order)
    out = _prepare_out(args)
    _write_json(out / "params.json", fit.params.to_dict())
    report = {
        "bus": bus,
        "order": order,
        "n_samples": len(ds),
        "training_nrmse": {"rho": fit.training_nrmse[0], "omega": fit.training_nrmse[1]},
        "theta_nrmse": {"sigma": fit.diagnostics["theta_nrmse"][0], "phi": fit.diagnostics["theta_nrmse"][1]},
        "degraded": fit.degraded,
        "stage1_cost": fit.diagnostics.get("stage1_cost"),
        "stage2_cost": fit.diagnostics.get("stage2_cost"),
    }
    _write_json(out / "fit_report.json", report)
    _write_tf_samples(out / "tf_samples.csv", fit.params)
    _write_json(out / "manifest.json",
                _manifest(args, digest, None, ["params.json", "fit_report.json", "tf_samples.csv"]))
    print(f"identified n_x={order} model at bus {bus}: NRMSE rho={fit.training_nrmse[0]:.3e} "
          f"omega={fit.training_nrmse[1]:.3e}{' (degraded)' if fit.degraded else ''}")
    return EXIT_OK


def _write_tf_samples(path: Path, params, w=np.geomspace(1e-2, 1e3, 200)) -> None:
    """Bode-style samples of the fitted ``T(jw)``: real and imaginary part per entry."""
    T = device_transfer_matrix(params, 1j * w)
    names = [f"T_{o}{i}" for o in ("rho", "omega") for i in ("P", "Q", "V")]
    flat = T.reshape(w.size, 6)
    table = np.column_stack([w] + [c for k in range(6) for c in (flat[:, k].real, flat[:, k].imag)])
    header = ",".join(["omega"] + [f"{n}_{part}" for n in names for part in ("re", "im")])
    np.savetxt(path, table, fmt="%.17g", delimiter=",", header=header, comments="")


def _parse_s_grid(text: str):
    try:
        lo, hi, n = text.split(",")
        return float(lo), float(hi), int(n)
    except ValueError:
        raise ConfigError(f"--s-grid expects 'min,max,n', got {text!r}") from None


def cmd_certify(args) -> int:
    cfg, digest = load_config(args.config)
    block = cfg.get("certify", {})
    net = build_network(cfg)
    devices = build_devices(cfg, Path(args.config).parent)
    op = operating_point(cfg, net)
    if "s_grid" in block:
        lo, hi, n = block["s_grid"]
        grid_spec = (float(lo), float(hi), int(n))
    else:
        grid_spec = (1e-3, 1e5, 400)
    if args.s_grid:
        grid_spec = _parse_s_grid(args.s_grid)
    try:
        s_grid = sample_s_grid(*grid_spec)
    except ValueError as exc:
        raise ConfigError(f"s-grid: {exc}") from None
    direction = args.crosstalk_direction or block.get("crosstalk_direction", "text_consistent")
    gamma = args.gamma_max if args.gamma_max is not None else block.get("gamma_max")
    dphi = args.dphi_max if args.dphi_max is not None else block.get("dphi_max")
    if not net.lossless:
        raise CertificateRefusal("the certificate only covers lossless (purely inductive) grids; "
                                 "this network has resistive lines")
    tight = GridBounds.from_operating_point(net, op)
    try:
        bounds = GridBounds(tight.gamma_max if gamma is None else gamma, tight.dphi_max if dphi is None else dphi)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for b in devices:
        devices[b] = devices[b].with_setpoints(Setpoints(float(op.p[b]), float(op.q[b]), float(op.v_mag[b])))
    report = certify(devices, net, op, bounds, s_grid, direction)
    oracle = full_system_jacobian(devices, net, op)
    consistency = cross_validate(report, oracle)

    out = _prepare_out(args)
    text = report.summary()
    verdict = "CERTIFIED" if report.verdict else "NOT CERTIFIED"
    headline = f"{verdict} / oracle {consistency} (max Re lambda = {oracle.max_real:.6g})"
    (out / "report.txt").write_text(headline + "\n" + text + "\n")
    with open(out / "margins.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bus", "omega", "rhoQ", "omegaP", "crosstalk_text_consistent", "crosstalk_as_printed"])
        for row in report.margin_rows():
            w.writerow([row[0]] + [format(x, ".17g") for x in row[1:]])
    summary = {
        "verdict": report.verdict,
        "crosstalk_direction": direction,
        "verdict_as_printed": report.verdict_under("as_printed"),
        "verdict_text_consistent": report.verdict_under("text_consistent"),
        "oracle_max_real": oracle.max_real,
        "oracle_consistency": consistency,
        "bounds": {"gamma_max": bounds.gamma_max, "dphi_max": bounds.dphi_max},
        "s_grid": report.s_grid_meta,
        "failures": [{"bus": b, "condition": c, "margin": m} for b, c, m in report.failures()],
    }
    _write_json(out / "report.json", summary)
    _write_json(out / "manifest.json", _manifest(args, digest, None, ["report.txt", "margins.csv", "report.json"]))
    print(headline)
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cphase", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cphase {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="strict JSON scenario file")
        p.add_argument("--out", required=True, help="output directory")
        return p

    p = common(sub.add_parser("simulate", help="integrate a scenario and write a trajectory CSV"))
    p.add_argument("--seed", type=int, default=None, help="override the simulation seed")
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("linearize", help="alpha-beta, dq and complex-phase linearizations of one bus"))
    p.add_argument("--bus", type=int, default=None)
    p.set_defaults(func=cmd_linearize)

    p = common(sub.add_parser("identify", help="fit an H-W normal form to a trajectory CSV"))
    p.add_argument("--bus", type=int, default=None)
    p.add_argument("--order", type=int, default=None, help="internal state dimension n_x")
    p.set_defaults(func=cmd_identify)

    p = common(sub.add_parser("certify", help="stability certificate plus eigenvalue cross-check"))
    p.add_argument("--gamma-max", type=float, default=None)
    p.add_argument("--dphi-max", type=float, default=None)
    p.add_argument("--s-grid", default=None, metavar="MIN,MAX,N")
    p.add_argument("--crosstalk-direction", choices=DIRECTIONS, default=None)
    p.set_defaults(func=cmd_certify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CertificateRefusal, BoundsViolation) as exc:
        print(f"certificate refused: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except (PowerFlowError, SimulationError, ResonanceError, RankDeficientError, PhaseInvarianceError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except KeyError as exc:
        print(f"config error: {exc.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, ValueError, IndexError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
