"""Command-line entry point: ``extform {helmholtz,forward,pretrain,invert,selftest}``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .demos import fitted_rate, make_mesh, point_source, solve_helmholtz, truth_velocity
from .errors import ConfigError, ExtformError, NumericalError, UsageError
from .fem.io import read_field_csv, write_field_csv
from .inverse import (
    Objective,
    ObservationSet,
    WaveProblem,
    build_reduced_functional,
    forward_wave,
    minimize_lbfgs,
)
from .mlp import MlpModel, init_mlp, load_weights, neuralnet, pretrain, range_penalty, save_weights
from .symbolic import Coefficient

DEFAULTS = {
    "out": "extform-out",
    "seed": 0,
    "timing": False,
    # meshes
    "dim": 1,
    "cells": 99,
    "nx": 24,
    "ny": 24,
    "helmholtz_n": 10,
    "helmholtz_levels": (8, 16, 32),
    # wave model
    "steps": 300,
    "dt_factor": 0.4,
    "stride": 3,
    "max_speed": 1.25,
    "c_background": 1.0,
    "anomaly_x": (0.3, 0.7),
    "anomaly_y": (0.5, 0.5),
    "anomaly_amplitude": (0.15, -0.15),
    "anomaly_width": 0.05,
    "source_x": 0.5,
    "source_y": 0.5,
    "source_width": 0.03,
    "source_amplitude": 100.0,
    "source_frequency": 8.0,
    "source_delay": 0.15,
    "phi0_amplitude": 0.0,
    # inversion
    "observations": "",
    "regulariser": "none",
    "control": "velocity",
    "alpha": 1e-5,
    "c_initial": 1.0,
    "maxiter": 20,
    "gtol": 1e-12,
    "memory": 10,
    "initial_step": 0.05,
    "lower_bound": "none",
    "upper_bound": "none",
    # networks
    "weights": "",
    "reg_layers": (1, 16, 16, 1),
    "reg_band": (0.5, 1.5),
    "vel_layers": (1, 16, 1),
    "vel_output_scale": 0.1,
    "pretrain_epochs": 20000,
    "pretrain_learning_rate": 0.05,
    "pretrain_samples": 256,
    "pretrain_range": (0.0, 3.0),
    "pretrain_log_every": 100,
}

CHOICES = {
    "regulariser": ("none", "tikhonov", "neural"),
    "control": ("velocity", "params"),
    "dim": (1, 2),
}


def _parse_value(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(t) for t in text.replace(",", " ").split())
        return type(default)(text)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {text!r}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Flat ``key = value`` configuration over :data:`DEFAULTS`."""

    def __init__(self, values: Optional[dict] = None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str) and not isinstance(DEFAULTS[key], str):
            value = _parse_value(key, value, DEFAULTS[key])
        if key in CHOICES and value not in CHOICES[key]:
            raise ConfigError(f"{key} must be one of {CHOICES[key]}, got {value!r}")
        self.values[key] = value

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = cls()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            cfg.set(key.strip(), value.strip())
        return cfg

    def apply_overrides(self, pairs) -> None:
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"--set expects key=value, got {pair!r}")
            key, value = pair.split("=", 1)
            self.set(key.strip(), value.strip())

    def dump(self) -> str:
        return "".join(f"{k} = {_format_value(self.values[k])}\n" for k in sorted(self.values))

    def write(self, outdir: Path) -> None:
        (outdir / "config.txt").write_text(self.dump())


# --------------------------------------------------------------------------
# Shared builders


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _bound(text):
    return None if text.strip().lower() == "none" else float(text)


def wave_setup(cfg: RunConfig):
    """Mesh, wave problem and true velocity for a config."""
    mesh = make_mesh(cfg["dim"], cfg["cells"], cfg["nx"], cfg["ny"])
    h = mesh.h_min
    source = None
    if cfg["source_amplitude"] != 0.0:
        source = point_source(mesh.dim, (cfg["source_x"], cfg["source_y"]), cfg["source_width"],
                              cfg["source_amplitude"], cfg["source_frequency"], cfg["source_delay"])
    phi0 = None
    if cfg["phi0_amplitude"] != 0.0:
        a = cfg["phi0_amplitude"]
        phi0 = (lambda x: a * np.sin(np.pi * x)) if mesh.dim == 1 else \
            (lambda x, y: a * np.sin(np.pi * x) * np.sin(np.pi * y))
    problem = WaveProblem(mesh, dt=cfg["dt_factor"] * h, steps=cfg["steps"], source=source, phi0=phi0,
                          max_speed=cfg["max_speed"])
    c_true = truth_velocity(mesh, cfg["c_background"], cfg["anomaly_x"], cfg["anomaly_y"],
                            cfg["anomaly_amplitude"], cfg["anomaly_width"])
    return mesh, problem, c_true


def snapshot_name(step: int) -> str:
    return f"obs_{step:05d}.csv"


def load_observations(cfg: RunConfig, mesh) -> ObservationSet:
    path = cfg["observations"]
    if not path:
        raise UsageError("no observations given; set observations = <forward output dir>")
    obs_dir = Path(path)
    if not obs_dir.is_dir():
        raise UsageError(f"observation directory {obs_dir} does not exist")
    stride = cfg["stride"]
    snapshots = []
    for step in range(stride, cfg["steps"] + 1, stride):
        f = obs_dir / snapshot_name(step)
        if not f.exists():
            raise UsageError(f"missing observation file {f}")
        try:
            snapshots.append(read_field_csv(f, mesh))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return ObservationSet(snapshots, stride)


def regulariser_model(cfg: RunConfig) -> MlpModel:
    path = cfg["weights"]
    if not path:
        raise UsageError("neural regulariser needs weights = <file> (see the pretrain command)")
    if not Path(path).exists():
        raise UsageError(f"weights file {path} does not exist")
    return load_weights(path)


def velocity_network(cfg: RunConfig) -> MlpModel:
    """Seeded coordinate network whose output starts near ``c_initial``."""
    model = init_mlp(cfg["vel_layers"], cfg["seed"])
    values = model.values.copy()
    n_last = cfg["vel_layers"][-2]
    values[-(n_last + 1):-1] *= cfg["vel_output_scale"]
    values[-1] = cfg["c_initial"]
    return model.with_values(values)


def build_inversion(cfg: RunConfig, obs: Optional[ObservationSet] = None):
    """Reduced functional, its initial control value and context for a config."""
    mesh, problem, c_true = wave_setup(cfg)
    if obs is None:
        obs = load_observations(cfg, mesh)
    operator, op_bindings = None, {}
    if cfg["regulariser"] == "neural":
        reg = regulariser_model(cfg)
        operator = neuralnet(reg)
        op_bindings = reg.bindings()
    objective = Objective(cfg["alpha"], cfg["regulariser"], operator, op_bindings)
    ctx = {"mesh": mesh, "c_true": c_true}
    if cfg["control"] == "velocity":
        x0 = np.full(problem.V.dimension(), cfg["c_initial"])
        rf = build_reduced_functional(problem, obs, objective, problem.c, {problem.c: x0})
        ctx["speed"] = lambda x: x
    else:
        net = velocity_network(cfg)
        coord = Coefficient(problem.V, label="x")
        xvals = mesh.vertices[:, 0]
        speed = neuralnet(net)(coord)
        problem = WaveProblem(mesh, dt=problem.dt, steps=problem.steps, source=problem.source,
                              phi0=problem.phi0, max_speed=problem.max_speed, speed=speed)
        x0 = net.values.copy()
        rf = build_reduced_functional(problem, obs, objective, net.params, {coord: xvals, net.params: x0})
        ctx["speed"] = lambda m: problem.speed_values({coord: xvals, net.params: m})
        ctx["network"] = net
    ctx["problem"] = problem
    return rf, x0, ctx


# --------------------------------------------------------------------------
# Commands


def cmd_helmholtz(cfg: RunConfig, out: Path) -> int:
    sol = solve_helmholtz(cfg["helmholtz_n"])
    write_field_csv(out / "solution.csv", sol.mesh, sol.u)
    levels = [solve_helmholtz(n) for n in cfg["helmholtz_levels"]]
    rate = fitted_rate([s.h for s in levels], [s.error for s in levels])
    lines = ["n,h,l2_error"] + [f"{s.n},{s.h!r},{s.error!r}" for s in levels]
    (out / "convergence.csv").write_text("\n".join(lines) + "\n")
    report = {"levels": [{"n": s.n, "h": s.h, "l2_error": s.error} for s in levels], "rate": rate,
              "solution_error": sol.error}
    (out / "report.json").write_text(_json(report) + "\n")
    print(f"helmholtz: n={cfg['helmholtz_n']} L2 error {sol.error:.3e}; fitted L2 order {rate:.3f}")
    return 0


def cmd_forward(cfg: RunConfig, out: Path) -> int:
    mesh, problem, c_true = wave_setup(cfg)
    traj = forward_wave(problem, c_true)
    write_field_csv(out / "c_true.csv", mesh, c_true)
    obs = ObservationSet.from_trajectory(traj, cfg["stride"])
    for step, snap in zip(obs.steps, obs.snapshots):
        write_field_csv(out / snapshot_name(step), mesh, snap)
    M = problem.mass
    norms = [float(np.sqrt(s.values @ (M @ s.values))) for s in traj.states]
    summary = {"snapshots": len(obs.snapshots), "steps": problem.steps, "stride": obs.stride,
               "dt": problem.dt, "dofs": problem.V.dimension(), "max_l2_norm": max(norms)}
    (out / "forward.json").write_text(_json(summary) + "\n")
    print(f"forward: {len(obs.snapshots)} snapshots written to {out}")
    return 0


def cmd_pretrain(cfg: RunConfig, out: Path) -> int:
    model = init_mlp(cfg["reg_layers"], cfg["seed"])
    target = range_penalty(*cfg["reg_band"])
    result = pretrain(model, target, cfg["pretrain_range"], cfg["pretrain_epochs"],
                      cfg["pretrain_learning_rate"], cfg["pretrain_samples"])
    save_weights(out / "weights.txt", result.model)
    every = max(1, cfg["pretrain_log_every"])
    rows = ["epoch,loss"] + [f"{k},{loss!r}" for k, loss in enumerate(result.losses)
                              if k % every == 0 or k == len(result.losses) - 1]
    (out / "loss.csv").write_text("\n".join(rows) + "\n")
    print(f"pretrain: final MSE {result.losses[-1]:.3e}; weights in {out / 'weights.txt'}")
    return 0


def cmd_invert(cfg: RunConfig, out: Path) -> int:
    rf, x0, ctx = build_inversion(cfg)
    bounds = None
    lo, hi = _bound(cfg["lower_bound"]), _bound(cfg["upper_bound"])
    if lo is not None or hi is not None:
        bounds = (-np.inf if lo is None else lo, np.inf if hi is None else hi)
    start = time.perf_counter()
    result = minimize_lbfgs(rf, x0, memory=cfg["memory"], max_iter=cfg["maxiter"], gtol=cfg["gtol"],
                            bounds=bounds, initial_step=cfg["initial_step"], timing=cfg["timing"])
    wall = time.perf_counter() - start
    c = ctx["speed"](result.x)
    write_field_csv(out / "c_recovered.csv", ctx["mesh"], c)
    with open(out / "iterations.jsonl", "w") as fh:
        for entry in result.log:
            fh.write(_json(entry) + "\n")
    if cfg["control"] == "params":
        save_weights(out / "velocity_weights.txt", ctx["network"].with_values(result.x))
    M = ctx["problem"].mass
    diff = c - ctx["c_true"]
    summary = {
        "regulariser": cfg["regulariser"],
        "control": cfg["control"],
        "initial_J": result.log[0]["J"],
        "final_J": result.J,
        "iterations": result.iterations,
        "converged": result.converged,
        "message": result.message,
        "gnorm": result.gnorm,
        "velocity_l2_error": float(np.sqrt(diff @ (M @ diff))),
        "wall_time_s": round(wall, 3) if cfg["timing"] else None,
    }
    (out / "summary.json").write_text(_json(summary) + "\n")
    print(f"invert[{cfg['regulariser']}/{cfg['control']}]: J {summary['initial_J']:.4e} -> "
          f"{summary['final_J']:.4e} in {result.iterations} iterations")
    return 0


def cmd_selftest(cfg: RunConfig, out: Path) -> int:
    from .selftest import run_selftest

    return run_selftest(cfg, out)


COMMANDS = {
    "helmholtz": cmd_helmholtz,
    "forward": cmd_forward,
    "pretrain": cmd_pretrain,
    "invert": cmd_invert,
    "selftest": cmd_selftest,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="extform", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--regulariser", choices=CHOICES["regulariser"])
        p.add_argument("--control", choices=CHOICES["control"])
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    cfg.apply_overrides(args.set)
    for key in ("out", "seed", "regulariser", "control"):
        value = getattr(args, key)
        if value is not None:
            cfg.set(key, value)
    return cfg


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        cfg.write(out)
        return COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    except ExtformError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
