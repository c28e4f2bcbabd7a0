"""Fast invariant checks behind ``extform selftest``."""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from .autodiff import adjoint
from .extop import OperatorImpl
from .fem import assemble, unit_interval_mesh, unit_square_mesh
from .inverse import Objective, ObservationSet, WaveProblem, build_reduced_functional, forward_wave, taylor_test
from .mlp import PointwiseNeuralOperator, forward_values, init_mlp, load_weights, mlp_vjp, neuralnet
from .symbolic import Coefficient, TestFunction, TrialFunction, dx, grad, inner


def _small_wave(rng):
    mesh = unit_interval_mesh(30)
    x = mesh.vertices[:, 0]

    def src(x, t):
        return 50 * np.exp(-((x - 0.5) / 0.04) ** 2) * np.exp(-((t - 0.08) / 0.03) ** 2)

    problem = WaveProblem(mesh, dt=0.4 / 30, steps=60, source=src, max_speed=1.25)
    c_true = 1 + 0.1 * np.exp(-((x - 0.35) / 0.06) ** 2)
    obs = ObservationSet.from_trajectory(forward_wave(problem, c_true), 2)
    return mesh, problem, obs


def check_matrix_adjoint(rng):
    mesh = unit_square_mesh(4, 4)
    V = mesh.function_space()
    u, v = TrialFunction(V), TestFunction(V)
    w = Coefficient(V)
    a = (w * u * v + inner(grad(u), grad(v)) * w * w) * dx
    bind = {w: rng.uniform(0.5, 1.5, V.dimension())}
    A = assemble(a, bind)
    At = assemble(adjoint(a), bind)
    p, q = rng.standard_normal((2, V.dimension()))
    err = abs(q @ (A @ p) - p @ (At @ q)) / abs(q @ (A @ p))
    return err < 1e-10, f"relative error {err:.1e}"


def check_vjp_consistency(rng):
    impl: OperatorImpl = PointwiseNeuralOperator((1, 8, 8, 1))
    model = init_mlp((1, 8, 8, 1), int(rng.integers(1 << 30)))
    ops = [rng.uniform(0, 2, 12), model.values]
    worst = 0.0
    for i in (0, 1):
        d = rng.standard_normal(len(ops[i]))
        y = rng.standard_normal(12)
        lhs = y @ impl.jvp(i, ops, d)
        rhs = d @ impl.vjp(i, ops, y)
        worst = max(worst, abs(lhs - rhs) / abs(lhs))
    return worst < 1e-10, f"relative error {worst:.1e}"


def check_mlp_fd(rng):
    model = init_mlp((1, 6, 6, 1), int(rng.integers(1 << 30)))
    x, h = 0.7, 1e-6

    def f(m, z):
        return float(forward_values(model.layer_sizes, m, z)[0])

    xbar, mbar = mlp_vjp(model, x, 1.0)
    fd_x = (f(model.values, x + h) - f(model.values, x - h)) / (2 * h)
    e = np.eye(model.num_params)
    fd_m = np.array([(f(model.values + h * e[k], x) - f(model.values - h * e[k], x)) / (2 * h)
                     for k in range(model.num_params)])
    err = max(abs(xbar - fd_x) / abs(xbar), np.linalg.norm(mbar - fd_m) / np.linalg.norm(mbar))
    return err < 1e-5, f"relative error {err:.1e}"


def _taylor_rates(rf, base, rng):
    res = taylor_test(rf, base, rng.standard_normal(len(base)) * 0.05)
    return min(res.rates[-2:]), res.rates


def check_taylor_velocity(rng):
    mesh, problem, obs = _small_wave(rng)
    rf = build_reduced_functional(problem, obs, Objective(1e-4, "tikhonov"), problem.c,
                                  {problem.c: np.ones(problem.V.dimension())})
    worst, rates = _taylor_rates(rf, np.ones(problem.V.dimension()), rng)
    return worst >= 1.9, "rates " + ", ".join(f"{r:.3f}" for r in rates)


def check_taylor_params(rng):
    mesh, problem, obs = _small_wave(rng)
    net = init_mlp((1, 6, 1), int(rng.integers(1 << 30)))
    m = net.values.copy()
    m[-7:-1] *= 0.1
    m[-1] = 1.0
    net = net.with_values(m)
    coord = Coefficient(problem.V, label="x")
    speed = neuralnet(net)(coord)
    p2 = WaveProblem(mesh, problem.dt, problem.steps, source=problem.source, max_speed=1.25, speed=speed)
    rf = build_reduced_functional(p2, obs, Objective(), net.params, {coord: mesh.vertices[:, 0], net.params: m})
    worst, rates = _taylor_rates(rf, m, rng)
    return worst >= 1.9, "rates " + ", ".join(f"{r:.3f}" for r in rates)


def make_neural_check(weights_path):
    def check_taylor_neural(rng):
        mesh, problem, obs = _small_wave(rng)
        if weights_path:
            model = load_weights(weights_path)
        else:
            model = init_mlp((1, 8, 1), 0)
        obj = Objective(1e-3, "neural", neuralnet(model), model.bindings())
        base = np.ones(problem.V.dimension())
        rf = build_reduced_functional(problem, obs, obj, problem.c, {problem.c: base})
        worst, rates = _taylor_rates(rf, base, rng)
        return worst >= 1.9, "rates " + ", ".join(f"{r:.3f}" for r in rates)

    return check_taylor_neural


def run_checks(checks, seed: int = 0) -> list:
    """Run ``(name, fn)`` pairs; returns ``(name, passed, detail, seconds)`` rows."""
    rows = []
    for name, fn in checks:
        rng = np.random.default_rng(seed)
        start = time.perf_counter()
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crash is a failed check, not a crashed suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        rows.append((name, bool(ok), detail, time.perf_counter() - start))
    return rows


def default_checks(weights_path: str = ""):
    return [
        ("matrix adjoint identity", check_matrix_adjoint),
        ("operator vjp/jvp consistency", check_vjp_consistency),
        ("mlp backprop vs finite differences", check_mlp_fd),
        ("taylor test, velocity control", check_taylor_velocity),
        ("taylor test, network parameters", check_taylor_params),
        ("taylor test, neural regulariser", make_neural_check(weights_path)),
    ]


def format_table(rows, timing: bool = False) -> str:
    width = max(len(r[0]) for r in rows)
    lines = []
    for name, ok, detail, secs in rows:
        extra = f" ({secs:.2f}s)" if timing else ""
        lines.append(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}{extra}")
    return "\n".join(lines)


def run_selftest(cfg, out: Path) -> int:
    rows = run_checks(default_checks(cfg["weights"]), cfg["seed"])
    table = format_table(rows, cfg["timing"])
    print(table)
    (Path(out) / "selftest.txt").write_text(table + "\n")
    failed = [r[0] for r in rows if not r[1]]
    if failed:
        print(f"selftest: {len(failed)} failed: {', '.join(failed)}")
        return 1
    print(f"selftest: all {len(rows)} checks passed")
    return 0
