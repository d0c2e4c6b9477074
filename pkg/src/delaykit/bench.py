"""Wall-clock comparison of numerical and neural predictors.

Times three operations per (delay, step-size) cell on identical inputs:
one fixed-point sweep of the successive-approximation solver, the full
solve to tolerance, and one neural-operator forward pass.  Inputs are
drawn near the tracking regime (on-reference state, feedforward-like
input history plus small noise) so the numerical solver operates in its
convergent regime at every grid.  Buffers and encodings are pre-allocated;
the timing loop measures the algorithm, not setup.
"""

import csv
import platform
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import DatasetSpec, generate_dataset
from .nno import NnoConfig, TrainConfig, encode_input, init_model, nno_forward, train_nno
from .predictor import (
    ControlHistory,
    SolverConfig,
    _cumulative_quadrature,
    _eval_dynamics_grid,
    infer_grid_count,
    predict_successive,
)

METHODS = ("numeric-one-iter", "numeric-full", "nno-forward")


@dataclass(frozen=True)
class BenchSpec:
    delays: tuple = (0.1, 0.5, 1.0)
    step_sizes: tuple = (0.1, 0.05, 0.01)
    repetitions: int = 1000
    warmup: int = 50
    models_mode: str = "retrain"  # retrain | fixed | fresh
    seed: int = 5
    channels: int = 16
    layers: int = 1
    train_trajectories: int = 6
    train_epochs: int = 40

    def __post_init__(self):
        for d in self.delays:
            for s in self.step_sizes:
                infer_grid_count(d, s)
        if self.models_mode not in ("retrain", "fixed", "fresh"):
            raise ValueError(f"unknown models mode {self.models_mode!r}")


@dataclass
class CellTiming:
    delay: float
    step_size: float
    grid_points: int
    method: str
    median_ms: float
    mean_ms: float
    std_ms: float
    repetitions: int


@dataclass
class BenchReport:
    spec: BenchSpec
    cells: list = field(default_factory=list)
    environment: dict = field(default_factory=dict)

    def cell(self, delay, step_size, method):
        for c in self.cells:
            if (
                c.method == method
                and abs(c.delay - delay) < 1e-12
                and abs(c.step_size - step_size) < 1e-12
            ):
                return c
        raise KeyError(f"no cell ({delay}, {step_size}, {method})")


def bench_inputs(system, delay, dt, seed=0):
    """Near-tracking-regime (state, history) pair for one grid cell."""
    N = infer_grid_count(delay, dt)
    rng = np.random.default_rng([seed, N])
    x = system.desired_state(0.0) + 0.02 * rng.standard_normal(system.n)
    values = np.empty((N + 1, system.m))
    for k in range(N + 1):
        t_k = -delay + k * dt
        values[k] = system.nominal_control(system.desired_state(t_k), t_k)
    values += 0.02 * rng.standard_normal(values.shape)
    return x, ControlHistory(dt, values)


def _time_callable(fn, repetitions, warmup):
    for _ in range(warmup):
        fn()
    samples = np.empty(repetitions)
    for i in range(repetitions):
        t0 = time.perf_counter_ns()
        fn()
        samples[i] = time.perf_counter_ns() - t0
    ms = samples / 1e6
    return float(np.median(ms)), float(np.mean(ms)), float(np.std(ms))


def _resample_history(hist, grid_points):
    """Linear resample of a history onto a different node count."""
    src = hist.values
    n_src = src.shape[0]
    pos = np.linspace(0.0, n_src - 1.0, grid_points)
    lo = np.clip(np.floor(pos).astype(int), 0, n_src - 2)
    frac = (pos - lo)[:, None]
    values = (1.0 - frac) * src[lo] + frac * src[lo + 1]
    return ControlHistory(hist.delay / (grid_points - 1), values)


def _model_for_cell(spec, system, delay, dt):
    grid = infer_grid_count(delay, dt) + 1
    cfg = NnoConfig(
        state_dim=system.n,
        input_dim=system.m,
        grid_points=grid,
        channels=spec.channels,
        layers=spec.layers,
    )
    if spec.models_mode == "fresh":
        return init_model(cfg, seed=spec.seed)
    length = max(4.0 * delay, 1.0)
    length = round(length / dt) * dt
    ds = generate_dataset(
        DatasetSpec(
            trajectories=spec.train_trajectories,
            traj_length=length,
            dt=dt,
            delay=delay,
            seed=spec.seed,
        ),
        system,
    )
    tc = TrainConfig(
        epochs=spec.train_epochs,
        batch_size=256,
        learning_rate=0.005,
        lr_decay=0.99,
        seed=spec.seed,
        adaptive=True,
    )
    model, _ = train_nno(ds, tc, cfg)
    return model


def run_bench(spec: BenchSpec, system, fixed_model=None):
    """Time the predictor variants over the delay x step-size grid.

    ``models_mode``: ``retrain`` fits a small model per grid cell,
    ``fresh`` times randomly initialized per-grid models (forward cost is
    parameter-independent), ``fixed`` resamples every cell's input onto
    ``fixed_model``'s grid.
    """
    report = BenchReport(
        spec=spec,
        environment={
            "cpu": platform.processor() or platform.machine(),
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "platform": platform.platform(),
        },
    )
    if spec.repetitions < 1:
        return report
    solver = SolverConfig(tol=1e-7, max_iters=200)
    for delay in spec.delays:
        for dt in spec.step_sizes:
            N = infer_grid_count(delay, dt)
            x, hist = bench_inputs(system, delay, dt, seed=spec.seed)
            U = hist.values
            # pre-allocated buffers for the single-sweep timing
            P = np.tile(x, (N + 1, 1))
            integral = np.empty_like(P)

            def one_iteration():
                g = _eval_dynamics_grid(system, P, U)
                _cumulative_quadrature(g, dt, solver.integration, out=integral)
                return x + integral

            def full_solve():
                return predict_successive(system, x, hist, solver)

            if spec.models_mode == "fixed":
                if fixed_model is None:
                    raise ValueError("models_mode 'fixed' requires fixed_model")
                model = fixed_model
                z = encode_input(x, _resample_history(hist, model.config.grid_points))
            else:
                model = _model_for_cell(spec, system, delay, dt)
                z = encode_input(x, hist)

            def nno_pass():
                return nno_forward(model, z)

            for method, fn in (
                ("numeric-one-iter", one_iteration),
                ("numeric-full", full_solve),
                ("nno-forward", nno_pass),
            ):
                med, mean, std = _time_callable(fn, spec.repetitions, spec.warmup)
                report.cells.append(
                    CellTiming(delay, dt, N + 1, method, med, mean, std, spec.repetitions)
                )
    return report


def report_to_csv(report: BenchReport, path):
    """Delay-major grid layout, one row per (cell, method)."""
    with open(path, "w", newline="") as fh:
        for key, val in sorted(report.environment.items()):
            fh.write(f"# {key}={val}\n")
        fh.write(f"# repetitions={report.spec.repetitions}\n")
        writer = csv.writer(fh)
        writer.writerow(
            ["delay", "step_size", "grid_points", "method", "median_ms", "mean_ms", "std_ms", "repetitions"]
        )
        for delay in report.spec.delays:
            for dt in report.spec.step_sizes:
                for method in METHODS:
                    c = report.cell(delay, dt, method)
                    writer.writerow(
                        [
                            repr(c.delay),
                            repr(c.step_size),
                            c.grid_points,
                            c.method,
                            repr(c.median_ms),
                            repr(c.mean_ms),
                            repr(c.std_ms),
                            c.repetitions,
                        ]
                    )


def parse_report_csv(path):
    """Read back a bench CSV; returns rows of (delay, dt, method, median_ms)."""
    rows = []
    with open(path) as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader)
        for rec in reader:
            d = dict(zip(header, rec))
            rows.append(
                (float(d["delay"]), float(d["step_size"]), d["method"], float(d["median_ms"]))
            )
    return rows
