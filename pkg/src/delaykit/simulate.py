"""Closed-loop simulation of predictor feedback under input delay.

The plant dX/dt = f(X(t), U(t-D)) is integrated with RK4 while the control
U(t) = kappa(P_hat(t), t+D) is computed from a pluggable predictor (exact
oracle, successive approximations, neural, or a noise-perturbed wrapper).
The kappa time argument is advanced by D because the prediction targets the
future reference point of the tracking task.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError, NonFiniteError
from .predictor import (
    ControlHistory,
    SolverConfig,
    infer_grid_count,
    predict_dense_oracle,
    predict_successive,
)
from .systems import rk4_step

DIVERGENCE_LIMIT = 1e6


def assemble_history(inputs, step, grid_count, dt, head="hold", initial_fn=None):
    """Build the (N+1, m) causal input-history grid at step `step`.

    Node k corresponds to time (step - N + k)*dt.  Nodes before t=0 come
    from the initial input function (default zero), intermediate nodes from
    issued controls, and the newest node -- whose control is only being
    computed now -- from a causal head estimate: ``hold`` repeats the last
    issued sample, ``extrapolate`` continues the last two linearly.
    """
    m = inputs.shape[1] if inputs.ndim == 2 else 1
    out = np.zeros((grid_count + 1, m))
    for k in range(grid_count + 1):
        j = step - grid_count + k
        if j < 0:
            if initial_fn is not None:
                out[k] = initial_fn(j * dt)
        elif j <= step - 1:
            out[k] = inputs[j]
        else:  # j == step: head estimate
            if step == 0:
                if initial_fn is not None:
                    out[k] = initial_fn(0.0)
            elif step == 1 or head == "hold":
                out[k] = inputs[step - 1]
            else:
                out[k] = 2.0 * inputs[step - 1] - inputs[step - 2]
    return out


class DelayLine:
    """Input-delay buffer spanning the last D seconds of issued controls.

    Controls are pushed once per step at times 0, dt, 2*dt, ...; times
    before the first push are covered by the initial input function
    (default identically zero).  ``value_at`` linearly interpolates between
    samples, matching the piecewise-linear history model the predictors
    integrate.
    """

    def __init__(self, dt, delay, input_dim, initial_fn=None, head="hold"):
        self.dt = dt
        self.delay = delay
        self.grid_count = infer_grid_count(delay, dt)
        self.input_dim = input_dim
        self.initial_fn = initial_fn
        if head not in ("hold", "extrapolate"):
            raise ValueError(f"unknown head mode {head!r}")
        self.head = head
        self._issued = []

    @property
    def count(self):
        return len(self._issued)

    def push(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape != (self.input_dim,):
            raise GridMismatchError("control dimension mismatch on push")
        self._issued.append(u)

    def _sample(self, j):
        if j < 0:
            if self.initial_fn is None:
                return np.zeros(self.input_dim)
            return np.asarray(self.initial_fn(j * self.dt), dtype=float)
        return self._issued[j]

    def value_at(self, tau):
        """Interpolated input at absolute time tau within [t_now - D, t_now]."""
        t_now = (self.count - 1) * self.dt
        if tau < t_now - self.delay - 1e-9 or tau > t_now + 1e-9:
            raise GridMismatchError(
                f"delay-line query at {tau:.6f} outside [{t_now - self.delay:.6f}, "
                f"{t_now:.6f}]"
            )
        pos = tau / self.dt
        j = int(np.floor(pos + 1e-9))
        frac = pos - j
        if frac < 1e-9:
            return self._sample(j)
        return (1.0 - frac) * self._sample(j) + frac * self._sample(j + 1)

    def history(self):
        """Causal ControlHistory for the step about to be computed."""
        step = self.count
        if step == 0:
            inputs = np.zeros((0, self.input_dim))
        else:
            inputs = np.asarray(self._issued)
        values = assemble_history(
            inputs, step, self.grid_count, self.dt, self.head, self.initial_fn
        )
        return ControlHistory(self.dt, values, t_now=step * self.dt)


class ExactPredictor:
    """Dense RK4 oracle wrapped as a closed-loop predictor ("exact")."""

    kind = "exact"

    def __init__(self, refine=40):
        self.refine = refine

    def predict(self, system, x, hist):
        return predict_dense_oracle(system, x, hist, self.refine)


class SuccessivePredictor:
    """Picard fixed-point predictor; the production numerical path."""

    kind = "successive"

    def __init__(self, cfg: SolverConfig | None = None):
        self.cfg = cfg if cfg is not None else SolverConfig()
        self.nonconverged = 0
        self.calls = 0

    def predict(self, system, x, hist):
        res = predict_successive(system, x, hist, self.cfg)
        self.calls += 1
        if not res.converged:
            self.nonconverged += 1
        return res.solution


class NeuralPredictor:
    """Trained nonlocal-neural-operator predictor."""

    kind = "neural"

    def __init__(self, model):
        self.model = model

    def predict(self, system, x, hist):
        from .nno import nno_predict

        return nno_predict(self.model, x, hist)


class PerturbedPredictor:
    """Wraps a predictor and adds per-step uniform(-eps, eps) output noise.

    Noise is drawn as eps * uniform(-1, 1) per state channel so runs with
    the same seed share the underlying noise realization across eps values
    (common random numbers, and eps=0 is bit-identical to the inner
    predictor).  Only the D-ahead prediction row is perturbed -- it is the
    only value the control law consumes.
    """

    def __init__(self, inner, epsilon, seed=0):
        self.inner = inner
        self.epsilon = float(epsilon)
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    @property
    def kind(self):
        return f"perturbed({self.inner.kind},eps={self.epsilon})"

    def predict(self, system, x, hist):
        sol = self.inner.predict(system, x, hist)
        noise = self.epsilon * self._rng.uniform(-1.0, 1.0, size=sol.values.shape[1])
        values = sol.values.copy()
        values[-1] = values[-1] + noise
        return type(sol)(sol.dt, values)


@dataclass(frozen=True)
class LoopConfig:
    dt: float = 0.1
    duration: float = 10.0
    delay: float = 0.5
    integrator: str = "rk4"
    init_policy: str = "sampled"  # or "fixed" (x0 passed explicitly)
    init_noise: float = 0.05
    seed: int = 0
    head: str = "extrapolate"

    def __post_init__(self):
        infer_grid_count(self.delay, self.dt)
        steps = int(round(self.duration / self.dt))
        if abs(steps * self.dt - self.duration) > 1e-9 * max(1.0, self.duration):
            raise GridMismatchError("dt must divide duration")
        if self.integrator != "rk4":
            raise ValueError("only rk4 is supported")


@dataclass
class TrajectoryRecord:
    """One closed-loop rollout.

    All per-step sequences have one row per control step i (time i*dt);
    ``final_state`` is X(T).  ``pred_errors[i]`` compares the used
    prediction with the realized state X(t_i + D) and is NaN once t_i + D
    runs past the horizon.
    """

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    delayed_inputs: np.ndarray
    predictions: np.ndarray
    pred_errors: np.ndarray
    track_errors: np.ndarray
    final_state: np.ndarray
    diverged: bool
    predictor_kind: str
    dt: float
    delay: float
    metadata: dict = field(default_factory=dict)

    @property
    def steps(self):
        return len(self.times)

    def to_csv(self, path):
        n = self.states.shape[1]
        m = self.inputs.shape[1]
        with open(path, "w", newline="") as fh:
            for key, val in sorted(self.metadata.items()):
                fh.write(f"# {key}={val}\n")
            writer = csv.writer(fh)
            header = (
                ["t"]
                + [f"x_{i}" for i in range(n)]
                + [f"u_{j}" for j in range(m)]
                + [f"u_delayed_{j}" for j in range(m)]
                + [f"phat_{i}" for i in range(n)]
                + ["pred_err", "track_err"]
            )
            writer.writerow(header)
            for i in range(self.steps):
                row = (
                    [repr(self.times[i])]
                    + [repr(v) for v in self.states[i]]
                    + [repr(v) for v in self.inputs[i]]
                    + [repr(v) for v in self.delayed_inputs[i]]
                    + [repr(v) for v in self.predictions[i]]
                    + [repr(self.pred_errors[i]), repr(self.track_errors[i])]
                )
                writer.writerow(row)


def run_closed_loop(system, predictor, cfg: LoopConfig, x0=None):
    """Simulate predictor feedback; returns a TrajectoryRecord.

    Per step: build the causal history, evaluate the predictor, apply
    U = kappa(P_hat, t + D), push U into the delay line, then advance the
    plant one RK4 step with the delayed input interpolated at stage times.
    Divergence (|X| > 1e6 or non-finite) aborts with a flagged partial
    record.
    """
    steps = int(round(cfg.duration / cfg.dt))
    N = infer_grid_count(cfg.delay, cfg.dt)
    if x0 is None:
        if cfg.init_policy == "sampled":
            rng = np.random.default_rng(cfg.seed)
            x0 = system.sample_initial_state(rng, -cfg.init_noise, cfg.init_noise)
        else:
            raise ValueError("init_policy 'fixed' requires an explicit x0")
    x = np.asarray(x0, dtype=float).copy()
    line = DelayLine(cfg.dt, cfg.delay, system.m, head=cfg.head)
    times = np.arange(steps) * cfg.dt
    states = np.full((steps, system.n), np.nan)
    inputs = np.full((steps, system.m), np.nan)
    delayed = np.full((steps, system.m), np.nan)
    predictions = np.full((steps, system.n), np.nan)
    track_errors = np.full(steps, np.nan)
    diverged = False
    final_state = x.copy()
    done = 0
    for i in range(steps):
        t = times[i]
        states[i] = x
        track_errors[i] = np.linalg.norm(x - system.desired_state(t))
        hist = line.history()
        try:
            sol = predictor.predict(system, x, hist)
            u = np.asarray(system.nominal_control(sol.prediction, t + cfg.delay))
            line.push(u)
            inputs[i] = u
            delayed[i] = line.value_at(t - cfg.delay)
            predictions[i] = sol.prediction

            def rhs(s, y):
                return system.dynamics(y, line.value_at(t + s - cfg.delay))

            x = rk4_step(rhs, x, cfg.dt)
        except NonFiniteError:
            diverged = True
            done = i + 1
            break
        done = i + 1
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_LIMIT:
            diverged = True
            break
        final_state = x.copy()
    if diverged:
        times = times[:done]
        states = states[:done]
        inputs = inputs[:done]
        delayed = delayed[:done]
        predictions = predictions[:done]
        track_errors = track_errors[:done]
    # prediction error vs. the realized state D seconds later
    pred_errors = np.full(len(times), np.nan)
    for i in range(len(times)):
        j = i + N
        if j < len(times):
            target = states[j]
        elif j == len(times) and not diverged:
            target = final_state
        else:
            continue
        pred_errors[i] = np.linalg.norm(target - predictions[i])
    return TrajectoryRecord(
        times=times,
        states=states,
        inputs=inputs,
        delayed_inputs=delayed,
        predictions=predictions,
        pred_errors=pred_errors,
        track_errors=track_errors,
        final_state=final_state,
        diverged=diverged,
        predictor_kind=predictor.kind,
        dt=cfg.dt,
        delay=cfg.delay,
        metadata={"head": cfg.head, "seed": cfg.seed},
    )


@dataclass
class Metrics:
    tracking_l2_sum: float
    prediction_l2_mean: float
    prediction_l2_sum: float
    max_state_norm: float
    diverged: bool


def compute_metrics(record: TrajectoryRecord):
    """Table-style summary of one rollout."""
    valid = np.isfinite(record.pred_errors)
    pred_mean = float(np.mean(record.pred_errors[valid])) if np.any(valid) else np.nan
    pred_sum = float(np.sum(record.pred_errors[valid])) if np.any(valid) else np.nan
    return Metrics(
        tracking_l2_sum=float(np.sum(record.track_errors) * record.dt),
        prediction_l2_mean=pred_mean,
        prediction_l2_sum=pred_sum,
        max_state_norm=float(np.max(np.linalg.norm(record.states, axis=1))),
        diverged=record.diverged,
    )


@dataclass
class EpsilonCell:
    epsilon: float
    residuals: np.ndarray  # per-trial asymptotic tracking residual
    median_residual: float
    mean_residual: float
    max_state_norm: float
    diverged_trials: int


def asymptotic_residual(record: TrajectoryRecord, fraction=0.2):
    """Mean tracking error over the final `fraction` of the horizon."""
    if record.diverged:
        return np.inf
    tail = max(1, int(round(fraction * record.steps)))
    return float(np.mean(record.track_errors[-tail:]))


def epsilon_sweep(system, base_predictor, eps_list, trials, cfg: LoopConfig, seed=0):
    """Practical-stability sweep: residual vs. prediction-error bound eps.

    For each eps the base predictor is wrapped with output noise
    uniform(-eps, eps); trials share initial conditions and underlying
    noise draws across eps (common random numbers), so eps=0 reproduces the
    unperturbed rollout bit-exactly.
    """
    eps_list = list(eps_list)
    if sorted(eps_list) != eps_list or eps_list[0] != 0:
        raise ValueError("eps_list must be ascending and start at 0")
    cells = []
    for eps in eps_list:
        residuals = np.empty(trials)
        max_norm = 0.0
        diverged = 0
        for trial in range(trials):
            trial_rng = np.random.default_rng([seed, trial])
            x0 = system.sample_initial_state(
                trial_rng, -cfg.init_noise, cfg.init_noise
            )
            pred = PerturbedPredictor(base_predictor, eps, seed=[seed, trial, 17])
            rec = run_closed_loop(system, pred, cfg, x0=x0)
            residuals[trial] = asymptotic_residual(rec)
            if rec.diverged:
                diverged += 1
            else:
                max_norm = max(
                    max_norm, float(np.max(np.linalg.norm(rec.states, axis=1)))
                )
        cells.append(
            EpsilonCell(
                epsilon=eps,
                residuals=residuals,
                median_residual=float(np.median(residuals)),
                mean_residual=float(np.mean(residuals)),
                max_state_norm=max_norm,
                diverged_trials=diverged,
            )
        )
    return cells
