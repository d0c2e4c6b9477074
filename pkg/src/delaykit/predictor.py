"""Numerical predictors for input-delay compensation.

The predictor maps the current state X(t) and the control history over
[t-D, t] to the solution P of the implicit integral equation

    P(theta) = X(t) + int_{-D}^{theta} f(P(s), U(s)) ds,   theta in [-D, 0],

so P(0) is the D-seconds-ahead state prediction.  Two solvers are provided:

* ``predict_successive`` -- Picard (successive approximation) fixed-point
  iteration on the grid, the production path;
* ``predict_dense_oracle`` -- sub-grid RK4 forward integration, used as an
  independent ground truth by tests and verification, never in the loop.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError, NonFiniteError
from .systems import estimate_lipschitz


def infer_grid_count(delay, dt):
    """Number of grid intervals N = D/dt; raises unless dt divides D."""
    n = int(round(delay / dt))
    if n < 1 or abs(n * dt - delay) > 1e-9 * max(1.0, delay):
        raise GridMismatchError(f"dt={dt} does not divide delay={delay}")
    return n


@dataclass(frozen=True)
class ControlHistory:
    """Uniform samples of the input over the last D seconds.

    values[k] is U(t_now - D + k*dt) for k = 0..N; values[-1] is the newest
    sample.  The underlying continuous-time history is the piecewise-linear
    interpolant of these samples.
    """

    dt: float
    values: np.ndarray  # (N+1, m)
    t_now: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] < 2:
            raise GridMismatchError("history values must be (N+1, m) with N >= 1")
        if self.dt <= 0:
            raise GridMismatchError("history dt must be positive")
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("non-finite control history")
        object.__setattr__(self, "values", v)

    @property
    def grid_count(self):
        return self.values.shape[0] - 1

    @property
    def delay(self):
        return self.grid_count * self.dt

    @property
    def input_dim(self):
        return self.values.shape[1]

    def at_offset(self, theta):
        """Linear interpolation at offset theta in [-D, 0]."""
        pos = (theta + self.delay) / self.dt
        j = min(max(int(np.floor(pos + 1e-12)), 0), self.grid_count - 1)
        frac = min(max(pos - j, 0.0), 1.0)
        return (1.0 - frac) * self.values[j] + frac * self.values[j + 1]


@dataclass(frozen=True)
class PredictorSolution:
    """Predicted state trajectory on the history grid.

    values[k] is P(-D + k*dt); values[0] is the anchoring state X(t) and
    values[-1] = P(0) is the D-ahead prediction.
    """

    dt: float
    values: np.ndarray  # (N+1, n)

    @property
    def grid_count(self):
        return self.values.shape[0] - 1

    @property
    def delay(self):
        return self.grid_count * self.dt

    @property
    def prediction(self):
        return self.values[-1]


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-7
    max_iters: int = 100
    integration: str = "trapezoid"  # or "left-euler"

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.integration not in ("trapezoid", "left-euler"):
            raise ValueError(f"unknown quadrature {self.integration!r}")


@dataclass
class PredictorResult:
    solution: PredictorSolution
    iters: int
    residual: float
    converged: bool
    residual_history: list = field(default_factory=list)


def _eval_dynamics_grid(system, P, U):
    """f(P_k, U_k) for every grid row; batched when the system supports it."""
    if hasattr(system, "dynamics_batch"):
        return system.dynamics_batch(P, U)
    out = np.empty_like(P)
    for k in range(P.shape[0]):
        out[k] = system.dynamics(P[k], U[k])
    return out


def _cumulative_quadrature(g, dt, rule, out=None):
    """Cumulative integral of grid samples g from the first node.

    trapezoid: I_j = dt * (g_0/2 + g_1 + ... + g_{j-1} + g_j/2)
    left-euler: I_j = dt * (g_0 + ... + g_{j-1})
    """
    if out is None:
        out = np.empty_like(g)
    out[0] = 0.0
    if rule == "trapezoid":
        np.cumsum(0.5 * dt * (g[:-1] + g[1:]), axis=0, out=out[1:])
    else:
        np.cumsum(dt * g[:-1], axis=0, out=out[1:])
    return out


def predict_successive(system, x, hist: ControlHistory, cfg: SolverConfig | None = None):
    """Solve the predictor equation by Picard iteration.

    Starts from the constant guess P(theta) = x and applies
    P <- x + int f(P, U) with the configured quadrature until the sup-norm
    self-consistency residual ||P - x - int f(P, U)||_inf drops below tol.
    The returned residual is exact for the returned iterate.  On hitting
    max_iters the best iterate is returned with ``converged=False`` so the
    closed loop can keep running.
    """
    cfg = cfg if cfg is not None else SolverConfig()
    x = np.asarray(x, dtype=float)
    U = hist.values
    grid = U.shape[0]
    P = np.tile(x, (grid, 1))
    integral = np.empty_like(P)
    residuals = []
    iters = 0
    best = None
    for _ in range(cfg.max_iters + 1):
        g = _eval_dynamics_grid(system, P, U)
        _cumulative_quadrature(g, hist.dt, cfg.integration, out=integral)
        fixed = x + integral
        if not np.all(np.isfinite(fixed)):
            raise NonFiniteError(
                f"predictor iterate blew up after {iters} iterations"
            )
        res = float(np.max(np.linalg.norm(fixed - P, axis=1)))
        residuals.append(res)
        if best is None or res <= best[1]:
            best = (P, res, iters)
        if res <= cfg.tol:
            return PredictorResult(
                PredictorSolution(hist.dt, P), iters, res, True, residuals
            )
        if iters == cfg.max_iters:
            break
        P = fixed
        iters += 1
    bP, bres, biters = best
    return PredictorResult(
        PredictorSolution(hist.dt, bP), biters, bres, False, residuals
    )


def predict_dense_oracle(system, x, hist: ControlHistory, refine=100):
    """Forward-integrate dP/ds = f(P, U(s)) with RK4 at dt/refine.

    The history between grid points is the piecewise-linear interpolant.
    Returns the solution subsampled to the coarse grid.  Test/verification
    oracle only -- too slow for the control loop.
    """
    if refine < 1:
        raise ValueError("refine must be >= 1")
    x = np.asarray(x, dtype=float)
    U = hist.values
    grid = U.shape[0]
    h = hist.dt / refine
    out = np.empty((grid, x.size))
    out[0] = x
    P = x.copy()
    for k in range(grid - 1):
        u0 = U[k]
        du = U[k + 1] - U[k]
        for r in range(refine):
            s0 = (r) / refine
            sh = 0.5 / refine
            u_a = u0 + du * s0
            u_b = u0 + du * (s0 + sh)
            u_c = u0 + du * (s0 + 2 * sh)
            k1 = system.dynamics(P, u_a)
            k2 = system.dynamics(P + 0.5 * h * k1, u_b)
            k3 = system.dynamics(P + 0.5 * h * k2, u_b)
            k4 = system.dynamics(P + h * k3, u_c)
            P = P + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(P)):
            raise NonFiniteError("dense oracle integration blew up")
        out[k + 1] = P
    return PredictorSolution(hist.dt, out)


def predictor_lipschitz_bound(cf, delay):
    """Closed-form Lipschitz constant of the predictor operator.

    C_P = max(1, D*C_f) * exp(D*C_f) bounds the sensitivity of the
    predicted trajectory to (state, history) perturbations in the sup norm.
    """
    if cf < 0:
        raise ValueError("cf must be non-negative")
    if delay <= 0:
        raise ValueError("delay must be positive")
    dcf = delay * cf
    return max(1.0, dcf) * float(np.exp(dcf))


@dataclass
class ContinuityReport:
    max_ratio: float
    c_f: float
    c_p: float
    passed: bool
    pairs: int


def check_predictor_continuity(
    system, pairs, box_x, box_u, seed=0, delay=0.5, dt=0.1, refine=40, cf_samples=20000
):
    """Empirical audit of the predictor operator's Lipschitz bound.

    Samples random (state, history) pairs from the boxes, solves both
    predictors with the dense oracle and compares the worst observed ratio

        ||P1 - P2||_inf / (|X1 - X2| + ||U1 - U2||_inf)

    against C_P computed from a Lipschitz constant estimated over a box
    large enough to contain every predictor trajectory encountered (the
    bound only holds with f Lipschitz on a set covering the trajectories).
    Identical input pairs are skipped.
    """
    lo_x, hi_x = (np.asarray(b, dtype=float) for b in box_x)
    lo_u, hi_u = (np.asarray(b, dtype=float) for b in box_u)
    grid = infer_grid_count(delay, dt) + 1
    rng = np.random.default_rng(seed)
    max_ratio = 0.0
    seen_lo = lo_x.copy()
    seen_hi = hi_x.copy()
    for _ in range(pairs):
        x1 = rng.uniform(lo_x, hi_x)
        x2 = rng.uniform(lo_x, hi_x)
        u1 = rng.uniform(lo_u, hi_u, size=(grid, lo_u.size))
        u2 = rng.uniform(lo_u, hi_u, size=(grid, lo_u.size))
        den = float(
            np.linalg.norm(x1 - x2) + np.max(np.linalg.norm(u1 - u2, axis=1))
        )
        if den == 0.0:
            continue
        p1 = predict_dense_oracle(system, x1, ControlHistory(dt, u1), refine)
        p2 = predict_dense_oracle(system, x2, ControlHistory(dt, u2), refine)
        num = float(np.max(np.linalg.norm(p1.values - p2.values, axis=1)))
        max_ratio = max(max_ratio, num / den)
        seen_lo = np.minimum(seen_lo, np.minimum(p1.values.min(0), p2.values.min(0)))
        seen_hi = np.maximum(seen_hi, np.maximum(p1.values.max(0), p2.values.max(0)))
    if system.lipschitz_cf is not None:
        cf = system.lipschitz_cf
    else:
        cf = estimate_lipschitz(
            system, (seen_lo, seen_hi), (lo_u, hi_u), samples=cf_samples, seed=seed + 1
        )
    c_p = predictor_lipschitz_bound(cf, delay)
    return ContinuityReport(max_ratio, cf, c_p, max_ratio <= c_p, pairs)
