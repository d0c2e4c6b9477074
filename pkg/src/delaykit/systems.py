"""Plant models and nominal delay-free controllers.

Two concrete systems are provided:

* ``LinearSystem`` -- dx/dt = A x + B u with a linear gain controller,
  used as an analytically tractable test plant.
* ``TwoLinkArm`` -- a planar 2-link manipulator with closed-form mass,
  Coriolis and gravity matrices and a computed-torque (feedback
  linearization) tracking controller for a sinusoidal joint reference.

Both expose the same small interface consumed by the predictor solvers and
the closed-loop simulator: ``dynamics(x, u)``, ``nominal_control(x, t)``,
``desired_state(t)`` plus box/sampling helpers.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBoxError, NonFiniteError


def _as_vector(v, length, name):
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.size == 1 and length > 1:
        arr = np.full(length, arr[0])
    if arr.size != length:
        raise ValueError(f"{name} must have length {length}, got {arr.size}")
    return arr


def check_finite(arr, what):
    """Raise NonFiniteError if any entry of `arr` is NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class LinearSystem:
    """Linear plant dx/dt = A x + B u with nominal control u = -K x.

    Scalars are accepted for ``a``, ``b``, ``k`` and promoted to 1x1
    matrices, which covers the scalar test plant used throughout the test
    suite.  The desired state is the origin.
    """

    kind = "linear"

    def __init__(self, a=1.0, b=1.0, k=2.0):
        self.A = np.atleast_2d(np.asarray(a, dtype=float))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError("a must be square")
        B = np.asarray(b, dtype=float)
        if B.ndim < 2:
            B = B.reshape(n, -1)
        self.B = B
        self.n = n
        self.m = self.B.shape[1]
        K = np.asarray(k, dtype=float)
        if K.ndim < 2:
            K = K.reshape(self.m, -1) if K.size == self.m * self.n else np.atleast_2d(K)
        self.K = K
        if self.K.shape != (self.m, self.n):
            raise ValueError("k must map state dim to input dim")
        # True Lipschitz constant of f in |dx| + |du|: max of the induced
        # 2-norms of A and B.
        self.lipschitz_cf = max(
            float(np.linalg.norm(self.A, 2)), float(np.linalg.norm(self.B, 2))
        )
        self.saturation = None

    @property
    def system_id(self):
        return (
            f"linear(n={self.n},m={self.m},"
            f"A={self.A.ravel().tolist()},B={self.B.ravel().tolist()},"
            f"K={self.K.ravel().tolist()})"
        )

    def dynamics(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape != (self.n,) or u.shape != (self.m,):
            raise ValueError(
                f"dimension mismatch: expected state ({self.n},), input ({self.m},), "
                f"got {x.shape}, {u.shape}"
            )
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise NonFiniteError("non-finite dynamics input")
        return self.A @ x + self.B @ u

    def dynamics_batch(self, X, U):
        """Vectorized dynamics over rows of X (..., n) and U (..., m)."""
        return X @ self.A.T + U @ self.B.T

    def nominal_control(self, x, t=0.0):
        return -self.K @ np.asarray(x, dtype=float)

    def desired_state(self, t):
        return np.zeros(self.n)

    def sample_initial_state(self, rng, lo=-0.05, hi=0.05):
        return rng.uniform(lo, hi, size=self.n)

    def state_box(self):
        return -np.ones(self.n), np.ones(self.n)

    def input_box(self):
        return -np.ones(self.m), np.ones(self.m)


@dataclass
class ManipulatorParams:
    """Physical and controller parameters of the planar 2-link arm.

    Link frames follow the standard convention: q1 is measured from the
    horizontal axis, q2 relative to link 1; gravity acts along -y.  The
    defaults (unit mass/length, mid-link COM, slender-rod inertia) keep the
    closed-form matrices easy to cross-check against a symbolic derivation.
    """

    m1: float = 1.0
    m2: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    lc1: float = 0.5
    lc2: float = 0.5
    I1: float = 1.0 / 12.0
    I2: float = 1.0 / 12.0
    gravity: float = 9.81
    alpha: np.ndarray = field(default_factory=lambda: np.ones(2))
    beta: np.ndarray = field(default_factory=lambda: np.ones(2))
    q_min: np.ndarray = field(default_factory=lambda: np.array([-2.7, -2.2]))
    q_max: np.ndarray = field(default_factory=lambda: np.array([0.7, 1.1]))
    tau_max: np.ndarray = field(default_factory=lambda: np.array([30.0, 10.0]))
    traj_amplitude: float = 0.1

    def __post_init__(self):
        for name in ("m1", "m2", "l1", "l2", "lc1", "lc2", "I1", "I2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        self.alpha = _as_vector(self.alpha, 2, "alpha")
        self.beta = _as_vector(self.beta, 2, "beta")
        if np.any(self.alpha <= 0) or np.any(self.beta <= 0):
            raise ValueError("alpha and beta gains must be positive")
        self.q_min = _as_vector(self.q_min, 2, "q_min")
        self.q_max = _as_vector(self.q_max, 2, "q_max")
        if np.any(self.q_min >= self.q_max):
            raise ValueError("joint limits must satisfy min < max per joint")
        self.tau_max = _as_vector(self.tau_max, 2, "tau_max")
        if np.any(self.tau_max <= 0):
            raise ValueError("torque limits must be positive")


class TwoLinkArm:
    """Planar 2-link manipulator tracking a sinusoidal joint reference.

    State is X = [q1, q2, qd1, qd2] (rad, rad/s), input is the joint torque
    vector (N·m).  The rigid-body model is

        M(q) qdd + C(q, qd) qd + G(q) = tau

    and the nominal controller is the computed-torque law
    tau = M (h + (beta + alpha) e2) acting on the tracking errors
    e1 = q_des - q, e2 = de1/dt + alpha e1, which imposes the linear error
    dynamics de2/dt = -beta e2.  Torques are saturated to the declared
    limits before leaving the controller.
    """

    kind = "manipulator"

    def __init__(self, params: ManipulatorParams | None = None):
        self.params = params if params is not None else ManipulatorParams()
        self.n = 4
        self.m = 2
        p = self.params
        self.q_mid = 0.5 * (p.q_max + p.q_min)
        self.lipschitz_cf = None
        self.saturation = (-p.tau_max, p.tau_max)
        # Constant pieces of the mass matrix (only the cos(q2) coupling
        # term varies with configuration).
        self._a1 = p.m1 * p.lc1**2 + p.I1 + p.m2 * (p.l1**2 + p.lc2**2) + p.I2
        self._a2 = p.m2 * p.l1 * p.lc2
        self._a3 = p.m2 * p.lc2**2 + p.I2
        self._g1 = (p.m1 * p.lc1 + p.m2 * p.l1) * p.gravity
        self._g2 = p.m2 * p.lc2 * p.gravity

    @property
    def system_id(self):
        p = self.params
        return (
            f"manipulator(m=[{p.m1},{p.m2}],l=[{p.l1},{p.l2}],lc=[{p.lc1},{p.lc2}],"
            f"I=[{p.I1},{p.I2}],g={p.gravity},amp={p.traj_amplitude},"
            f"qmin={p.q_min.tolist()},qmax={p.q_max.tolist()})"
        )

    def matrices(self, q, qd):
        """Mass, Coriolis and gravity terms (M, C, G) at (q, qd)."""
        q = np.asarray(q, dtype=float)
        qd = np.asarray(qd, dtype=float)
        check_finite(q, "joint angles")
        check_finite(qd, "joint velocities")
        c2 = math.cos(q[1])
        s2 = math.sin(q[1])
        M = np.array(
            [
                [self._a1 + 2.0 * self._a2 * c2, self._a3 + self._a2 * c2],
                [self._a3 + self._a2 * c2, self._a3],
            ]
        )
        # Christoffel form; guarantees dM/dt - 2C skew-symmetric.
        h = -self._a2 * s2
        C = np.array([[h * qd[1], h * (qd[0] + qd[1])], [-h * qd[0], 0.0]])
        c1 = math.cos(q[0])
        c12 = math.cos(q[0] + q[1])
        G = np.array([self._g1 * c1 + self._g2 * c12, self._g2 * c12])
        return M, C, G

    def potential_energy(self, q):
        """Gravitational potential energy (reference at y = 0)."""
        p = self.params
        y_c1 = p.lc1 * math.sin(q[0])
        y_c2 = p.l1 * math.sin(q[0]) + p.lc2 * math.sin(q[0] + q[1])
        return p.gravity * (p.m1 * y_c1 + p.m2 * y_c2)

    def dynamics(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape != (4,) or u.shape != (2,):
            raise ValueError(
                f"dimension mismatch: expected state (4,), input (2,), "
                f"got {x.shape}, {u.shape}"
            )
        q1, q2, qd1, qd2 = x
        t1, t2 = u
        if not (
            math.isfinite(q1)
            and math.isfinite(q2)
            and math.isfinite(qd1)
            and math.isfinite(qd2)
            and math.isfinite(t1)
            and math.isfinite(t2)
        ):
            raise NonFiniteError("non-finite dynamics input")
        c2 = math.cos(q2)
        s2 = math.sin(q2)
        m11 = self._a1 + 2.0 * self._a2 * c2
        m12 = self._a3 + self._a2 * c2
        m22 = self._a3
        h = -self._a2 * s2
        # rhs = tau - C qd - G
        c1 = math.cos(q1)
        c12 = math.cos(q1 + q2)
        r1 = t1 - (h * qd2 * qd1 + h * (qd1 + qd2) * qd2) - (self._g1 * c1 + self._g2 * c12)
        r2 = t2 - (-h * qd1 * qd1) - self._g2 * c12
        det = m11 * m22 - m12 * m12
        qdd1 = (m22 * r1 - m12 * r2) / det
        qdd2 = (m11 * r2 - m12 * r1) / det
        return np.array([qd1, qd2, qdd1, qdd2])

    def desired_joint_trajectory(self, t):
        """Reference joints (q_des, qd_des, qdd_des) at time t.

        A sinusoid of configurable amplitude centered at the midpoint of the
        joint limits; defined for all t (predictors query ahead and behind).
        """
        a = self.params.traj_amplitude
        s = math.sin(t)
        c = math.cos(t)
        ones = np.ones(2)
        q_des = a * s * ones + self.q_mid
        qd_des = a * c * ones
        qdd_des = -a * s * ones
        return q_des, qd_des, qdd_des

    def desired_state(self, t):
        q_des, qd_des, _ = self.desired_joint_trajectory(t)
        return np.concatenate([q_des, qd_des])

    def nominal_control(self, x, t):
        """Computed-torque tracking law, saturated to the torque limits."""
        x = np.asarray(x, dtype=float)
        q = x[:2]
        qd = x[2:]
        q_des, qd_des, qdd_des = self.desired_joint_trajectory(t)
        alpha = self.params.alpha
        beta = self.params.beta
        e1 = q_des - q
        e2 = (qd_des - qd) + alpha * e1
        M, C, G = self.matrices(q, qd)
        rhs = C @ qd_des + G + C @ (alpha * e1) - C @ e2
        h = qdd_des - alpha * (alpha * e1) + np.linalg.solve(M, rhs)
        tau = M @ (h + (beta + alpha) * e2)
        return np.clip(tau, -self.params.tau_max, self.params.tau_max)

    def sample_initial_state(self, rng, lo=-0.05, hi=0.05):
        """Joints at the limit midpoint plus uniform noise, at rest."""
        q = self.q_mid + rng.uniform(lo, hi, size=2)
        return np.concatenate([q, np.zeros(2)])

    def state_box(self, vel_limit=1.0):
        p = self.params
        lo = np.concatenate([p.q_min, -vel_limit * np.ones(2)])
        hi = np.concatenate([p.q_max, vel_limit * np.ones(2)])
        return lo, hi

    def input_box(self):
        return -self.params.tau_max, self.params.tau_max

    def within_joint_limits(self, x):
        q = np.asarray(x)[..., :2]
        return bool(
            np.all(q >= self.params.q_min - 1e-12)
            and np.all(q <= self.params.q_max + 1e-12)
        )


def estimate_lipschitz(system, box_x, box_u, samples=10000, seed=0):
    """Sampled Lipschitz constant of f over a state/input box.

    Returns the max over sampled pairs of
    |f(x1,u1) - f(x2,u2)| / (|x1-x2| + |u1-u2|).  The random pairs are
    drawn as one contiguous block so the estimate is non-decreasing when
    `samples` grows with the seed held fixed.
    """
    lo_x, hi_x = (np.asarray(b, dtype=float) for b in box_x)
    lo_u, hi_u = (np.asarray(b, dtype=float) for b in box_u)
    if np.any(hi_x <= lo_x) or np.any(hi_u <= lo_u):
        raise DegenerateBoxError("sampling box has zero volume")
    if samples < 2:
        raise ValueError("need at least 2 samples")
    n, m = lo_x.size, lo_u.size
    rng = np.random.default_rng(seed)
    block = rng.uniform(size=(samples, 2 * (n + m)))
    x1 = lo_x + block[:, :n] * (hi_x - lo_x)
    u1 = lo_u + block[:, n : n + m] * (hi_u - lo_u)
    x2 = lo_x + block[:, n + m : 2 * n + m] * (hi_x - lo_x)
    u2 = lo_u + block[:, 2 * n + m :] * (hi_u - lo_u)
    if hasattr(system, "dynamics_batch"):
        df = system.dynamics_batch(x1, u1) - system.dynamics_batch(x2, u2)
        num = np.linalg.norm(df, axis=1)
    else:
        num = np.empty(samples)
        for i in range(samples):
            num[i] = np.linalg.norm(
                system.dynamics(x1[i], u1[i]) - system.dynamics(x2[i], u2[i])
            )
    den = np.linalg.norm(x1 - x2, axis=1) + np.linalg.norm(u1 - u2, axis=1)
    mask = den > 0
    if not np.any(mask):
        return 0.0
    return float(np.max(num[mask] / den[mask]))


def rk4_step(f, x, h):
    """One classical 4th-order Runge-Kutta step of dx/dt = f(s, x).

    `f` takes the intra-step offset s in [0, h] and the state.
    """
    k1 = f(0.0, x)
    k2 = f(0.5 * h, x + 0.5 * h * k1)
    k3 = f(0.5 * h, x + 0.5 * h * k2)
    k4 = f(h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def simulate_delay_free(system, x0, duration, dt):
    """Integrate the delay-free closed loop dx/dt = f(x, kappa(x, t)).

    Control is recomputed at every RK4 stage (continuous feedback), which is
    the idealized plant used by stability cross-checks.
    Returns (times, states) with states[i] = X(times[i]).
    """
    steps = int(round(duration / dt))
    times = np.arange(steps + 1) * dt
    states = np.empty((steps + 1, system.n))
    states[0] = np.asarray(x0, dtype=float)
    x = states[0]
    for i in range(steps):
        t = times[i]

        def rhs(s, y):
            return system.dynamics(y, system.nominal_control(y, t + s))

        x = rk4_step(rhs, x, dt)
        check_finite(x, f"delay-free state at t={t + dt:.3f}")
        states[i + 1] = x
    return times, states
