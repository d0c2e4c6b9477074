"""Supervised dataset generation for predictor learning.

Each sample is one (state, input-history) pair from a closed-loop rollout
together with the converged successive-approximation solution as the
regression target.  Trajectories are excited either by randomized initial
conditions, by injecting uniform noise into the prediction fed to the
controller (a deliberately "wrong" prediction), or both; the stored target
is always the noise-free solution for the realized history.

Samples are emitted only once the first control signal has traversed the
delay line (t > D), so every history node reflects issued controls.
"""

import csv
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DataGenerationError, DatasetFormatError, NonFiniteError
from .predictor import (
    ControlHistory,
    SolverConfig,
    infer_grid_count,
    predict_successive,
)
from .simulate import DelayLine, rk4_step

DATASET_MAGIC = b"DSET"
DATASET_VERSION = 1
NOISE_MODES = ("initial-condition", "predictor-injection", "both")


@dataclass(frozen=True)
class DatasetSpec:
    trajectories: int = 200
    traj_length: float = 10.0
    dt: float = 0.1
    delay: float = 0.5
    noise_mode: str = "predictor-injection"
    noise_lo: float = -0.05
    noise_hi: float = 0.05
    seed: int = 1234
    test_fraction: float = 0.1
    system_id: str = ""

    def __post_init__(self):
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"unknown noise mode {self.noise_mode!r}")
        if self.noise_lo >= self.noise_hi:
            raise ValueError("noise range must satisfy lo < hi")
        infer_grid_count(self.delay, self.dt)
        steps = int(round(self.traj_length / self.dt))
        if abs(steps * self.dt - self.traj_length) > 1e-9:
            raise ValueError("dt must divide traj_length")

    @property
    def steps(self):
        return int(round(self.traj_length / self.dt))

    @property
    def grid_count(self):
        return infer_grid_count(self.delay, self.dt)

    @property
    def samples_per_trajectory(self):
        return self.steps - self.grid_count - 1


@dataclass
class Sample:
    x: np.ndarray
    hist: ControlHistory
    target: np.ndarray  # (N+1, n) converged predictor solution
    traj_id: int
    step_id: int


class Dataset:
    """Stacked samples plus a trajectory-level train/test split."""

    def __init__(self, spec, xs, hists, targets, traj_ids, step_ids, test_trajs):
        self.spec = spec
        self.xs = xs
        self.hists = hists
        self.targets = targets
        self.traj_ids = traj_ids
        self.step_ids = step_ids
        self.test_trajs = np.asarray(sorted(test_trajs), dtype=np.uint32)
        self._test_mask = np.isin(self.traj_ids, self.test_trajs)

    def __len__(self):
        return self.xs.shape[0]

    def __getitem__(self, i):
        return Sample(
            x=self.xs[i],
            hist=ControlHistory(self.spec.dt, self.hists[i]),
            target=self.targets[i],
            traj_id=int(self.traj_ids[i]),
            step_id=int(self.step_ids[i]),
        )

    @property
    def train_indices(self):
        return np.nonzero(~self._test_mask)[0]

    @property
    def test_indices(self):
        return np.nonzero(self._test_mask)[0]

    def encoded_inputs(self):
        """(S, N+1, n+m+1) grid encodings for every sample."""
        S, grid, m = self.hists.shape
        n = self.xs.shape[1]
        coord = np.arange(grid) / (grid - 1)
        z = np.empty((S, grid, n + m + 1))
        z[:, :, :n] = self.xs[:, None, :]
        z[:, :, n : n + m] = self.hists
        z[:, :, -1] = coord
        return z

    def tensors(self):
        """(z_train, y_train, z_test, y_test) for training."""
        z = self.encoded_inputs()
        tr, te = self.train_indices, self.test_indices
        return z[tr], self.targets[tr], z[te], self.targets[te]


def _split_trajectories(spec):
    n_test = max(1, int(round(spec.test_fraction * spec.trajectories)))
    if spec.trajectories < 2:
        raise ValueError("need at least 2 trajectories to split")
    rng = np.random.default_rng([spec.seed, 777])
    perm = rng.permutation(spec.trajectories)
    return set(int(t) for t in perm[:n_test])


def generate_dataset(spec: DatasetSpec, system, head="extrapolate"):
    """Roll out closed-loop trajectories and collect predictor samples.

    Per-trajectory RNG streams are derived from (seed, trajectory index),
    so generation order (serial or parallel) cannot change the result.
    Aborts if more than 1% of the predictor solves fail to converge.
    """
    if spec.system_id and spec.system_id != system.system_id:
        raise ValueError("dataset spec was declared for a different system")
    spec = DatasetSpec(
        **{**spec.__dict__, "system_id": system.system_id}
    )
    N = spec.grid_count
    steps = spec.steps
    per_traj = spec.samples_per_trajectory
    total = spec.trajectories * per_traj
    n, m = system.n, system.m
    xs = np.empty((total, n))
    hists = np.empty((total, N + 1, m))
    targets = np.empty((total, N + 1, n))
    traj_ids = np.empty(total, dtype=np.uint32)
    step_ids = np.empty(total, dtype=np.uint32)
    solver = SolverConfig(tol=1e-7)
    inject = spec.noise_mode in ("predictor-injection", "both")
    vary_ic = spec.noise_mode in ("initial-condition", "both")
    nonconverged = 0
    solves = 0
    out = 0
    for traj in range(spec.trajectories):
        rng = np.random.default_rng([spec.seed, traj])
        if vary_ic:
            x = system.sample_initial_state(rng, spec.noise_lo, spec.noise_hi)
        else:
            x = system.sample_initial_state(rng, 0.0, 0.0)
        line = DelayLine(spec.dt, spec.delay, m, head=head)
        for i in range(steps):
            t = i * spec.dt
            hist = line.history()
            res = predict_successive(system, x, hist, solver)
            solves += 1
            if not res.converged:
                nonconverged += 1
            if i >= N + 1:
                xs[out] = x
                hists[out] = hist.values
                targets[out] = res.solution.values
                traj_ids[out] = traj
                step_ids[out] = i
                out += 1
            phat = res.solution.prediction
            if inject:
                phat = phat + rng.uniform(spec.noise_lo, spec.noise_hi, size=n)
            u = np.asarray(system.nominal_control(phat, t + spec.delay))
            line.push(u)

            def rhs(s, y):
                return system.dynamics(y, line.value_at(t + s - spec.delay))

            x = rk4_step(rhs, x, spec.dt)
            if not np.all(np.isfinite(x)):
                raise NonFiniteError(
                    f"trajectory {traj} diverged at step {i} during generation"
                )
    if nonconverged > 0.01 * solves:
        raise DataGenerationError(
            f"{nonconverged}/{solves} predictor solves failed to converge "
            f"(> 1% tolerated); check delay, step size, and noise range"
        )
    return Dataset(
        spec, xs, hists, targets, traj_ids, step_ids, _split_trajectories(spec)
    )


def _residual(system, x, hist_values, target, dt):
    """Self-consistency residual of a stored target on its grid."""
    if hasattr(system, "dynamics_batch"):
        g = system.dynamics_batch(target, hist_values)
    else:
        g = np.array(
            [system.dynamics(target[k], hist_values[k]) for k in range(len(target))]
        )
    integral = np.zeros_like(target)
    np.cumsum(0.5 * dt * (g[:-1] + g[1:]), axis=0, out=integral[1:])
    return float(np.max(np.linalg.norm(target - x - integral, axis=1)))


def audit_dataset(dataset: Dataset, system, fraction=0.01, tol=1e-6, seed=99):
    """Spot-check stored targets: anchor identity and residual <= tol."""
    size = len(dataset)
    count = max(1, int(round(fraction * size)))
    rng = np.random.default_rng([dataset.spec.seed, seed])
    idx = rng.choice(size, size=count, replace=False)
    for i in idx:
        if not np.array_equal(dataset.targets[i][0], dataset.xs[i]):
            raise DatasetFormatError(f"sample {i}: target anchor != state")
        res = _residual(
            system, dataset.xs[i], dataset.hists[i], dataset.targets[i], dataset.spec.dt
        )
        if res > tol:
            raise DatasetFormatError(
                f"sample {i}: target residual {res:.2e} exceeds {tol:.0e}"
            )
    return count


def save_dataset(dataset: Dataset, path):
    spec = dataset.spec
    sid = spec.system_id.encode("utf-8")
    S = len(dataset)
    grid = dataset.hists.shape[1]
    header = struct.pack(
        "<6I3dB2dQdI",
        dataset.xs.shape[1],
        dataset.hists.shape[2],
        grid,
        spec.trajectories,
        S,
        len(dataset.test_trajs),
        spec.dt,
        spec.traj_length,
        spec.delay,
        NOISE_MODES.index(spec.noise_mode),
        spec.noise_lo,
        spec.noise_hi,
        spec.seed,
        spec.test_fraction,
        len(sid),
    )
    blob = [
        header,
        sid,
        dataset.test_trajs.astype("<u4").tobytes(),
        dataset.traj_ids.astype("<u4").tobytes(),
        dataset.step_ids.astype("<u4").tobytes(),
        np.ascontiguousarray(dataset.xs, dtype="<f8").tobytes(),
        np.ascontiguousarray(dataset.hists, dtype="<f8").tobytes(),
        np.ascontiguousarray(dataset.targets, dtype="<f8").tobytes(),
    ]
    blob = b"".join(blob)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", DATASET_VERSION))
        fh.write(blob)
        fh.write(struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF))


def load_dataset(path, system=None, audit_fraction=0.01):
    """Load a DSET file; optionally audit targets against `system`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != DATASET_MAGIC:
        raise DatasetFormatError("bad magic: not a dataset file")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    blob, (crc,) = raw[8:-4], struct.unpack("<I", raw[-4:])
    head_size = struct.calcsize("<6I3dB2dQdI")
    if len(blob) < head_size:
        raise DatasetFormatError("truncated dataset header")
    (
        n,
        m,
        grid,
        trajectories,
        S,
        n_test,
        dt,
        traj_length,
        delay,
        mode_code,
        noise_lo,
        noise_hi,
        seed,
        test_fraction,
        sid_len,
    ) = struct.unpack("<6I3dB2dQdI", blob[:head_size])
    expected = (
        head_size
        + sid_len
        + 4 * n_test
        + 4 * S
        + 4 * S
        + 8 * S * n
        + 8 * S * grid * m
        + 8 * S * grid * n
    )
    if len(blob) != expected:
        raise DatasetFormatError(
            f"payload size {len(blob)} inconsistent with header (expected {expected})"
        )
    if zlib.crc32(blob) & 0xFFFFFFFF != crc:
        raise DatasetFormatError("checksum mismatch: corrupt dataset")
    offset = head_size
    sid = blob[offset : offset + sid_len].decode("utf-8")
    offset += sid_len

    def take(dtype, count, shape):
        nonlocal offset
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
        offset += arr.nbytes
        return arr.reshape(shape).copy()

    test_trajs = take("<u4", n_test, (n_test,))
    traj_ids = take("<u4", S, (S,))
    step_ids = take("<u4", S, (S,))
    xs = take("<f8", S * n, (S, n)).astype(float)
    hists = take("<f8", S * grid * m, (S, grid, m)).astype(float)
    targets = take("<f8", S * grid * n, (S, grid, n)).astype(float)
    spec = DatasetSpec(
        trajectories=trajectories,
        traj_length=traj_length,
        dt=dt,
        delay=delay,
        noise_mode=NOISE_MODES[mode_code],
        noise_lo=noise_lo,
        noise_hi=noise_hi,
        seed=seed,
        test_fraction=test_fraction,
        system_id=sid,
    )
    ds = Dataset(spec, xs, hists, targets, traj_ids, step_ids, set(test_trajs.tolist()))
    if system is not None:
        if spec.system_id != system.system_id:
            raise DatasetFormatError(
                f"dataset generated for {spec.system_id}, not {system.system_id}"
            )
        audit_dataset(ds, system, fraction=audit_fraction)
    return ds


def export_csv(dataset: Dataset, path, metadata=None):
    """One row per (sample, grid node); header documents the columns."""
    n = dataset.xs.shape[1]
    m = dataset.hists.shape[2]
    grid = dataset.hists.shape[1]
    delay = dataset.spec.delay
    with open(path, "w", newline="") as fh:
        for key, val in sorted((metadata or {}).items()):
            fh.write(f"# {key}={val}\n")
        writer = csv.writer(fh)
        writer.writerow(
            ["sample", "traj", "step", "k", "theta"]
            + [f"x_{i}" for i in range(n)]
            + [f"u_{j}" for j in range(m)]
            + [f"p_{i}" for i in range(n)]
        )
        for s in range(len(dataset)):
            for k in range(grid):
                theta = -delay + k * dataset.spec.dt
                writer.writerow(
                    [s, dataset.traj_ids[s], dataset.step_ids[s], k, repr(theta)]
                    + [repr(v) for v in dataset.xs[s]]
                    + [repr(v) for v in dataset.hists[s, k]]
                    + [repr(v) for v in dataset.targets[s, k]]
                )
