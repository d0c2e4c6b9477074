"""Nonlocal neural operator (NNO) predictor.

The operator maps the grid encoding of (state, input history) to the
predicted state trajectory on the same grid.  Architecture: a pointwise
affine lift to ``channels`` hidden channels, ``layers`` hidden layers of

    v <- tanh(W v(x) + b + K vbar),    vbar = trapezoid-weighted grid mean,

and a pointwise affine projection.  The constant averaging kernel
K/|grid| is the minimal nonlocal term that still gives universal operator
approximation, and it keeps the forward pass O(grid).

The network learns the increment P(theta) - X: the anchoring identity
P(-D) = X then holds for the assembled prediction by construction, and
the regression target is free of the dominant identity component.

Training is mini-batch gradient descent with decoupled weight decay and
per-epoch exponential learning-rate decay (optionally with adaptive
moment scaling); backpropagation is hand-derived for this fixed
architecture (everything is float64 and deterministic for a fixed seed on
one thread).
"""

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheckpointFormatError,
    DivergedLossError,
    EmptyDatasetError,
    GridMismatchError,
    NonFiniteError,
)
from .predictor import PredictorSolution

CHECKPOINT_MAGIC = b"NNO1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NnoConfig:
    state_dim: int
    input_dim: int
    grid_points: int  # N+1, matching the ControlHistory grid
    channels: int = 64
    layers: int = 2
    activation: str = "tanh"

    def __post_init__(self):
        if self.channels < 1 or self.layers < 1:
            raise ValueError("channels and layers must be >= 1")
        if self.grid_points < 2:
            raise ValueError("grid_points must be >= 2")
        if self.activation != "tanh":
            raise ValueError("only tanh activation is supported")

    @property
    def in_features(self):
        # broadcast state + control sample + normalized grid coordinate
        return self.state_dim + self.input_dim + 1


@dataclass
class NnoModel:
    config: NnoConfig
    lift_w: np.ndarray  # (d_c, in_features)
    lift_b: np.ndarray  # (d_c,)
    hidden_w: list      # L x (d_c, d_c)
    hidden_b: list      # L x (d_c,)
    kernel_w: list      # L x (d_c, d_c)
    proj_w: np.ndarray  # (n, d_c)
    proj_b: np.ndarray  # (n,)
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    def parameters(self):
        """(name, array) pairs in the canonical checkpoint order."""
        items = [("lift_w", self.lift_w), ("lift_b", self.lift_b)]
        for l in range(self.config.layers):
            items += [
                (f"hidden_w_{l}", self.hidden_w[l]),
                (f"hidden_b_{l}", self.hidden_b[l]),
                (f"kernel_w_{l}", self.kernel_w[l]),
            ]
        items += [("proj_w", self.proj_w), ("proj_b", self.proj_b)]
        return items

    def parameter_count(self):
        return sum(arr.size for _, arr in self.parameters())

    def copy(self):
        return NnoModel(
            config=self.config,
            lift_w=self.lift_w.copy(),
            lift_b=self.lift_b.copy(),
            hidden_w=[w.copy() for w in self.hidden_w],
            hidden_b=[b.copy() for b in self.hidden_b],
            kernel_w=[k.copy() for k in self.kernel_w],
            proj_w=self.proj_w.copy(),
            proj_b=self.proj_b.copy(),
            in_mean=self.in_mean.copy(),
            in_std=self.in_std.copy(),
            out_mean=self.out_mean.copy(),
            out_std=self.out_std.copy(),
        )


@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch gradient descent settings.

    ``adaptive=True`` enables per-parameter first/second moment scaling
    (the decoupled-weight-decay optimizer the reference hyperparameters
    were tuned for); plain descent remains the default.
    """

    epochs: int = 300
    batch_size: int = 512
    learning_rate: float = 0.005
    weight_decay: float = 0.0
    lr_decay: float = 0.99
    seed: int = 0
    adaptive: bool = False
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ValueError("lr_decay must lie in (0, 1]")


def init_model(config: NnoConfig, seed=0):
    """Seeded scaled-normal initialization; identity normalization stats."""
    rng = np.random.default_rng(seed)
    d_c = config.channels
    din = config.in_features
    n = config.state_dim

    def w(shape, fan_in):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

    return NnoModel(
        config=config,
        lift_w=w((d_c, din), din),
        lift_b=np.zeros(d_c),
        hidden_w=[w((d_c, d_c), d_c) for _ in range(config.layers)],
        hidden_b=[np.zeros(d_c) for _ in range(config.layers)],
        kernel_w=[w((d_c, d_c), d_c) for _ in range(config.layers)],
        proj_w=w((n, d_c), d_c),
        proj_b=np.zeros(n),
        in_mean=np.zeros(din),
        in_std=np.ones(din),
        out_mean=np.zeros(n),
        out_std=np.ones(n),
    )


def grid_weights(grid_points):
    """Trapezoid quadrature weights normalized to sum to 1."""
    w = np.ones(grid_points)
    w[0] = w[-1] = 0.5
    return w / (grid_points - 1)


def encode_input(x, hist):
    """Grid encoding: row k = [x (broadcast), U_k, k/N]."""
    x = np.asarray(x, dtype=float)
    values = hist.values
    grid = values.shape[0]
    coord = np.arange(grid) / (grid - 1)
    return np.hstack(
        [np.tile(x, (grid, 1)), values, coord[:, None]]
    )


def nno_forward(model: NnoModel, encoded, cache=None):
    """Forward pass on encoded input(s); returns physical-unit outputs.

    `encoded` is (grid, in_features) or batched (B, grid, in_features);
    any grid size >= 2 is accepted (the architecture is discretization
    flexible).  Pass a dict as `cache` to keep intermediates for backward.
    """
    z = np.asarray(encoded, dtype=float)
    squeeze = z.ndim == 2
    if squeeze:
        z = z[None]
    if z.shape[-1] != model.config.in_features:
        raise GridMismatchError(
            f"encoded feature dim {z.shape[-1]} != {model.config.in_features}"
        )
    for _, arr in model.parameters():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite model parameters")
    tw = grid_weights(z.shape[1])
    zn = (z - model.in_mean) / model.in_std
    v = zn @ model.lift_w.T + model.lift_b
    if cache is not None:
        cache["zn"] = zn
        cache["tw"] = tw
        cache["v"] = [v]
        cache["vbar"] = []
    for l in range(model.config.layers):
        vbar = np.einsum("g,bgc->bc", tw, v)
        pre = v @ model.hidden_w[l].T + model.hidden_b[l] + (vbar @ model.kernel_w[l].T)[:, None, :]
        v = np.tanh(pre)
        if cache is not None:
            cache["vbar"].append(vbar)
            cache["v"].append(v)
    yn = v @ model.proj_w.T + model.proj_b
    if cache is not None:
        cache["yn"] = yn
    y = yn * model.out_std + model.out_mean
    return y[0] if squeeze else y


def nno_backward(model: NnoModel, cache, grad_yn):
    """Reverse-mode gradients of the forward pass.

    `grad_yn` is dLoss/d(normalized output), shaped like the cached output.
    Returns (grads dict keyed like ``model.parameters()``, dLoss/d(encoded
    normalized input)).
    """
    tw = cache["tw"]
    v_list = cache["v"]
    grads = {}
    g = np.asarray(grad_yn, dtype=float)
    if g.ndim == 2:
        g = g[None]
    v_last = v_list[-1]
    grads["proj_w"] = np.einsum("bgn,bgc->nc", g, v_last)
    grads["proj_b"] = g.sum(axis=(0, 1))
    dv = g @ model.proj_w
    for l in range(model.config.layers - 1, -1, -1):
        v_out = v_list[l + 1]
        v_in = v_list[l]
        dpre = dv * (1.0 - v_out**2)
        grads[f"hidden_w_{l}"] = np.einsum("bgc,bgd->cd", dpre, v_in)
        grads[f"hidden_b_{l}"] = dpre.sum(axis=(0, 1))
        srow = dpre.sum(axis=1)  # (B, d_c)
        grads[f"kernel_w_{l}"] = np.einsum("bc,bd->cd", srow, cache["vbar"][l])
        dvbar = srow @ model.kernel_w[l]
        dv = dpre @ model.hidden_w[l] + tw[None, :, None] * dvbar[:, None, :]
    grads["lift_w"] = np.einsum("bgc,bgi->ci", dv, cache["zn"])
    grads["lift_b"] = dv.sum(axis=(0, 1))
    dzn = dv @ model.lift_w
    return grads, dzn


def relative_l2(pred, target, eps=1e-12):
    """Per-sample relative L2 error ||pred - target|| / ||target||."""
    diff = np.linalg.norm((pred - target).reshape(pred.shape[0], -1), axis=1)
    ref = np.linalg.norm(target.reshape(target.shape[0], -1), axis=1)
    return diff / np.maximum(ref, eps)


def _loss_and_grad(model, zb, ynt_b, ref_norm_b):
    """Mean relative trajectory error over a batch, plus parameter grads.

    ``ynt_b`` is the normalized target increment and ``ref_norm_b`` the
    norm of the full target trajectory, so the loss equals
    mean ||P_hat - P|| / ||P||: the prediction error in physical units
    (the anchoring state cancels in the difference) over the target size.
    """
    cache = {}
    nno_forward(model, zb, cache=cache)
    diff = (cache["yn"] - ynt_b) * model.out_std
    B = zb.shape[0]
    dn = np.linalg.norm(diff.reshape(B, -1), axis=1)
    loss = float(np.mean(dn / ref_norm_b))
    scale = model.out_std * (1.0 / (B * np.maximum(dn, 1e-12) * ref_norm_b))[
        :, None, None
    ]
    grad_yn = diff * scale
    grads, _ = nno_backward(model, cache, grad_yn)
    return loss, grads


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_rel_l2: float
    test_rel_l2: float


def _normalize_stats(arr2d, floor=1e-8):
    mean = arr2d.mean(axis=0)
    std = np.maximum(arr2d.std(axis=0), floor)
    return mean, std


def predict_trajectories(model, z, xs):
    """Assembled predictions x + increment for encoded inputs z."""
    return xs[:, None, :] + nno_forward(model, z)


def train_nno(dataset, train_cfg: TrainConfig, nno_cfg: NnoConfig, log_every=0):
    """Train an NNO predictor on supervised (x, history) -> trajectory pairs.

    The regression target is the increment (trajectory minus anchoring
    state); reported train/test relative-L2 errors are on the assembled
    trajectories.  Uses the dataset's trajectory-level train/test split and
    z-score normalization from the training portion; returns
    (best-test-error model, per-epoch history).  Non-finite loss raises
    DivergedLossError carrying the partial history.
    """
    z_train, y_train, z_test, y_test = dataset.tensors()
    if z_train.shape[0] == 0 or z_test.shape[0] == 0:
        raise EmptyDatasetError("train/test split has an empty side")
    if z_train.shape[1] != nno_cfg.grid_points:
        raise GridMismatchError(
            f"dataset grid {z_train.shape[1]} != model grid {nno_cfg.grid_points}"
        )
    n = nno_cfg.state_dim
    x_train = z_train[:, 0, :n]
    x_test = z_test[:, 0, :n]
    inc_train = y_train - x_train[:, None, :]
    model = init_model(nno_cfg, seed=train_cfg.seed)
    model.in_mean, model.in_std = _normalize_stats(
        z_train.reshape(-1, z_train.shape[-1])
    )
    model.out_mean, model.out_std = _normalize_stats(
        inc_train.reshape(-1, inc_train.shape[-1])
    )
    yn_train = (inc_train - model.out_mean) / model.out_std
    ref_train = np.maximum(
        np.linalg.norm(y_train.reshape(y_train.shape[0], -1), axis=1), 1e-12
    )
    rng = np.random.default_rng(train_cfg.seed)
    lr = train_cfg.learning_rate
    history = []
    best_model = model.copy()
    best_err = np.inf
    size = z_train.shape[0]
    batch = min(train_cfg.batch_size, size)
    moments = None
    if train_cfg.adaptive:
        moments = {
            name: (np.zeros_like(arr), np.zeros_like(arr))
            for name, arr in model.parameters()
        }
    step = 0
    for epoch in range(train_cfg.epochs):
        perm = rng.permutation(size)
        epoch_loss = 0.0
        nbatches = 0
        for start in range(0, size, batch):
            idx = perm[start : start + batch]
            loss, grads = _loss_and_grad(
                model, z_train[idx], yn_train[idx], ref_train[idx]
            )
            if not np.isfinite(loss):
                raise DivergedLossError(
                    f"loss diverged at epoch {epoch}", history=history
                )
            epoch_loss += loss
            nbatches += 1
            step += 1
            wd = train_cfg.weight_decay
            for name, arr in model.parameters():
                g = grads[name]
                if moments is not None:
                    m1, m2 = moments[name]
                    b1, b2 = train_cfg.beta1, train_cfg.beta2
                    m1 *= b1
                    m1 += (1.0 - b1) * g
                    m2 *= b2
                    m2 += (1.0 - b2) * g * g
                    mhat = m1 / (1.0 - b1**step)
                    vhat = m2 / (1.0 - b2**step)
                    arr -= lr * mhat / (np.sqrt(vhat) + 1e-8)
                else:
                    arr -= lr * g
                if wd:
                    arr -= lr * wd * arr
        train_rel = float(
            np.mean(relative_l2(predict_trajectories(model, z_train, x_train), y_train))
        )
        test_rel = float(
            np.mean(relative_l2(predict_trajectories(model, z_test, x_test), y_test))
        )
        history.append(
            EpochStats(epoch, lr, epoch_loss / max(nbatches, 1), train_rel, test_rel)
        )
        if test_rel < best_err:
            best_err = test_rel
            best_model = model.copy()
        if log_every and (epoch + 1) % log_every == 0:
            print(
                f"epoch {epoch + 1}/{train_cfg.epochs} lr={lr:.5f} "
                f"train={train_rel:.3e} test={test_rel:.3e}"
            )
        lr *= train_cfg.lr_decay
    return best_model, history


def nno_predict(model: NnoModel, x, hist):
    """Closed-loop prediction: encode, forward, hard-anchor the grid start.

    The forward pass produces the increment, so the assembled trajectory is
    x + increment; the first grid value is then replaced by the current
    state exactly, making the anchoring identity hold by construction for
    any parameter values.
    """
    if hist.values.shape[0] != model.config.grid_points:
        raise GridMismatchError(
            f"history grid {hist.values.shape[0]} != model grid "
            f"{model.config.grid_points}"
        )
    if hist.values.shape[1] != model.config.input_dim:
        raise GridMismatchError("history input dim mismatch")
    x = np.asarray(x, dtype=float)
    values = x + nno_forward(model, encode_input(x, hist))
    values[0] = x
    return PredictorSolution(hist.dt, values)


def _pack_array(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_model(model: NnoModel, path):
    """Serialize to the NNO1 binary format (see load_model)."""
    cfg = model.config
    header = struct.pack(
        "<5I",
        cfg.state_dim,
        cfg.input_dim,
        cfg.grid_points - 1,
        cfg.channels,
        cfg.layers,
    )
    payload = [header]
    for arr in (model.in_mean, model.in_std, model.out_mean, model.out_std):
        payload.append(_pack_array(arr))
    for _, arr in model.parameters():
        payload.append(_pack_array(arr))
    blob = b"".join(payload)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(blob)
        fh.write(struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF))


def load_model(path):
    """Load an NNO1 checkpoint; bit-exact round trip with save_model.

    Layout (little-endian): magic "NNO1", u32 version, u32 n/m/N/d_c/L,
    normalization arrays then parameter tensors as contiguous float64 in
    the order lift, (W, b, K) per layer, projection, and a trailing CRC32
    of everything between the version field and the checksum.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic: not an NNO checkpoint")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    blob, (crc,) = raw[8:-4], struct.unpack("<I", raw[-4:])
    if len(blob) < 20:
        raise CheckpointFormatError("shape header inconsistent: truncated file")
    n, m, N, d_c, L = struct.unpack("<5I", blob[:20])
    cfg = NnoConfig(
        state_dim=n, input_dim=m, grid_points=N + 1, channels=d_c, layers=L
    )
    din = cfg.in_features
    shapes = [(din,), (din,), (n,), (n,), (d_c, din), (d_c,)]
    for _ in range(L):
        shapes += [(d_c, d_c), (d_c,), (d_c, d_c)]
    shapes += [(n, d_c), (n,)]
    expected = 20 + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(blob) != expected:
        raise CheckpointFormatError(
            f"shape header inconsistent with payload size "
            f"({len(blob)} bytes, expected {expected})"
        )
    if zlib.crc32(blob) & 0xFFFFFFFF != crc:
        raise CheckpointFormatError("checksum mismatch: corrupt checkpoint")
    offset = 20
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(
            blob, dtype="<f8", count=count, offset=offset
        ).reshape(shape).astype(float)
        arrays.append(arr)
        offset += 8 * count
    in_mean, in_std, out_mean, out_std = arrays[:4]
    rest = arrays[4:]
    lift_w, lift_b = rest[0], rest[1]
    hidden_w, hidden_b, kernel_w = [], [], []
    for l in range(L):
        hidden_w.append(rest[2 + 3 * l])
        hidden_b.append(rest[3 + 3 * l])
        kernel_w.append(rest[4 + 3 * l])
    proj_w, proj_b = rest[2 + 3 * L], rest[3 + 3 * L]
    return NnoModel(
        config=cfg,
        lift_w=lift_w,
        lift_b=lift_b,
        hidden_w=hidden_w,
        hidden_b=hidden_b,
        kernel_w=kernel_w,
        proj_w=proj_w,
        proj_b=proj_b,
        in_mean=in_mean,
        in_std=in_std,
        out_mean=out_mean,
        out_std=out_std,
    )


def refine_history(hist, factor=2):
    """Linearly interpolate a ControlHistory onto a factor-finer grid."""
    from .predictor import ControlHistory

    values = hist.values
    grid = values.shape[0]
    fine = np.empty(((grid - 1) * factor + 1, values.shape[1]))
    for k in range(grid - 1):
        for r in range(factor):
            lam = r / factor
            fine[k * factor + r] = (1 - lam) * values[k] + lam * values[k + 1]
    fine[-1] = values[-1]
    return ControlHistory(hist.dt / factor, fine, t_now=hist.t_now)
