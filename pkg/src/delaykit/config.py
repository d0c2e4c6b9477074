"""Plain-text sectioned run configuration.

Grammar: INI-style sections of ``key = value`` pairs, ``#`` comments.
Every key is typed and defaulted below; unknown sections or keys are
rejected.  A canonical hash of the fully resolved configuration (defaults
applied) is embedded in every output artifact so results can be traced to
the exact configuration that produced them.
"""

import configparser
import hashlib

import numpy as np

from .bench import BenchSpec
from .dataset import DatasetSpec
from .errors import ConfigError
from .nno import NnoConfig, TrainConfig
from .simulate import LoopConfig
from .systems import LinearSystem, ManipulatorParams, TwoLinkArm


def _float_list(raw):
    return tuple(float(tok.strip()) for tok in raw.split(",") if tok.strip())


def _bool(raw):
    val = raw.strip().lower()
    if val in ("1", "true", "yes", "on"):
        return True
    if val in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


# section -> key -> (parser, default)
SCHEMA = {
    "system": {
        "kind": (str, "manipulator"),
        "a": (float, 1.0),
        "b": (float, 1.0),
        "k": (float, 2.0),
        "m1": (float, 1.0),
        "m2": (float, 1.0),
        "l1": (float, 1.0),
        "l2": (float, 1.0),
        "lc1": (float, 0.5),
        "lc2": (float, 0.5),
        "inertia1": (float, 1.0 / 12.0),
        "inertia2": (float, 1.0 / 12.0),
        "gravity": (float, 9.81),
        "alpha": (_float_list, (1.0, 1.0)),
        "beta": (_float_list, (1.0, 1.0)),
        "q_min": (_float_list, (-2.7, -2.2)),
        "q_max": (_float_list, (0.7, 1.1)),
        "tau_max": (_float_list, (30.0, 10.0)),
        "amplitude": (float, 0.1),
    },
    "loop": {
        "dt": (float, 0.1),
        "duration": (float, 10.0),
        "delay": (float, 0.5),
        "seed": (int, 0),
        "init_noise": (float, 0.05),
        "head": (str, "extrapolate"),
        "predictor": (str, "successive"),
        "epsilon": (float, 0.05),
        "oracle_refine": (int, 40),
        "solver_tol": (float, 1e-7),
        "solver_max_iters": (int, 100),
        "trajectories": (int, 25),
    },
    "dataset": {
        "trajectories": (int, 200),
        "traj_length": (float, 10.0),
        "dt": (float, 0.1),
        "delay": (float, 0.5),
        "noise_mode": (str, "predictor-injection"),
        "noise_lo": (float, -0.05),
        "noise_hi": (float, 0.05),
        "seed": (int, 1234),
        "test_fraction": (float, 0.1),
    },
    "nno": {
        "channels": (int, 64),
        "layers": (int, 2),
        "model_path": (str, "model.nno"),
    },
    "train": {
        "epochs": (int, 300),
        "batch_size": (int, 512),
        "learning_rate": (float, 0.005),
        "weight_decay": (float, 0.0),
        "lr_decay": (float, 0.99),
        "seed": (int, 7),
        "adaptive": (_bool, True),
    },
    "bench": {
        "delays": (_float_list, (0.1, 0.5, 1.0)),
        "step_sizes": (_float_list, (0.1, 0.05, 0.01)),
        "repetitions": (int, 1000),
        "warmup": (int, 50),
        "models_mode": (str, "retrain"),
        "seed": (int, 5),
        "channels": (int, 16),
        "layers": (int, 1),
        "train_trajectories": (int, 6),
        "train_epochs": (int, 40),
    },
    "verify": {
        "predictor": (str, "successive"),
        "epsilon": (float, 0.05),
        "c_values": (_float_list, (0.5, 1.0, 2.0)),
        "seeds": (int, 10),
        "oracle_refine": (int, 20),
        "safety": (float, 2.0),
    },
}


class RunConfig:
    """Fully resolved configuration with typed values and a canonical hash."""

    def __init__(self, values):
        self.values = values

    @classmethod
    def from_file(cls, path):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            read = parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not read:
            raise ConfigError(f"config file not found: {path}")
        values = {sec: dict((k, d) for k, (_, d) in keys.items()) for sec, keys in SCHEMA.items()}
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser[section].items():
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                parse, _ = SCHEMA[section][key]
                try:
                    values[section][key] = parse(raw)
                except (ValueError, TypeError) as exc:
                    raise ConfigError(
                        f"bad value for [{section}] {key} = {raw!r}: {exc}"
                    ) from exc
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def defaults(cls):
        return cls(
            {sec: dict((k, d) for k, (_, d) in keys.items()) for sec, keys in SCHEMA.items()}
        )

    def validate(self):
        sysv = self.values["system"]
        if sysv["kind"] not in ("manipulator", "linear"):
            raise ConfigError(f"unknown system kind {sysv['kind']!r}")
        try:
            self.build_system()
            self.loop_config()
            self.dataset_spec()
            self.train_config()
            self.bench_spec()
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(str(exc)) from exc

    def section(self, name):
        return self.values[name]

    def config_hash(self):
        lines = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                lines.append(f"{section}.{key}={self.values[section][key]!r}")
        digest = hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()
        return digest[:16]

    def build_system(self):
        sysv = self.values["system"]
        if sysv["kind"] == "linear":
            return LinearSystem(sysv["a"], sysv["b"], sysv["k"])
        params = ManipulatorParams(
            m1=sysv["m1"],
            m2=sysv["m2"],
            l1=sysv["l1"],
            l2=sysv["l2"],
            lc1=sysv["lc1"],
            lc2=sysv["lc2"],
            I1=sysv["inertia1"],
            I2=sysv["inertia2"],
            gravity=sysv["gravity"],
            alpha=np.asarray(sysv["alpha"]),
            beta=np.asarray(sysv["beta"]),
            q_min=np.asarray(sysv["q_min"]),
            q_max=np.asarray(sysv["q_max"]),
            tau_max=np.asarray(sysv["tau_max"]),
            traj_amplitude=sysv["amplitude"],
        )
        return TwoLinkArm(params)

    def loop_config(self, **overrides):
        loop = self.values["loop"]
        kwargs = dict(
            dt=loop["dt"],
            duration=loop["duration"],
            delay=loop["delay"],
            init_noise=loop["init_noise"],
            seed=loop["seed"],
            head=loop["head"],
        )
        kwargs.update(overrides)
        return LoopConfig(**kwargs)

    def dataset_spec(self):
        ds = self.values["dataset"]
        return DatasetSpec(
            trajectories=ds["trajectories"],
            traj_length=ds["traj_length"],
            dt=ds["dt"],
            delay=ds["delay"],
            noise_mode=ds["noise_mode"],
            noise_lo=ds["noise_lo"],
            noise_hi=ds["noise_hi"],
            seed=ds["seed"],
            test_fraction=ds["test_fraction"],
        )

    def nno_config(self, system, grid_points):
        nn = self.values["nno"]
        return NnoConfig(
            state_dim=system.n,
            input_dim=system.m,
            grid_points=grid_points,
            channels=nn["channels"],
            layers=nn["layers"],
        )

    def train_config(self):
        tr = self.values["train"]
        return TrainConfig(
            epochs=tr["epochs"],
            batch_size=tr["batch_size"],
            learning_rate=tr["learning_rate"],
            weight_decay=tr["weight_decay"],
            lr_decay=tr["lr_decay"],
            seed=tr["seed"],
            adaptive=tr["adaptive"],
        )

    def bench_spec(self):
        b = self.values["bench"]
        return BenchSpec(
            delays=tuple(b["delays"]),
            step_sizes=tuple(b["step_sizes"]),
            repetitions=b["repetitions"],
            warmup=b["warmup"],
            models_mode=b["models_mode"],
            seed=b["seed"],
            channels=b["channels"],
            layers=b["layers"],
            train_trajectories=b["train_trajectories"],
            train_epochs=b["train_epochs"],
        )
