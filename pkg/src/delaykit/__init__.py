"""Delay-compensated control via predictor feedback.

Numerical (successive-approximation) and neural-operator predictors for
nonlinear systems with constant input delay, plus closed-loop simulation,
dataset generation, transport-PDE backstepping verification, and a
wall-clock benchmark harness.
"""

from .errors import (
    CheckpointFormatError,
    ConfigError,
    DataGenerationError,
    DatasetFormatError,
    DelayKitError,
    DivergedLossError,
    EmptyDatasetError,
    GridMismatchError,
    NonFiniteError,
)
from .systems import (
    LinearSystem,
    ManipulatorParams,
    TwoLinkArm,
    estimate_lipschitz,
    simulate_delay_free,
)
from .predictor import (
    ControlHistory,
    PredictorSolution,
    SolverConfig,
    check_predictor_continuity,
    predict_dense_oracle,
    predict_successive,
    predictor_lipschitz_bound,
)
from .nno import (
    NnoConfig,
    NnoModel,
    TrainConfig,
    encode_input,
    load_model,
    nno_backward,
    nno_forward,
    nno_predict,
    save_model,
    train_nno,
)
from .dataset import (
    Dataset,
    DatasetSpec,
    audit_dataset,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .simulate import (
    DelayLine,
    ExactPredictor,
    LoopConfig,
    NeuralPredictor,
    PerturbedPredictor,
    SuccessivePredictor,
    TrajectoryRecord,
    compute_metrics,
    epsilon_sweep,
    run_closed_loop,
)
from .backstepping import (
    TargetState,
    TransportState,
    calibrate_slack,
    check_iss_bound,
    check_target_system,
    forward_transform,
    inverse_transform,
    solve_p,
    solve_pi,
    weighted_sup_norm,
)
from .bench import BenchReport, BenchSpec, report_to_csv, run_bench
from .config import RunConfig

__version__ = "0.1.0"
