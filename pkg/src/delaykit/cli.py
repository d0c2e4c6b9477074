"""Command-line front end.

Subcommands: simulate, generate-data, train, evaluate, bench, verify.
All parameters come from a sectioned plain-text config (see config.py);
every output embeds the canonical config hash and the master seed.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime divergence,
3 verification violations.
"""

import argparse
import csv
import os
import sys

import numpy as np

from .backstepping import calibrate_slack, check_iss_bound, check_target_system
from .bench import run_bench, report_to_csv
from .config import RunConfig
from .dataset import export_csv, generate_dataset, load_dataset, save_dataset
from .errors import ConfigError, DelayKitError
from .nno import (
    load_model,
    predict_trajectories,
    relative_l2,
    save_model,
    train_nno,
)
from .predictor import SolverConfig, infer_grid_count
from .simulate import (
    ExactPredictor,
    NeuralPredictor,
    PerturbedPredictor,
    SuccessivePredictor,
    compute_metrics,
    run_closed_loop,
)


def _write_kv(path, pairs):
    with open(path, "w") as fh:
        for key, val in pairs:
            fh.write(f"{key}={val}\n")


def _make_predictor(kind, cfg, loop, model_path_required=True):
    if kind == "exact":
        return ExactPredictor(refine=loop["oracle_refine"])
    if kind == "successive":
        return SuccessivePredictor(
            SolverConfig(tol=loop["solver_tol"], max_iters=loop["solver_max_iters"])
        )
    if kind == "neural":
        path = cfg.section("nno")["model_path"]
        if not os.path.exists(path):
            raise ConfigError(f"neural predictor requires a model file: {path} is missing")
        return NeuralPredictor(load_model(path))
    if kind == "perturbed":
        inner = SuccessivePredictor(
            SolverConfig(tol=loop["solver_tol"], max_iters=loop["solver_max_iters"])
        )
        return PerturbedPredictor(inner, loop["epsilon"], seed=[loop["seed"], 17])
    raise ConfigError(f"unknown predictor kind {kind!r}")


def cmd_simulate(cfg: RunConfig, args):
    system = cfg.build_system()
    loop = cfg.section("loop")
    predictor = _make_predictor(args.predictor, cfg, loop)
    lc = cfg.loop_config()
    record = run_closed_loop(system, predictor, lc)
    os.makedirs(args.out, exist_ok=True)
    record.metadata.update(
        {"config_hash": cfg.config_hash(), "predictor": predictor.kind}
    )
    record.to_csv(os.path.join(args.out, "trajectory.csv"))
    metrics = compute_metrics(record)
    _write_kv(
        os.path.join(args.out, "metrics.txt"),
        [
            ("config_hash", cfg.config_hash()),
            ("seed", lc.seed),
            ("predictor", predictor.kind),
            ("tracking_l2_sum", repr(metrics.tracking_l2_sum)),
            ("prediction_l2_mean", repr(metrics.prediction_l2_mean)),
            ("prediction_l2_sum", repr(metrics.prediction_l2_sum)),
            ("max_state_norm", repr(metrics.max_state_norm)),
            ("diverged", metrics.diverged),
        ],
    )
    return 2 if record.diverged else 0


def cmd_generate_data(cfg: RunConfig, args):
    system = cfg.build_system()
    spec = cfg.dataset_spec()
    ds = generate_dataset(spec, system, head=cfg.section("loop")["head"])
    save_dataset(ds, args.out)
    if args.csv:
        export_csv(
            ds,
            args.csv,
            metadata={"config_hash": cfg.config_hash(), "seed": spec.seed},
        )
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def cmd_train(cfg: RunConfig, args):
    system = cfg.build_system()
    ds = load_dataset(args.data, system=system)
    grid = ds.hists.shape[1]
    nno_cfg = cfg.nno_config(system, grid)
    train_cfg = cfg.train_config()
    model, history = train_nno(ds, train_cfg, nno_cfg, log_every=args.log_every)
    save_model(model, args.out)
    hist_path = args.history or args.out + ".history.csv"
    with open(hist_path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.config_hash()}\n")
        fh.write(f"# seed={train_cfg.seed}\n")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "train_rel_l2", "test_rel_l2"])
        for h in history:
            writer.writerow(
                [h.epoch, repr(h.lr), repr(h.train_loss), repr(h.train_rel_l2), repr(h.test_rel_l2)]
            )
    best = min(h.test_rel_l2 for h in history)
    print(f"saved {args.out} (best held-out relative L2 = {best:.3e})")
    return 0


def cmd_evaluate(cfg: RunConfig, args):
    system = cfg.build_system()
    ds = load_dataset(args.data, system=system)
    model = load_model(args.model)
    n = system.n
    z_tr, y_tr, z_te, y_te = ds.tensors()

    def anchored_rel(z, y):
        pred = predict_trajectories(model, z, z[:, 0, :n])
        pred[:, 0, :] = z[:, 0, :n]
        return float(np.mean(relative_l2(pred, y)))

    loop = cfg.section("loop")
    trials = loop["trajectories"]
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for kind in ("successive", "neural"):
        for trial in range(trials):
            lc = cfg.loop_config(seed=[loop["seed"], trial])
            predictor = (
                NeuralPredictor(model)
                if kind == "neural"
                else SuccessivePredictor(
                    SolverConfig(tol=loop["solver_tol"], max_iters=loop["solver_max_iters"])
                )
            )
            rec = run_closed_loop(system, predictor, lc)
            met = compute_metrics(rec)
            rows.append(
                [
                    kind,
                    trial,
                    repr(met.tracking_l2_sum),
                    repr(met.prediction_l2_mean),
                    repr(met.max_state_norm),
                    int(met.diverged),
                ]
            )
    per_traj = os.path.join(args.out, "evaluation_trajectories.csv")
    with open(per_traj, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.config_hash()}\n# seed={loop['seed']}\n")
        writer = csv.writer(fh)
        writer.writerow(
            ["predictor", "trial", "tracking_l2_sum", "prediction_l2_mean", "max_state_norm", "diverged"]
        )
        writer.writerows(rows)

    def agg(kind, col):
        vals = [float(r[col]) for r in rows if r[0] == kind]
        return float(np.mean(vals))

    summary = os.path.join(args.out, "evaluation_summary.csv")
    with open(summary, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.config_hash()}\n# seed={loop['seed']}\n")
        writer = csv.writer(fh)
        writer.writerow(
            [
                "parameters",
                "train_rel_l2",
                "test_rel_l2",
                "avg_tracking_l2_sum_neural",
                "avg_prediction_l2_neural",
                "avg_tracking_l2_sum_numeric",
                "avg_prediction_l2_numeric",
            ]
        )
        writer.writerow(
            [
                model.parameter_count(),
                repr(anchored_rel(z_tr, y_tr)),
                repr(anchored_rel(z_te, y_te)),
                repr(agg("neural", 2)),
                repr(agg("neural", 3)),
                repr(agg("successive", 2)),
                repr(agg("successive", 3)),
            ]
        )
    print(f"wrote {per_traj} and {summary}")
    return 0


def cmd_bench(cfg: RunConfig, args):
    system = cfg.build_system()
    spec = cfg.bench_spec()
    fixed_model = None
    if spec.models_mode == "fixed":
        fixed_model = load_model(cfg.section("nno")["model_path"])
    report = run_bench(spec, system, fixed_model=fixed_model)
    report.environment["config_hash"] = cfg.config_hash()
    report.environment["seed"] = spec.seed
    report_to_csv(report, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_verify(cfg: RunConfig, args):
    system = cfg.build_system()
    loop = cfg.section("loop")
    ver = cfg.section("verify")
    kind = args.predictor or ver["predictor"]
    os.makedirs(args.out, exist_ok=True)
    refine = ver["oracle_refine"]
    lc = cfg.loop_config(seed=[loop["seed"], 0])
    exact_rec = run_closed_loop(system, ExactPredictor(refine=40), lc)
    if exact_rec.diverged:
        return 2
    calib = calibrate_slack(
        exact_rec, system, c_values=ver["c_values"], oracle_refine=refine,
        safety=ver["safety"],
    )
    total_violations = 0
    boundary_fail = 0
    rows = []
    from .backstepping import reconstruct_profiles

    for seed_idx in range(ver["seeds"]):
        lc = cfg.loop_config(seed=[loop["seed"], seed_idx])
        if kind == "perturbed":
            inner = SuccessivePredictor(
                SolverConfig(tol=loop["solver_tol"], max_iters=loop["solver_max_iters"])
            )
            predictor = PerturbedPredictor(
                inner, ver["epsilon"], seed=[loop["seed"], seed_idx, 17]
            )
        else:
            predictor = _make_predictor(kind, cfg, loop)
        rec = run_closed_loop(system, predictor, lc)
        if rec.diverged:
            return 2
        profiles = reconstruct_profiles(rec, system, oracle_refine=refine)
        target = check_target_system(
            rec, system, slack=calib.boundary, profiles=profiles
        )
        if not target.passed:
            boundary_fail += 1
        for c in ver["c_values"]:
            rep = check_iss_bound(
                rec, system, c, slack=calib.iss[c], profiles=profiles
            )
            total_violations += rep.violations
            for i in range(len(rep.lhs)):
                rows.append(
                    [seed_idx, repr(c), i, repr(rep.lhs[i]), repr(rep.rhs[i]), repr(rep.margins[i])]
                )
    with open(os.path.join(args.out, "verify_iss.csv"), "w", newline="") as fh:
        fh.write(
            f"# config_hash={cfg.config_hash()}\n# seed={loop['seed']}\n"
            f"# predictor={kind}\n"
        )
        writer = csv.writer(fh)
        writer.writerow(["seed", "c", "step", "lhs", "rhs", "margin"])
        writer.writerows(rows)
    _write_kv(
        os.path.join(args.out, "verify_summary.txt"),
        [
            ("config_hash", cfg.config_hash()),
            ("seed", loop["seed"]),
            ("predictor", kind),
            ("iss_violations", total_violations),
            ("boundary_failures", boundary_fail),
            ("boundary_slack", repr(calib.boundary)),
        ]
        + [(f"iss_slack_c{c}", repr(calib.iss[c])) for c in ver["c_values"]],
    )
    return 3 if (total_violations or boundary_fail) else 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="delaykit",
        description="Predictor-feedback delay compensation toolkit",
    )
    parser.add_argument("--config", required=True, help="path to run configuration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one closed-loop rollout")
    p.add_argument("--predictor", default="successive",
                   choices=["exact", "successive", "neural", "perturbed"])
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("generate-data", help="generate a training dataset")
    p.add_argument("--out", required=True, help="output dataset file")
    p.add_argument("--csv", default=None, help="optional CSV export path")

    p = sub.add_parser("train", help="train the neural predictor")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output model checkpoint")
    p.add_argument("--history", default=None, help="loss-history CSV path")
    p.add_argument("--log-every", type=int, default=0)

    p = sub.add_parser("evaluate", help="closed-loop evaluation of a model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("bench", help="wall-clock predictor benchmark")
    p.add_argument("--out", required=True, help="output CSV")

    p = sub.add_parser("verify", help="backstepping stability audit")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--predictor", default=None,
                   choices=["exact", "successive", "neural", "perturbed"])
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "verify": cmd_verify,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.from_file(args.config)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DelayKitError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
