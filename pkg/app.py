"""Command-line entry point: simulate, corrupt, train, predict, rollout, eval, gradcheck.

Results meant for scripts (manifest paths, metric JSON) go to stdout; logs and
progress bars go to stderr. Exit codes: 0 ok, 1 other error, 2 config error,
3 numerical abort, 4 gradient check failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import pandas as pd

from config import (CorruptionConfig, apply_seed, expand_systems, from_section, load_run_config,
                    log_level, write_frozen_config)
from errors import ConfigError, GradcheckFailure, M2MError, NumericalAbort
from gradcheck import assert_passed, run_gradchecks
from inference import DEFAULT_STEPS, evaluate_pairs, predict, rollout
from measures import load_dataset, load_pointcloud, load_split, load_trajectories, save_pointcloud
from metrics import average_reports, metric_report
from model import load_checkpoint, save_checkpoint
from simulators import emit_corruption_dataset, emit_mkv_dataset
from training import Trainer, TrainHistory

logger = logging.getLogger("m2m")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_GRADCHECK = 4

CHECKPOINT_NAME = "model.ckpt"
HISTORY_NAME = "history.jsonl"
CURVES_NAME = "metrics.csv"


def _show_progress():
    return sys.stderr.isatty()


def _require_out_dir(run):
    if run.out_dir is None:
        raise ConfigError("out_dir")
    return run.out_dir


def cmd_simulate(args):
    """Simulate McKean-Vlasov systems into dataset.json (and test_dataset.json)"""
    run = apply_seed(load_run_config(args.config, require=("data",)), args.seed)
    out_dir = _require_out_dir(run)
    if "systems" not in run.data:
        raise ConfigError("data.systems")
    train_systems = expand_systems(run.data["systems"], "data.systems")
    test_systems = expand_systems(run.data["test_systems"], "data.test_systems") if run.data.get("test_systems") else []
    dims = {c.d for c in train_systems + test_systems}
    if len(dims) > 1:
        raise ConfigError("data.systems", f"all systems must share d, got {sorted(dims)}")

    manifest = emit_mkv_dataset(train_systems, out_dir, "dataset.json", progress=_show_progress())
    print(manifest)
    if test_systems:
        test_manifest = emit_mkv_dataset(test_systems, out_dir, "test_dataset.json",
                                         index_offset=len(train_systems), progress=_show_progress())
        print(test_manifest)
    write_frozen_config(run, out_dir)
    return EXIT_OK


def cmd_corrupt(args):
    """Corrupt clean target clouds into (source, target) pairs"""
    run = apply_seed(load_run_config(args.config, require=("data",)), args.seed)
    out_dir = _require_out_dir(run)
    targets = run.data.get("targets")
    if not isinstance(targets, list) or not targets:
        raise ConfigError("data.targets", "expected a non-empty list of .m2m paths")
    config = from_section(CorruptionConfig, run.data.get("corruption", {}), "data.corruption")
    clouds = [load_pointcloud(run.resolve_path(p)) for p in targets]
    print(emit_corruption_dataset(clouds, config, out_dir))
    write_frozen_config(run, out_dir)
    return EXIT_OK


def _load_train_data(run):
    if "manifest" not in run.data:
        raise ConfigError("data.manifest")
    dataset = load_dataset(run.resolve_path(run.data["manifest"]))
    if dataset.ambient_dim != run.model.ambient_dim:
        raise ConfigError("model.ambient_dim",
                          f"dataset has d={dataset.ambient_dim}, model declares {run.model.ambient_dim}")
    heldout = None
    if run.data.get("split"):
        dataset, heldout = dataset.split(heldout_indices=load_split(run.resolve_path(run.data["split"])))
    elif run.train.holdout_fraction > 0 and len(dataset) > 1:
        dataset, heldout = dataset.split(run.train.holdout_fraction)
    test = load_dataset(run.resolve_path(run.data["test_manifest"])) if run.data.get("test_manifest") else None
    return dataset, heldout, test


def _resume_checkpoint(run, path):
    if not path.exists():
        logger.warning("--resume given but %s does not exist; starting from scratch", path)
        return None
    checkpoint = load_checkpoint(path)
    if checkpoint.config != run.model:
        raise ConfigError("model", f"{path} was trained with a different model config")
    logger.info("Resuming from %s at step %d", path, checkpoint.step)
    return checkpoint


def _previous_records(path):
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def cmd_train(args):
    """Train a model and write checkpoint, history, metric curves and final metrics"""
    run = apply_seed(load_run_config(args.config, require=("model", "train", "data")), args.seed)
    out_dir = _require_out_dir(run)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_frozen_config(run, out_dir)
    dataset, heldout, test = _load_train_data(run)
    ckpt_path = out_dir / CHECKPOINT_NAME
    checkpoint = _resume_checkpoint(run, ckpt_path) if args.resume else None
    previous = _previous_records(out_dir / HISTORY_NAME) if checkpoint is not None else []

    trainer = Trainer(dataset, run.model, run.train, heldout=heldout, checkpoint=checkpoint)

    def save(t):
        save_checkpoint(ckpt_path, t.model, t.step, t.optimizer, run.train)

    logger.info("Training %s/%s on %d pairs for %d steps", run.model.arch, run.train.loss_kind,
                len(dataset), trainer.total)
    try:
        model, history = trainer.run(progress=_show_progress(), on_eval=save)
    finally:
        save(trainer)
        full = TrainHistory(previous + trainer.history.records)
        full.write_jsonl(out_dir / HISTORY_NAME)
        full.write_csv(out_dir / CURVES_NAME)

    eval_set = test if test is not None else heldout
    if eval_set is None:
        logger.warning("No held-out or test pairs; final metrics are on the training pairs")
        eval_set = dataset
    report = evaluate_pairs(model, eval_set, run.train.eval_steps)
    (out_dir / "final_metrics.json").write_text(report.to_json(indent=2))
    logger.info("Final metrics: w1=%.4f w2=%.4f ed=%.4f", report.w1, report.w2, report.ed)
    print(report.to_json())
    return EXIT_OK


def _default_output(source, suffix):
    source = Path(source)
    return source.with_name(source.stem + suffix)


def cmd_predict(args):
    """Push one source cloud through a checkpoint"""
    checkpoint = load_checkpoint(args.checkpoint)
    source = load_pointcloud(args.source)
    if not checkpoint.config.time_conditioned and args.steps is not None:
        logger.warning("--steps is ignored for a static checkpoint")
    prediction = predict(checkpoint.model, source, args.steps or DEFAULT_STEPS)
    output = Path(args.output) if args.output else _default_output(args.source, ".pred.m2m")
    save_pointcloud(prediction, output)
    print(output)
    return EXIT_OK


def cmd_rollout(args):
    """Roll out every trajectory of a manifest from its first marginal"""
    checkpoint = load_checkpoint(args.checkpoint)
    if not checkpoint.config.time_conditioned and args.steps is not None:
        logger.warning("--steps is ignored for a static checkpoint")
    steps = args.steps or DEFAULT_STEPS
    out_dir = Path(args.output) if args.output else Path(args.manifest).parent / "rollout"
    out_dir.mkdir(parents=True, exist_ok=True)

    systems, frames, reports = {}, [], []
    for system, trajectory in load_trajectories(args.manifest):
        result = rollout(checkpoint.model, trajectory.marginals[0], len(trajectory), steps, truth=trajectory)
        systems[system] = result.to_dict()
        frame = result.curves_frame()
        frame.insert(0, "system", system)
        frames.append(frame)
        reports.extend(result.reports)
        logger.info("%s: mean w1 %.4f over %d marginals", system, result.aggregate.w1, len(result.reports))

    aggregate = average_reports(reports)
    summary = {"steps_per_marginal": steps, "systems": systems, "aggregate": aggregate.to_dict()}
    (out_dir / "rollout.json").write_text(json.dumps(summary, indent=2))
    pd.concat(frames, ignore_index=True).to_csv(out_dir / "rollout_curves.csv", index=False)
    print(aggregate.to_json())
    return EXIT_OK


def cmd_eval(args):
    """Compare a predicted cloud with a target cloud"""
    report = metric_report(load_pointcloud(args.pred), load_pointcloud(args.target))
    print(report.to_json())
    return EXIT_OK


def cmd_gradcheck(args):
    """Finite-difference check of every training loss on a tiny model"""
    model_config = None
    if args.config:
        model_config = load_run_config(args.config, require=("model",)).model
    reports = run_gradchecks(model_config, corrupt=args.corrupt_backward)
    for report in reports:
        for line in report.lines():
            print(line)
    print(f"max relative error: {max(r.max_rel_error for r in reports):.3e}")
    assert_passed(reports)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="m2m", description="Measure-to-measure regression with transformers")
    parser.add_argument("--log-level", default=None,
                        help="Logging level (default: M2M_LOG_LEVEL or INFO)")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("simulate", help="Simulate McKean-Vlasov datasets")
    p.add_argument("config", help="Run config JSON with data.systems and out_dir")
    p.add_argument("--seed", type=int, default=None, help="Override every seed (beats M2M_SEED)")
    p.set_defaults(func=cmd_simulate)

    p = commands.add_parser("corrupt", help="Build corrupted/clean pairs from target clouds")
    p.add_argument("config", help="Run config JSON with data.targets, data.corruption and out_dir")
    p.add_argument("--seed", type=int, default=None, help="Override every seed (beats M2M_SEED)")
    p.set_defaults(func=cmd_corrupt)

    p = commands.add_parser("train", help="Train a model")
    p.add_argument("config", help="Run config JSON with model, train, data and out_dir")
    p.add_argument("--resume", action="store_true", help="Continue from out_dir/model.ckpt")
    p.add_argument("--seed", type=int, default=None, help="Override every seed (beats M2M_SEED)")
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("predict", help="Predict the target cloud of one source cloud")
    p.add_argument("checkpoint", help="Model checkpoint")
    p.add_argument("source", help="Source .m2m cloud")
    p.add_argument("--steps", type=int, default=None,
                   help=f"Euler steps over [0, 1] (default {DEFAULT_STEPS}; ignored for static models)")
    p.add_argument("--output", default=None, help="Output .m2m path (default <source>.pred.m2m)")
    p.set_defaults(func=cmd_predict)

    p = commands.add_parser("rollout", help="Autoregressive rollout of every trajectory in a manifest")
    p.add_argument("checkpoint", help="Model checkpoint")
    p.add_argument("manifest", help="Manifest with recorded trajectories")
    p.add_argument("--steps", type=int, default=None,
                   help=f"Euler steps per marginal (default {DEFAULT_STEPS}; ignored for static models)")
    p.add_argument("--output", default=None, help="Output directory (default <manifest dir>/rollout)")
    p.set_defaults(func=cmd_rollout)

    p = commands.add_parser("eval", help="Metrics between a predicted and a target cloud")
    p.add_argument("pred", help="Predicted .m2m cloud")
    p.add_argument("target", help="Target .m2m cloud")
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("gradcheck", help="Finite-difference gradient checks on a tiny model")
    p.add_argument("config", nargs="?", default=None, help="Optional run config whose model section is checked")
    p.add_argument("--corrupt-backward", action="store_true",
                   help="Skew one parameter's gradient; the check must then fail")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    """Main application entry point"""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=(args.log_level or log_level()).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error("Config error: %s", e)
        return EXIT_CONFIG
    except NumericalAbort as e:
        logger.error("Numerical abort: %s", e)
        return EXIT_NUMERIC
    except GradcheckFailure as e:
        logger.error("%s", e)
        return EXIT_GRADCHECK
    except (M2MError, OSError, ValueError) as e:
        logger.error("Error: %s", e)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
