"""Command-line entry point.

Verbs: train, evaluate, predict, gradcheck, equivariance, inspect.
Exit codes: 0 success (or property check passed), 1 runtime failure,
2 usage/configuration/data errors.  Only ``train`` writes files, and
only inside its --out directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .dataio import load_config, load_xyz, split_dataset
from .equivariance import equivariance_check, random_cloud, with_vector_bias
from .errors import (CheckpointError, ConfigError, DataFormatError,
                     GeometryError, PointgatError, VocabularyError)
from .model import EncoderConfig, Model, load_checkpoint
from .training import TargetNormalizer, evaluate_model, gradient_check_model, train

USAGE_ERRORS = (ConfigError, DataFormatError, CheckpointError, VocabularyError,
                GeometryError)

# guard for gradcheck: central differences over every parameter get slow fast
GRADCHECK_MAX_ATOMS = 10
GRADCHECK_MAX_SCALAR_CHANNELS = 16

_TINY_GRADCHECK_MODEL = {
    "num_layers": 2, "scalar_channels": 8, "vector_channels": 4,
    "rbf_count": 6, "cutoff": 5.0,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointgat",
        description="Train and probe rotation-equivariant attention models "
                    "on molecular point clouds.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p_train = sub.add_parser("train", help="fit a model from a run config")
    p_train.add_argument("--config", required=True, type=Path)
    p_train.add_argument("--out", required=True, type=Path)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--set", dest="overrides", action="append", default=[],
                         metavar="KEY=VALUE", help="dotted-key config override")

    p_eval = sub.add_parser("evaluate", help="MAE of a checkpoint on an xyz file")
    p_eval.add_argument("--checkpoint", required=True, type=Path)
    p_eval.add_argument("--data", required=True, type=Path)

    p_pred = sub.add_parser("predict", help="per-structure predictions from a checkpoint")
    p_pred.add_argument("--checkpoint", required=True, type=Path)
    p_pred.add_argument("--data", required=True, type=Path)

    p_grad = sub.add_parser("gradcheck",
                            help="verify model gradients against central differences")
    p_grad.add_argument("--config", type=Path, default=None)
    p_grad.add_argument("--seed", type=int, default=1)
    p_grad.add_argument("--atoms", type=int, default=5)
    p_grad.add_argument("--step", type=float, default=1e-5)
    p_grad.add_argument("--tolerance", type=float, default=1e-6)
    p_grad.add_argument("--force", action="store_true",
                        help="skip the small-model guard")

    p_eq = sub.add_parser("equivariance",
                          help="rotation equivariance property check")
    p_eq.add_argument("--config", type=Path, default=None)
    p_eq.add_argument("--checkpoint", type=Path, default=None)
    p_eq.add_argument("--trials", type=int, default=50)
    p_eq.add_argument("--tolerance", type=float, default=1e-9)
    p_eq.add_argument("--seed", type=int, default=0)
    p_eq.add_argument("--atoms", type=int, default=20)
    p_eq.add_argument("--negative-control", action="store_true",
                      help="also require that a bias-on-vectors copy fails")

    p_inspect = sub.add_parser("inspect", help="parameter counts per module")
    p_inspect.add_argument("--config", type=Path, default=None)

    return parser


def _model_config_from_args(args, default: dict | None = None) -> EncoderConfig:
    if args.config is not None:
        return load_config(args.config).model
    return EncoderConfig(**(default or {}))


def cmd_train(args) -> int:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    run = load_config(args.config, overrides)
    records = load_xyz(run.dataset.path)
    for idx, record in enumerate(records):
        if run.dataset.target not in record.targets:
            raise DataFormatError(
                f"record {idx} has no target {run.dataset.target!r}"
            )
    train_recs, val_recs, _ = split_dataset(records, run.dataset.fractions, run.seed)

    model = Model.initialize(run.model, seed=run.seed)
    prepared_train = [model.prepare(r.cloud) for r in train_recs]
    prepared_val = [model.prepare(r.cloud) for r in val_recs]
    y_train = [r.targets[run.dataset.target] for r in train_recs]
    y_val = [r.targets[run.dataset.target] for r in val_recs]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(run.to_dict(), indent=2) + "\n")

    result = train(
        model, prepared_train, prepared_val, y_train, y_val,
        lr=run.train.lr, batch_size=run.train.batch_size,
        max_epochs=run.train.max_epochs,
        early_stopping_patience=run.train.early_stopping_patience,
        lr_patience=run.train.lr_patience, lr_factor=run.train.lr_factor,
        seed=run.seed, out_dir=out,
        extra_header={"target": run.dataset.target, "units": run.dataset.units},
    )
    print(json.dumps({
        "best_epoch": result.best_epoch,
        "best_val_mae_normalized": result.best_val_mae,
        "epochs_run": result.epochs_run,
        "steps": result.steps,
        "checkpoint": result.checkpoint_path,
    }))
    return 0


def _load_checkpoint_model(path):
    model, header = load_checkpoint(path)
    config = header.get("config", {})
    norm = config.get("normalizer")
    normalizer = TargetNormalizer(**norm) if norm else TargetNormalizer(0.0, 1.0)
    return model, normalizer, config


def cmd_evaluate(args) -> int:
    model, normalizer, config = _load_checkpoint_model(args.checkpoint)
    target = config.get("target")
    records = load_xyz(args.data)
    if not records:
        raise DataFormatError(f"no structures in {args.data}")
    targets = []
    for idx, record in enumerate(records):
        if target not in record.targets:
            raise DataFormatError(f"record {idx} has no target {target!r}")
        targets.append(record.targets[target])
    prepared = [model.prepare(r.cloud) for r in records]
    metrics = evaluate_model(model, prepared, targets, normalizer)
    metrics["target"] = target
    metrics["units"] = config.get("units", "")
    print(json.dumps(metrics))
    return 0


def cmd_predict(args) -> int:
    model, normalizer, config = _load_checkpoint_model(args.checkpoint)
    records = load_xyz(args.data)
    if not records:
        raise DataFormatError(f"no structures in {args.data}")
    units = config.get("units", "")
    for index, record in enumerate(records):
        raw = model.forward(record.cloud).prediction
        value = float(normalizer.denormalize(raw))
        print(json.dumps({"index": index, "prediction": value, "units": units}))
    return 0


def cmd_gradcheck(args) -> int:
    config = _model_config_from_args(args, _TINY_GRADCHECK_MODEL)
    if not args.force:
        if args.atoms > GRADCHECK_MAX_ATOMS:
            raise ConfigError(
                f"gradcheck guard: {args.atoms} atoms > {GRADCHECK_MAX_ATOMS} "
                "(pass --force to override)"
            )
        if config.scalar_channels > GRADCHECK_MAX_SCALAR_CHANNELS:
            raise ConfigError(
                f"gradcheck guard: scalar_channels {config.scalar_channels} > "
                f"{GRADCHECK_MAX_SCALAR_CHANNELS} (pass --force to override)"
            )
    report = gradient_check_model(config, n_atoms=args.atoms, seed=args.seed,
                                  step=args.step, tolerance=args.tolerance)
    print(json.dumps(report.to_dict()))
    return 0 if report.passed else 1


def cmd_equivariance(args) -> int:
    if args.checkpoint is not None:
        model, _, _ = _load_checkpoint_model(args.checkpoint)
    else:
        model = Model.initialize(_model_config_from_args(args), seed=args.seed)

    rng = np.random.default_rng(args.seed)
    clouds = [
        random_cloud(rng, args.atoms, vocabulary=model.config.vocabulary,
                     box=1.4 * model.config.cutoff)
        for _ in range(args.trials)
    ]
    report = equivariance_check(lambda c: model.forward(c).states, clouds,
                                trials=args.trials, tolerance=args.tolerance,
                                seed=args.seed + 1)
    payload = report.to_dict()
    if args.negative_control:
        biased = with_vector_bias(model, seed=args.seed)
        control = equivariance_check(lambda c: biased.forward(c).states, clouds,
                                     trials=min(args.trials, 5),
                                     tolerance=args.tolerance, seed=args.seed + 1)
        payload["negative_control_max_deviation"] = control.max_deviation
        payload["negative_control_failed_as_expected"] = not control.passed
        print(json.dumps(payload))
        return 0 if report.passed and not control.passed else 1
    print(json.dumps(payload))
    return 0 if report.passed else 1


def cmd_inspect(args) -> int:
    config = _model_config_from_args(args)
    model = Model.initialize(config, seed=0)
    counts = model.parameter_count()
    counts["config"] = config.to_dict()
    print(json.dumps(counts))
    return 0


_COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "equivariance": cmd_equivariance,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.verb](args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PointgatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
