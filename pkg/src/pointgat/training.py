"""Loss, optimizer, schedule, and the train/evaluate loops.

Training is deterministic given the run seed: shuffles come from one
seeded generator, per-batch gradients accumulate molecule by molecule in
a fixed order, and the parameter update walks names in sorted order, so
two runs from the same seed produce bitwise-identical trajectories.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray, GradientCheckReport
from .errors import ConfigError, NonFiniteGradientError
from .geometry import PointCloud
from .model import EncoderConfig, Model, PreparedGraph, save_checkpoint

__all__ = [
    "mae",
    "TargetNormalizer",
    "AdamOptimizer",
    "PlateauScheduler",
    "TrainResult",
    "train",
    "evaluate_model",
    "gradient_check_model",
]


def mae(predictions, targets) -> float:
    """Mean absolute error between two equal-length sequences."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {targets.shape}")
    if predictions.size == 0:
        raise ValueError("mae of an empty sequence is undefined")
    return float(np.mean(np.abs(predictions - targets)))


@dataclass(frozen=True)
class TargetNormalizer:
    """Shift by the mean, scale by the mean absolute deviation."""

    mean: float
    mad: float

    def __post_init__(self):
        if not self.mad > 0:
            raise ValueError(f"mean absolute deviation must be positive, got {self.mad}")

    @classmethod
    def fit(cls, values) -> "TargetNormalizer":
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            raise ValueError("cannot fit a normalizer on no targets")
        mean = float(values.mean())
        mad = float(np.abs(values - mean).mean())
        return cls(mean=mean, mad=mad)

    def normalize(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.mad

    def denormalize(self, y):
        return np.asarray(y, dtype=np.float64) * self.mad + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean, "mad": self.mad}


class AdamOptimizer:
    """Standard bias-corrected Adam over a flat name -> DiffArray dict."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, DiffArray],
             grads: dict[str, np.ndarray]) -> dict[str, DiffArray]:
        """One update; returns a fresh parameter dict (arrays are immutable)."""
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        updated: dict[str, DiffArray] = {}
        for name in sorted(params):
            p = params[name]
            g = grads.get(name)
            if g is None:
                g = np.zeros(p.shape)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for parameter {name}")
            m = self._m.get(name)
            v = self._v.get(name)
            m = (1.0 - self.beta1) * g if m is None else self.beta1 * m + (1.0 - self.beta1) * g
            v = (1.0 - self.beta2) * g * g if v is None else self.beta2 * v + (1.0 - self.beta2) * g * g
            self._m[name] = m
            self._v[name] = v
            delta = self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            updated[name] = ad.parameter(p.values - delta)
        return updated


class PlateauScheduler:
    """Multiply the optimizer's lr by ``factor`` after ``patience`` stale validations."""

    def __init__(self, optimizer: AdamOptimizer, patience: int, factor: float):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 < factor < 1.0:
            raise ValueError("factor must lie in (0, 1)")
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.best: float | None = None
        self.stale = 0

    def step(self, metric: float) -> bool:
        """Observe one validation metric; returns True when lr was reduced."""
        if not np.isfinite(metric):
            raise ValueError("validation metric must be finite")
        if self.best is None or metric < self.best:
            self.best = metric
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            self.optimizer.lr *= self.factor
            self.stale = 0
            return True
        return False


def _absolute_error(prediction: DiffArray, target: float) -> DiffArray:
    # |x| through the softened norm with eps 0: sqrt(x^2), exact away from 0
    diff = ad.expand(prediction - ad.constant(target), axis=0)
    return ad.safe_norm(diff, axis=0, eps=0.0)


def _molecule_grads(model: Model, prepared: PreparedGraph,
                    target_normalized: float) -> tuple[float, dict[str, np.ndarray]]:
    with ad.Tape() as tape:
        prediction = model.predict_diff(prepared)
        loss = _absolute_error(prediction, target_normalized)
    grad_map = ad.backward(loss, tape)
    named = {}
    for name, param in model.params.items():
        g = grad_map.get(param)
        if g is not None:
            named[name] = g
    return float(loss.values), named


@dataclass
class TrainResult:
    best_epoch: int
    best_val_mae: float
    epochs_run: int
    steps: int
    history: list[dict] = field(default_factory=list)
    checkpoint_path: str | None = None


def _predictions(model: Model, prepared: list[PreparedGraph]) -> np.ndarray:
    return np.array([float(model.predict_diff(p).values) for p in prepared])


def train(model: Model, train_records, val_records, targets_train, targets_val,
          *, lr: float, batch_size: int, max_epochs: int,
          early_stopping_patience: int, lr_patience: int, lr_factor: float,
          seed: int = 0, out_dir=None, log_name: str = "metrics.ndjson",
          checkpoint_name: str = "checkpoint.json",
          extra_header: dict | None = None,
          stop_below_train_mae: float | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Fit the model; early-stops on validation MAE (normalized scale).

    ``train_records`` / ``val_records`` are PreparedGraph lists and the
    target arrays hold raw (unnormalized) values.  The normalizer is fit
    on the training targets only.  When ``out_dir`` is given, the best
    checkpoint and an ndjson metric log are written there.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if not train_records or not val_records:
        raise ConfigError("training and validation splits must be non-empty")

    normalizer = TargetNormalizer.fit(targets_train)
    y_train = normalizer.normalize(targets_train)
    y_val = normalizer.normalize(targets_val)

    optimizer = AdamOptimizer(lr=lr)
    scheduler = PlateauScheduler(optimizer, patience=lr_patience, factor=lr_factor)
    rng = np.random.default_rng(seed)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = (out_dir / log_name).open("w")

    started = time.perf_counter()
    best_val = np.inf
    best_epoch = 0
    best_params = {name: arr.values for name, arr in model.params.items()}
    stale = 0
    steps = 0
    history: list[dict] = []
    stop = False

    def log(epoch: int, split: str, mae_norm: float) -> None:
        entry = {
            "epoch": epoch,
            "split": split,
            "mae_normalized": mae_norm,
            "mae_original_units": mae_norm * normalizer.mad,
            "lr": optimizer.lr,
            "wall_seconds": time.perf_counter() - started,
        }
        history.append(entry)
        if log_file is not None:
            log_file.write(json.dumps(entry) + "\n")
            log_file.flush()

    epoch = 0
    try:
        for epoch in range(1, max_epochs + 1):
            order = rng.permutation(len(train_records))
            for start in range(0, len(order), batch_size):
                batch = order[start:start + batch_size]
                accumulated: dict[str, np.ndarray] = {}
                for idx in batch:
                    _, grads = _molecule_grads(model, train_records[idx], float(y_train[idx]))
                    for name in sorted(grads):
                        g = grads[name]
                        accumulated[name] = g if name not in accumulated else accumulated[name] + g
                scale = 1.0 / len(batch)
                accumulated = {name: g * scale for name, g in accumulated.items()}
                model.params = optimizer.step(model.params, accumulated)
                steps += 1
                if max_steps is not None and steps >= max_steps:
                    stop = True
                    break

            train_preds = _predictions(model, train_records)
            train_mae = mae(train_preds, y_train)
            # overfit runs validate on the training split itself; skip the
            # duplicate forward passes in that case
            if val_records is train_records:
                val_mae = mae(train_preds, y_val)
            else:
                val_mae = mae(_predictions(model, val_records), y_val)
            log(epoch, "train", train_mae)
            log(epoch, "val", val_mae)

            if val_mae < best_val:
                best_val = val_mae
                best_epoch = epoch
                best_params = {name: arr.values for name, arr in model.params.items()}
                stale = 0
            else:
                stale += 1
            scheduler.step(val_mae)
            if stop_below_train_mae is not None and train_mae < stop_below_train_mae:
                break
            if stale >= early_stopping_patience or stop:
                break
    finally:
        if log_file is not None:
            log_file.close()

    model.params = {name: ad.parameter(v) for name, v in best_params.items()}
    checkpoint_path = None
    if out_dir is not None:
        checkpoint_path = str(out_dir / checkpoint_name)
        header = dict(extra_header or {})
        header.setdefault("normalizer", normalizer.to_dict())
        save_checkpoint(checkpoint_path, model, seed=seed, step=steps, extra=header)
    return TrainResult(
        best_epoch=best_epoch,
        best_val_mae=float(best_val),
        epochs_run=epoch,
        steps=steps,
        history=history,
        checkpoint_path=checkpoint_path,
    )


def evaluate_model(model: Model, prepared: list[PreparedGraph], targets,
                   normalizer: TargetNormalizer) -> dict:
    """MAE of denormalized predictions against raw targets."""
    targets = np.asarray(targets, dtype=np.float64)
    raw = normalizer.denormalize(_predictions(model, prepared))
    return {
        "mae": mae(raw, targets),
        "mae_normalized": mae(normalizer.normalize(raw), normalizer.normalize(targets)),
        "count": int(targets.size),
    }


def gradient_check_model(config: EncoderConfig, *, n_atoms: int = 5, seed: int = 0,
                         step: float = 1e-5, tolerance: float = 1e-6,
                         target: float = 0.25) -> GradientCheckReport:
    """Central-difference check of the full model + loss gradient.

    Builds a random structure, fixes a target, and verifies the analytic
    gradient of the absolute-error loss for every parameter component.
    """
    rng = np.random.default_rng(seed)
    model = Model.initialize(config, seed=seed)
    positions = rng.uniform(0.0, 0.8 * config.cutoff, size=(n_atoms, 3))
    numbers = rng.choice(np.asarray(config.vocabulary, dtype=np.int64), size=n_atoms)
    prepared = model.prepare(PointCloud(numbers, positions))

    def loss() -> DiffArray:
        return _absolute_error(model.predict_diff(prepared), target)

    names = sorted(model.params)
    leaves = [model.params[name] for name in names]
    return ad.finite_difference_check(loss, leaves, step=step, tolerance=tolerance,
                                      names=names)
