"""Minibatch training loop: Adam, plateau LR halving, early stopping,
best-checkpoint selection, and per-class evaluation tables."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import dataset, network, neural
from .dataset import CLASS_ORDER, NEGATIVE_CLASSES, POSITIVE_CLASSES


@dataclass(frozen=True)
class TrainConfig:
    target: str = "detector"
    batch_size: int = 256
    batches_per_epoch: int = 200
    max_epochs: int = 100
    learning_rate: float = 1e-3
    plateau_window: int = 5
    plateau_epsilon: float = 1e-4
    early_stop_patience: int = 15
    val_sample_size: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.target not in dataset.TARGETS:
            raise ValueError(f"target must be one of {dataset.TARGETS}, got {self.target!r}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.val_sample_size < 2 or self.val_sample_size % 2:
            raise ValueError(f"val_sample_size must be even and >= 2, got {self.val_sample_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.plateau_window < 1 or self.early_stop_patience < self.plateau_window:
            raise ValueError("need early_stop_patience >= plateau_window >= 1")
        if self.max_epochs < 1 or self.batches_per_epoch < 1:
            raise ValueError("max_epochs and batches_per_epoch must be >= 1")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")


@dataclass
class TrainLog:
    """Per-epoch history. Wall times are measurements, not replayable state;
    determinism comparisons should use deterministic_rows()."""

    epochs: list = field(default_factory=list)
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    val_accuracies: list = field(default_factory=list)
    learning_rates: list = field(default_factory=list)
    wall_seconds: list = field(default_factory=list)

    def append(self, epoch, train_loss, val_loss, val_accuracy, lr, wall):
        self.epochs.append(int(epoch))
        self.train_losses.append(float(train_loss))
        self.val_losses.append(float(val_loss))
        self.val_accuracies.append(float(val_accuracy))
        self.learning_rates.append(float(lr))
        self.wall_seconds.append(float(wall))

    def __len__(self):
        return len(self.epochs)

    def deterministic_rows(self) -> list[tuple]:
        return list(zip(self.epochs, self.train_losses, self.val_losses,
                        self.val_accuracies, self.learning_rates))

    def write_tsv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_loss", "val_accuracy",
                             "learning_rate", "wall_seconds"])
            for row in zip(self.epochs, self.train_losses, self.val_losses,
                           self.val_accuracies, self.learning_rates,
                           self.wall_seconds):
                writer.writerow([row[0]] + [f"{v:.10g}" for v in row[1:]])


class TrainingDiverged(RuntimeError):
    """Non-finite training loss; carries the log accumulated so far."""

    def __init__(self, message, log: TrainLog):
        super().__init__(message)
        self.log = log


def plateau_lr_step(log: TrainLog, window: int, epsilon: float, lr: float) -> float:
    """Halves lr when the last `window` epochs brought no validation-loss
    improvement beyond epsilon and the current lr has been active for at
    least `window` epochs (a halving restarts the wait)."""
    losses = log.val_losses
    n = len(losses)
    if n < window or not log.learning_rates or log.learning_rates[-1] != lr:
        return lr
    run = 0
    for logged in reversed(log.learning_rates):
        if logged != lr:
            break
        run += 1
    if run < window:
        return lr
    for i in range(n - window, n):
        if i > 0 and losses[i] < min(losses[:i]) - epsilon:
            return lr  # an improvement event inside the window
    return lr / 2.0


def early_stop_check(log: TrainLog, patience: int) -> bool:
    """True when the last `patience` epochs set no new validation-loss best."""
    if patience < 1:
        raise ValueError(f"patience must be >= 1, got {patience}")
    losses = log.val_losses
    best_epoch = -1
    best = np.inf
    for i, loss in enumerate(losses):
        if loss < best:
            best = loss
            best_epoch = i
    return len(losses) - 1 - best_epoch >= patience


def _forward_in_chunks(weights, x, chunk=512):
    parts = [network.forward(weights, x[i:i + chunk])[0]
             for i in range(0, len(x), chunk)]
    return np.concatenate(parts, axis=0)


def train(spec: network.NetworkSpec, train_index: dataset.PatchIndex,
          val_index: dataset.PatchIndex, config: TrainConfig):
    """Trains one head; returns (best-validation-loss weights, TrainLog).

    Fully deterministic for a fixed config seed: initialization, batch
    composition, augmentation, and dropout all derive from it.
    """
    weights = network.build_network(spec, seed=[config.seed, 0])
    states = {name: neural.AdamState.for_param(weights.params[name])
              for name in network.trainable_names(spec)}
    val_x, val_y, _ = dataset.sample_eval_set(
        val_index, config.target, config.val_sample_size, [config.seed, 3])
    log = TrainLog()
    lr = config.learning_rate
    best_loss = np.inf
    best_weights = weights.clone()
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        epoch_loss = 0.0
        for b in range(config.batches_per_epoch):
            x, y = dataset.sample_minibatch(
                train_index, config.target, config.batch_size,
                [config.seed, 1, epoch, b])
            drop_rng = np.random.default_rng([config.seed, 2, epoch, b])
            probs, cache = network.forward(weights, x, phase="train",
                                           dropout_rng=drop_rng)
            loss, dscores = neural.cross_entropy(probs, y)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite training loss at epoch {epoch}, batch {b}", log)
            grads = network.backward(weights, cache, dscores)
            for name, grad in grads.items():
                weights.params[name], states[name] = neural.adam_step(
                    weights.params[name], grad, states[name], lr)
            weights.bump()
            epoch_loss += loss
        val_probs = _forward_in_chunks(weights, val_x)
        val_loss, _ = neural.cross_entropy(val_probs, val_y)
        val_acc = float((val_probs.argmax(1) == val_y.argmax(1)).mean())
        log.append(epoch, epoch_loss / config.batches_per_epoch, val_loss,
                   val_acc, lr, time.perf_counter() - t0)
        if val_loss < best_loss:
            best_loss = val_loss
            best_weights = weights.clone()
        if early_stop_check(log, config.early_stop_patience):
            break
        lr = plateau_lr_step(log, config.plateau_window,
                             config.plateau_epsilon, lr)
    return best_weights, log


# --------------------------------------------------------------- evaluation

@dataclass
class ClassErrorTable:
    """Per-class error percentages and balanced overall accuracy."""

    target: str
    errors: dict          # PatchClass -> percent wrong
    counts: dict          # PatchClass -> patches evaluated
    overall_accuracy: float  # percent, balanced across sides and classes

    def worst_class(self):
        return max(CLASS_ORDER, key=lambda cls: self.errors[cls])

    def render(self) -> str:
        cols = [cls.value for cls in CLASS_ORDER] + ["overall acc"]
        vals = [f"{self.errors[cls]:.2f}" for cls in CLASS_ORDER]
        vals.append(f"{self.overall_accuracy:.2f}")
        widths = [max(len(a), len(b)) for a, b in zip(cols, vals)]
        head = "  ".join(c.rjust(w) for c, w in zip(cols, widths))
        body = "  ".join(v.rjust(w) for v, w in zip(vals, widths))
        return f"{self.target} error rates (%)\n{head}\n{body}\n"


def evaluate_per_class(weights: network.NetworkWeights,
                       index: dataset.PatchIndex, target: str, seed: int = 0,
                       per_class_cap: int | None = None,
                       chunk: int = 512) -> ClassErrorTable:
    """Error rate per patch class plus balanced overall accuracy.

    Every indexed record is scored (optionally capped per class with a
    seeded subsample); overall accuracy averages the per-class accuracies
    with each side of the target weighted equally.
    """
    dataset._check_target(target)
    errors = {}
    counts = {}
    for cls in CLASS_ORDER:
        records = index.records_by_class[cls]
        if not records:
            raise ValueError(f"index has no {cls.value} records to evaluate")
        if per_class_cap is not None and len(records) > per_class_cap:
            rng = np.random.default_rng([seed, CLASS_ORDER.index(cls)])
            picks = rng.choice(len(records), per_class_cap, replace=False)
            records = [records[int(i)] for i in picks]
        want = dataset.target_label(cls, target)
        got = []
        for i in range(0, len(records), chunk):
            x = dataset.patches_for_records(index, records[i:i + chunk])
            got.append(_forward_in_chunks(weights, x, chunk).argmax(1))
        got = np.concatenate(got)
        errors[cls] = float((got != want).mean() * 100.0)
        counts[cls] = len(records)
    side_acc = []
    for side in (POSITIVE_CLASSES[target], NEGATIVE_CLASSES[target]):
        side_acc.append(float(np.mean([100.0 - errors[cls] for cls in side])))
    overall = float(np.mean(side_acc))
    return ClassErrorTable(target=target, errors=errors, counts=counts,
                           overall_accuracy=overall)
