"""Training and evaluation loops.

One optimizer step per batch: forward on a fresh tape, backward, Adam
update.  Per-epoch metrics are appended to a tab-separated log whose
columns are epoch, train_loss, L_c, L_triplet, eval_acc, eval_macro_f1.
The best state by eval macro-F1 is kept for checkpointing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .metrics import EvalReport, confusion_matrix, report_from_confusion
from .model import Model, PreparedInstance
from .tensor import Tape


class NumericError(RuntimeError):
    """Loss became non-finite (divergence)."""


class Adam:
    """Adam with bias correction; betas and eps use conventional defaults."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p._grad
            if g is None:
                continue
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    class_loss: float
    triplet_loss: float
    eval_accuracy: float
    eval_macro_f1: float

    def log_line(self) -> str:
        return "\t".join(
            [
                str(self.epoch),
                f"{self.train_loss:.10g}",
                f"{self.class_loss:.10g}",
                f"{self.triplet_loss:.10g}",
                f"{self.eval_accuracy:.10g}",
                f"{self.eval_macro_f1:.10g}",
            ]
        )


@dataclass
class BatchRecord:
    epoch: int
    batch: int
    total: float
    class_loss: float
    triplet_loss: float


@dataclass
class TrainResult:
    model: Model
    epochs: list
    batch_records: list
    best_state: dict
    best_epoch: int
    best_macro_f1: float
    final_train_accuracy: float = 0.0

    @property
    def metrics_log(self) -> str:
        return "".join(m.log_line() + "\n" for m in self.epochs)


def evaluate_prepared(model: Model, preps) -> EvalReport:
    if not preps:
        raise ValueError("evaluate on empty dataset")
    gold = [p.gold for p in preps]
    pred = [model.predict(p) for p in preps]
    return report_from_confusion(confusion_matrix(gold, pred))


def evaluate(model: Model, instances) -> EvalReport:
    """Dropout-free evaluation; order of instances does not affect the report."""
    return evaluate_prepared(model, [model.prepare(i) for i in instances])


def train_model(train_instances, config: TrainConfig, eval_instances=None,
                progress=None) -> TrainResult:
    """Full training run; deterministic given config.seed and the data.

    The eval split defaults to the training split.  Raises NumericError when
    the loss stops being finite.
    """
    if not train_instances:
        raise ValueError("train on empty dataset")
    model = Model(config)
    preps = [model.prepare(inst) for inst in train_instances]
    eval_preps = (
        [model.prepare(inst) for inst in eval_instances] if eval_instances else preps
    )
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xD07]))
    optimizer = Adam(model.parameters(), lr=config.lr)

    epochs = []
    batch_records = []
    best_state = model.state_dict()
    best_epoch = -1
    best_f1 = -1.0
    n = len(preps)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        seen = 0
        loss_sum = lc_sum = lt_sum = 0.0
        for batch_idx, start in enumerate(range(0, n, config.batch_size)):
            batch = [preps[i] for i in order[start : start + config.batch_size]]
            with Tape() as tape:
                total, lc, lt = model.batch_loss(batch, train=True, rng=rng)
            total_v, lc_v, lt_v = total.item(), lc.item(), lt.item()
            if not np.isfinite(total_v):
                raise NumericError(
                    f"loss diverged at epoch {epoch} batch {batch_idx}: {total_v}"
                )
            tape.backward(total)
            optimizer.step()
            optimizer.zero_grad()
            batch_records.append(
                BatchRecord(epoch=epoch, batch=batch_idx, total=total_v,
                            class_loss=lc_v, triplet_loss=lt_v)
            )
            loss_sum += total_v * len(batch)
            lc_sum += lc_v * len(batch)
            lt_sum += lt_v * len(batch)
            seen += len(batch)
        report = evaluate_prepared(model, eval_preps)
        metrics = EpochMetrics(
            epoch=epoch,
            train_loss=loss_sum / seen,
            class_loss=lc_sum / seen,
            triplet_loss=lt_sum / seen,
            eval_accuracy=report.accuracy,
            eval_macro_f1=report.macro_f1,
        )
        epochs.append(metrics)
        if progress is not None:
            progress(metrics)
        if report.macro_f1 > best_f1:
            best_f1 = report.macro_f1
            best_epoch = epoch
            best_state = model.state_dict()
    train_report = evaluate_prepared(model, preps)
    return TrainResult(
        model=model,
        epochs=epochs,
        batch_records=batch_records,
        best_state=best_state,
        best_epoch=best_epoch,
        best_macro_f1=best_f1,
        final_train_accuracy=train_report.accuracy,
    )
