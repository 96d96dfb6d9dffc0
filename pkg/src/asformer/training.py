"""Losses, Adam, and the per-sequence training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .model import ASFormer, ModelConfig, StagePredictions
from .tensor import Tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
LOG_HEADER = ("epoch", "total_loss", "cls_loss", "smo_loss", "train_acc")


class DataError(ValueError):
    """Training data is inconsistent with itself or with the model."""


def classification_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-probability of the true class, probabilities floored at 1e-12."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DataError(f"{labels.shape[0]} labels for {n} frames")
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        raise DataError(f"label {labels[bad[0]]} at frame {bad[0]} outside [0, {c})")
    logp = tn.select(tn.log_softmax(logits), labels)
    return tn.scale(tn.mean(tn.clamp_min(logp, float(np.log(PROB_FLOOR)))), -1.0)


def smoothing_loss(logits: Tensor) -> Tensor:
    """Squared change of class probabilities between adjacent frames, divided by T*C."""
    n, c = logits.shape
    diff = tn.temporal_diff(tn.softmax(logits))
    return tn.scale(tn.total(tn.square(diff)), 1.0 / (n * c))


@dataclass
class LossBreakdown:
    cls: list[float]
    smo: list[float]
    total: float
    tensor: Tensor | None = field(default=None, repr=False)

    @property
    def cls_sum(self) -> float:
        return float(sum(self.cls))

    @property
    def smo_sum(self) -> float:
        return float(sum(self.smo))


def total_loss(stages: StagePredictions | Sequence[Tensor], labels, smooth_weight: float = 0.25) -> LossBreakdown:
    logits = stages.logits if isinstance(stages, StagePredictions) else list(stages)
    cls_terms, smo_terms, parts = [], [], []
    for z in logits:
        lc = classification_loss(z, labels)
        ls = smoothing_loss(z)
        cls_terms.append(lc.item())
        smo_terms.append(ls.item())
        parts.append(tn.add(lc, tn.scale(ls, smooth_weight)))
    out = parts[0]
    for p in parts[1:]:
        out = tn.add(out, p)
    return LossBreakdown(cls_terms, smo_terms, out.item(), out)


@dataclass
class OptimizerState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: ModelConfig) -> "OptimizerState":
        return cls(config.learning_rate, config.beta1, config.beta2, config.adam_eps)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """One bias-corrected Adam update, in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise RuntimeError(f"gradient {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if not g.any():
            # the update is driven only by stale moments; a zero gradient leaves
            # the parameter untouched
            continue
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class EpochRecord:
    epoch: int
    total_loss: float
    cls_loss: float
    smo_loss: float
    train_acc: float

    def row(self) -> tuple:
        return (self.epoch, self.total_loss, self.cls_loss, self.smo_loss, self.train_acc)


def check_dataset(dataset, config: ModelConfig) -> None:
    if not dataset:
        raise DataError("dataset is empty")
    for i, (features, labels) in enumerate(dataset):
        features = np.asarray(features)
        labels = np.asarray(labels)
        if features.ndim != 2 or features.shape[0] == 0:
            raise DataError(f"sequence {i}: features must be a non-empty T x D matrix")
        if features.shape[1] != config.feature_dim:
            raise DataError(
                f"sequence {i}: feature dim {features.shape[1]} != model feature dim {config.feature_dim}"
            )
        if labels.shape != (features.shape[0],):
            raise DataError(f"sequence {i}: {labels.size} labels for {features.shape[0]} frames")
        if labels.min() < 0 or labels.max() >= config.num_classes:
            raise DataError(f"sequence {i}: labels outside [0, {config.num_classes})")


def fit(
    dataset: Sequence[tuple[np.ndarray, np.ndarray]],
    config: ModelConfig,
    rng: np.random.Generator | int = 0,
    model: ASFormer | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[ASFormer, list[EpochRecord]]:
    """Train with batch size 1 for ``config.epochs`` epochs; returns final weights and log."""
    check_dataset(dataset, config)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    init_rng, shuffle_rng, dropout_rng = rng.spawn(3)
    if model is None:
        model = ASFormer(config, init_rng)
    params = model.parameters()
    state = OptimizerState.from_config(config)
    history: list[EpochRecord] = []
    tape = tn.current_tape()
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(dataset))
        sums = np.zeros(3)
        correct = frames = 0
        for idx in order:
            features, labels = dataset[idx]
            labels = np.asarray(labels, dtype=np.int64)
            tape.clear()
            model.zero_grad()
            stages = model.forward(Tensor(np.asarray(features, dtype=tn.DEFAULT_DTYPE)), True, dropout_rng)
            losses = total_loss(stages, labels, config.smooth_weight)
            tn.backward(losses.tensor, tape)
            adam_step(params, {k: p.grad for k, p in params.items()}, state)
            sums += (losses.total, losses.cls_sum, losses.smo_sum)
            correct += int((stages.labels() == labels).sum())
            frames += labels.size
        sums /= len(dataset)
        record = EpochRecord(epoch, *map(float, sums), 100.0 * correct / frames)
        history.append(record)
        log.info("epoch %d loss %.4f acc %.2f", epoch, record.total_loss, record.train_acc)
        if on_epoch is not None:
            on_epoch(record)
    return model, history


def write_log(path: str | Path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for rec in history:
            writer.writerow([rec.epoch] + [repr(float(v)) for v in rec.row()[1:]])


def read_log(path: str | Path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LOG_HEADER:
            raise DataError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            EpochRecord(int(r["epoch"]), float(r["total_loss"]), float(r["cls_loss"]),
                        float(r["smo_loss"]), float(r["train_acc"]))
            for r in reader
        ]
