from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .evaluation import evaluate
from .mesh_io import DatasetRecord
from .model import MeshNet
from .optim import SGD, multistep_lr
from .preprocess import jitter_face_set, stack

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, lr: float, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch} (lr={lr:g})")
        self.epoch = epoch
        self.batch = batch
        self.lr = lr


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_milestones: tuple[int, ...] = (30, 60)
    seed: int = 0
    jitter_sigma: float = 0.01

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0 or self.jitter_sigma < 0:
            raise ValueError("epochs and jitter_sigma must be non-negative")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def train_epoch(model: MeshNet, records: Sequence[DatasetRecord], config: TrainConfig,
                optimizer: SGD, epoch: int) -> tuple[float, float]:
    """One pass over ``records`` in seeded random order; returns (loss, accuracy)."""
    rng = epoch_rng(config.seed, epoch)
    order = rng.permutation(len(records))
    total_loss = 0.0
    correct = 0
    for b, start in enumerate(range(0, len(order), config.batch_size)):
        chunk = [records[i] for i in order[start:start + config.batch_size]]
        sets = [jitter_face_set(r.face_set, config.jitter_sigma, rng) for r in chunk]
        labels = np.array([r.label for r in chunk])
        logits, _ = model.forward(stack(sets), training=True, rng=rng)
        loss = T.softmax_cross_entropy(logits, labels)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(epoch, b, optimizer.lr, value)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        total_loss += value * len(chunk)
        correct += int((logits.data.argmax(axis=1) == labels).sum())
    return total_loss / len(records), correct / len(records)


def train(
    train_records: Sequence[DatasetRecord],
    config: TrainConfig,
    model: MeshNet,
    test_records: Sequence[DatasetRecord] | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    on_epoch: Callable[[int, dict], bool | None] | None = None,
) -> list[dict]:
    """Train ``model`` in place with SGD; returns the per-epoch log records.

    Each epoch appends one JSON line per split to ``log_path``. With a
    ``checkpoint_dir``, ``best.mnck`` tracks the best test accuracy and
    ``last.mnck`` is written at the end. ``on_epoch`` may return True to stop
    early.
    """
    config.validate()
    if not train_records:
        raise ValueError("empty training set")
    ncls = model.config.num_classes
    if any(not 0 <= r.label < ncls for r in train_records):
        raise ValueError(f"labels must lie in [0, {ncls})")
    if len({r.face_set.F for r in train_records}) != 1:
        raise ValueError("training records must share one face budget")

    optimizer = SGD(model.params, config.lr, config.momentum, config.weight_decay)
    ckpt = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt:
        ckpt.mkdir(parents=True, exist_ok=True)
    logf = open(log_path, "a") if log_path else None
    history: list[dict] = []
    best = -1.0
    try:
        for epoch in range(config.epochs):
            optimizer.lr = multistep_lr(config.lr, epoch, config.lr_milestones)
            t0 = time.perf_counter()
            loss, acc = train_epoch(model, train_records, config, optimizer, epoch)
            rows = [dict(epoch=epoch, split="train", loss=loss, accuracy=acc, lr=optimizer.lr,
                         wall_ms=round(1000 * (time.perf_counter() - t0), 3))]
            if test_records:
                t1 = time.perf_counter()
                rep = evaluate(test_records, model)
                rows.append(dict(epoch=epoch, split="test", loss=rep.loss, accuracy=rep.overall_accuracy,
                                 lr=optimizer.lr, wall_ms=round(1000 * (time.perf_counter() - t1), 3)))
                if ckpt and rep.overall_accuracy > best:
                    best = rep.overall_accuracy
                    save_checkpoint(ckpt / "best.mnck", model, optimizer, epoch=epoch, accuracy=best)
            for row in rows:
                history.append(row)
                log.info("epoch %d %s loss=%.4f acc=%.4f", epoch, row["split"], row["loss"], row["accuracy"])
                if logf:
                    logf.write(json.dumps(row) + "\n")
                    logf.flush()
            if on_epoch is not None and on_epoch(epoch, rows[-1]):
                break
        if ckpt:
            save_checkpoint(ckpt / "last.mnck", model, optimizer, epoch=len(history) and history[-1]["epoch"])
    finally:
        if logf:
            logf.close()
    return history
