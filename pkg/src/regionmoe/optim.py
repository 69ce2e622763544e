"""AdamW, seeded shuffling, early stopping and the mini-batch training loop.

Randomness comes from numpy's PCG64 generator seeded with integer tuples
(``np.random.default_rng([seed, stream, ...])``), so every stream is a fixed
function of the run seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, StratificationError
from .objectives import LossConfig

SHUFFLE_STREAM = 7
SPLIT_STREAM = 8


@dataclass
class AdamWState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    @classmethod
    def fresh(cls, params, **hyper) -> "AdamWState":
        arrays = [p for p, _ in params]
        return cls([np.zeros_like(p) for p in arrays], [np.zeros_like(p) for p in arrays], **hyper)


def adamw_step(params: list[tuple[np.ndarray, bool]], grads: list[np.ndarray], state: AdamWState):
    """One in-place AdamW update with decoupled decay on weight tensors only
    (``decay`` may also be a boolean mask with the tensor's shape).

    theta <- theta * (1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("parameter/gradient/state count", len(params), (len(grads), len(state.m)))
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    shrink = 1.0 - state.lr * state.weight_decay
    step_size = state.lr / c1
    root_c2 = np.sqrt(c2)
    for (theta, decay), g, m, v in zip(params, grads, state.m, state.v):
        if theta.shape != g.shape:
            raise DimensionError("gradient shape", theta.shape, g.shape)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        # lr * m_hat / (sqrt(v_hat) + eps), rearranged to reuse one temporary
        denom = np.sqrt(v)
        denom /= root_c2
        denom += state.eps
        np.divide(m, denom, out=denom)
        denom *= step_size
        if decay is True:
            theta *= shrink
        elif decay is not False:
            theta *= np.where(decay, shrink, 1.0)
        theta -= denom
    return params, state


def seeded_shuffle(indices, seed: int, epoch: int) -> np.ndarray:
    indices = np.asarray(indices)
    rng = np.random.default_rng([seed, SHUFFLE_STREAM, epoch])
    return indices[rng.permutation(len(indices))]


@dataclass
class TrainConfig:
    max_epochs: int = 40
    patience: int = 10
    batch_size: int = 64
    val_fraction: float = 0.1
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.max_epochs < 0 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("max_epochs >= 0, patience >= 1 and batch_size >= 1 required")
        if self.patience > max(self.max_epochs, 1) and self.max_epochs > 0:
            raise ValueError("patience must not exceed max_epochs")


@dataclass
class TrainTrace:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                w.writerow([i, repr(tr), repr(va)])


class EarlyStopping:
    """Tracks the best (strictly lowest) validation loss; epochs count from 1."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


def stratified_split(y, val_fraction: float, seed: int, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class seeded holdout of round(val_fraction * n_c) rows."""
    y = np.asarray(y)
    rng = np.random.default_rng([seed, SPLIT_STREAM])
    train, val = [], []
    for c in range(num_classes):
        members = rng.permutation(np.flatnonzero(y == c))
        n_val = int(round(val_fraction * len(members)))
        if len(members) - n_val < 1:
            raise StratificationError(
                f"class {c} has no inner-training rows ({len(members)} in fold); use a larger fold or smaller val_fraction"
            )
        val.append(members[:n_val])
        train.append(members[n_val:])
    val_idx = np.sort(np.concatenate(val))
    if val_idx.size == 0:
        raise StratificationError("validation split is empty; increase val_fraction or data size")
    return np.sort(np.concatenate(train)), val_idx


def train(model, X, avail, y, cfg: TrainConfig, loss_cfg: LossConfig, num_classes: int):
    """Train ``model`` in place; returns (model, trace) with best-epoch weights restored.

    ``model`` must provide ``parameters()`` and ``loss_and_grads(X, avail, y, loss_cfg,
    class_weights, need_grads)``.
    """
    trace = TrainTrace()
    if cfg.max_epochs == 0:
        return model, trace
    y = np.asarray(y)
    tr, va = stratified_split(y, cfg.val_fraction, cfg.seed, num_classes)
    weights = loss_cfg.weights_for(y[tr], num_classes)
    params = model.parameters()
    state = AdamWState.fresh(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    stopper = EarlyStopping(cfg.patience)
    best = [p.copy() for p, _ in params]

    for epoch in range(1, cfg.max_epochs + 1):
        order = seeded_shuffle(tr, cfg.seed, epoch)
        running = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = model.loss_and_grads(X[idx], avail[idx], y[idx], loss_cfg, weights)
            adamw_step(params, grads, state)
            running += loss.total * len(idx)
        val_loss, _ = model.loss_and_grads(X[va], avail[va], y[va], loss_cfg, weights, need_grads=False)
        trace.train_loss.append(running / len(order))
        trace.val_loss.append(val_loss.total)
        improved, stop = stopper.update(epoch, val_loss.total)
        if improved:
            best = [p.copy() for p, _ in params]
        trace.stopped_epoch = epoch
        if stop:
            break

    for (p, _), saved in zip(params, best):
        p[...] = saved
    trace.best_epoch = stopper.best_epoch
    return model, trace
