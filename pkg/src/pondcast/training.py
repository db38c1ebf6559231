"""Adam training with temporal validation split, early stopping and LR search."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .datapipe import STEP, WindowSet
from .nn.optim import AdamState, adam_step
from .nn.tensor import Tape, backward

log = logging.getLogger(__name__)

LR_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_grid: tuple = LR_GRID
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    min_delta: float = 0.0
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.lr_grid = tuple(float(x) for x in self.lr_grid)
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("validation fraction must be in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch size must be >= 1 and max epochs >= 0")
        if not self.lr_grid:
            raise ValueError("learning-rate grid is empty")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_grid"] = list(self.lr_grid)
        return d


@dataclass
class TrainResult:
    history: list = field(default_factory=list)  # (train_loss, val_loss) per epoch
    best_epoch: int = -1
    best_val: float = float("inf")
    stopped_early: bool = False
    diverged: bool = False
    lr: float = 0.0


def temporal_split(data: WindowSet, val_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (train, val): the latest ``val_fraction`` of each sensor's
    windows validate, and training windows that share any sample with a
    validation window are purged."""
    train_idx, val_idx = [], []
    in_len = data.history.shape[1]
    out_len = data.target.shape[1]
    for sensor in sorted(set(data.sensor.tolist())):
        idx = np.flatnonzero(data.sensor == sensor)
        idx = idx[np.argsort(data.end_time[idx], kind="stable")]
        n_val = int(round(val_fraction * len(idx)))
        if n_val == 0 or n_val == len(idx):
            train_idx.append(idx)
            continue
        val = idx[len(idx) - n_val:]
        first_val_start = data.end_time[val[0]] - (in_len - 1) * STEP
        cand = idx[:len(idx) - n_val]
        keep = data.end_time[cand] + out_len * STEP < first_val_start
        train_idx.append(cand[keep])
        val_idx.append(val)
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0, dtype=int)  # noqa: E731
    return cat(train_idx), cat(val_idx)


def _batches(n: int, size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for a in range(0, n, size):
        yield order[a:a + size]


def mean_loss(model, data: WindowSet, idx: np.ndarray, batch_size: int = 256) -> float:
    """Average per-window loss without recording a tape."""
    total = 0.0
    for b in _batches(len(idx), batch_size, None):
        sel = idx[b]
        exo = None if data.exo is None else data.exo[sel]
        total += model.loss(data.history[sel], exo, data.target[sel]).item() * len(sel)
    return total / max(len(idx), 1)


def train(model, data: WindowSet, config: TrainConfig, lr: float | None = None) -> TrainResult:
    """Fit ``model`` in place and leave it holding its best-validation weights.

    ``model`` needs ``params`` (a ParamSet) and ``loss(history, exo, target)``.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    lr = config.lr if lr is None else lr
    tr_idx, val_idx = temporal_split(data, config.val_fraction)
    if len(tr_idx) == 0:
        tr_idx, val_idx = np.arange(len(data)), np.zeros(0, dtype=int)
    monitor = val_idx if len(val_idx) else tr_idx
    rng = np.random.default_rng(config.seed)
    state = AdamState(lr=lr)
    result = TrainResult(lr=lr)
    best = model.params.state_dict()
    wait = 0
    for epoch in range(config.max_epochs):
        losses = []
        for b in _batches(len(tr_idx), config.batch_size, rng):
            sel = tr_idx[b]
            exo = None if data.exo is None else data.exo[sel]
            with Tape() as tape:
                loss = model.loss(data.history[sel], exo, data.target[sel])
            value = loss.item()
            if not np.isfinite(value):
                result.diverged = True
                break
            grads = backward(tape, loss, model.params)
            if not all(np.isfinite(g.data).all() for g in grads.values()):
                result.diverged = True
                break
            adam_step(model.params, grads, state)
            losses.append(value)
        if result.diverged:
            log.warning("non-finite loss at epoch %d (lr=%g); keeping the last finite checkpoint", epoch, lr)
            break
        val = mean_loss(model, data, monitor)
        if not np.isfinite(val):
            result.diverged = True
            break
        result.history.append((float(np.mean(losses)) if losses else float("nan"), val))
        if val < result.best_val - config.min_delta:
            result.best_val, result.best_epoch, wait = val, epoch, 0
            best = model.params.state_dict()
        else:
            wait += 1
            if wait >= config.patience:
                result.stopped_early = True
                break
    model.params.load_state_dict(best)
    return result


def select_lr(grid, losses) -> int:
    """Index of the smallest finite loss; ties go to the smaller learning rate."""
    order = np.argsort(np.asarray(grid, dtype=float), kind="stable")
    best = None
    for i in order:
        if np.isfinite(losses[i]) and (best is None or losses[i] < losses[best]):
            best = int(i)
    if best is None:
        raise RuntimeError("every learning rate diverged")
    return best


def lr_search(factory, data: WindowSet, config: TrainConfig, grid=None):
    """Train ``factory(seed)`` once per grid point; returns ``(best_lr, {lr: val_loss}, model)``."""
    grid = tuple(config.lr_grid if grid is None else grid)
    if not grid:
        raise ValueError("learning-rate grid is empty")
    losses, models = [], []
    for lr in grid:
        model = factory(config.seed)
        res = train(model, data, config, lr=lr)
        losses.append(float("inf") if res.diverged and not np.isfinite(res.best_val) else res.best_val)
        models.append(model)
    best = select_lr(grid, losses)
    return grid[best], dict(zip(grid, losses)), models[best]
