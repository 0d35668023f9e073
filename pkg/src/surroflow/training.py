"""Losses, optimiser, scheduler and the two-stage training loop.

The surrogate emits three channels per sample: rescaled pressure, injected
saturation and a plume-membership probability. Training minimises a squared
distance over the two physical channels plus, in the second stage, a weighted
binary cross-entropy over the membership channel against the binarized
saturation. Each minibatch gets two optimiser updates: one on the distance
objective alone, then one on the combined objective evaluated after the first
update. Both objectives carry an L2 penalty on all parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, GeometryError


def binarize(s: np.ndarray, threshold: float = 1e-8) -> np.ndarray:
    """Plume indicator: 1.0 where saturation exceeds ``threshold``."""
    return (np.asarray(s) > threshold).astype(np.float64)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of per-sample squared error summed over channels and pixels.

    Returns the scalar loss and its gradient with respect to ``pred``.
    """
    if pred.shape != target.shape:
        raise GeometryError(f"shape mismatch: {pred.shape} vs {target.shape}")
    n = pred.shape[0]
    diff = pred - target
    flat = diff.ravel().astype(np.float64)
    loss = float(flat @ flat) / n
    grad = (2.0 / n) * diff
    return loss, grad


def bce_loss(
    pred: np.ndarray, target: np.ndarray, clamp: float = 1e-7
) -> tuple[float, np.ndarray]:
    """Batch mean of the per-pixel binary cross-entropy.

    Probabilities are clamped to ``[clamp, 1 - clamp]`` before the logarithms;
    the gradient uses the clamped value too, which bounds it by ``1/clamp``
    without zeroing it in the saturated region.
    """
    if pred.shape != target.shape:
        raise GeometryError(f"shape mismatch: {pred.shape} vs {target.shape}")
    p = np.clip(pred.astype(np.float64), clamp, 1.0 - clamp)
    t = target.astype(np.float64)
    loss = float(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean())
    scale = 1.0 / pred.size
    grad = (scale * (p - t) / (p * (1.0 - p))).astype(pred.dtype)
    return loss, grad


def metrics_r2_rmse(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """Coefficient of determination and root-mean-square error over a batch.

    Both use per-sample squared norms over all non-batch axes; R2 compares
    against the sample-mean field of ``target``.
    """
    if pred.shape != target.shape:
        raise GeometryError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.shape[0] == 0:
        raise DataError("metrics need at least one sample")
    p = pred.astype(np.float64)
    t = target.astype(np.float64)
    err = ((p - t) ** 2).sum(axis=tuple(range(1, p.ndim)))
    centre = t.mean(axis=0, keepdims=True)
    tot = ((t - centre) ** 2).sum(axis=tuple(range(1, p.ndim)))
    rmse = float(np.sqrt(err.mean()))
    tot_sum = float(tot.sum())
    if tot_sum == 0.0:
        r2 = 1.0 if float(err.sum()) == 0.0 else float("-inf")
    else:
        r2 = 1.0 - float(err.sum()) / tot_sum
    return r2, rmse


def mask_iou(pred_mask: np.ndarray, target_mask: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(target_mask, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


class Adam(object):
    """Adam with bias correction; moments live next to the parameter dict."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.value -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class PlateauScheduler:
    """Multiplies the learning rate by ``factor`` after ``patience`` stale epochs.

    An epoch is stale when the monitored value fails to improve on the best
    seen so far by more than ``min_delta``. The rate never increases and never
    drops below ``min_lr``.
    """

    lr: float
    factor: float = 0.1
    patience: int = 10
    min_delta: float = 1e-4
    min_lr: float = 1e-6
    best: float = float("inf")
    stale: int = 0

    def step(self, metric: float) -> float:
        if metric < self.best - self.min_delta:
            self.best = metric
            self.stale = 0
        else:
            self.stale += 1
            if self.stale > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.stale = 0
        return self.lr

    def state(self) -> dict:
        return {
            "lr": self.lr,
            "best": self.best,
            "stale": self.stale,
        }

    def load_state(self, state: dict) -> None:
        self.lr = state["lr"]
        self.best = state["best"]
        self.stale = state["stale"]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the optimisation loop."""

    epochs: int = 200
    batch_size: int = 100
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    bce_weight: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    scheduler_factor: float = 0.1
    scheduler_patience: int = 10
    scheduler_min_delta: float = 1e-4
    scheduler_min_lr: float = 1e-6

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise DataError("epochs and batch size must be positive")
        if not self.learning_rate > 0:
            raise DataError("learning rate must be positive")
        if self.weight_decay < 0 or self.bce_weight < 0:
            raise DataError("penalty weights must be non-negative")


@dataclass
class EpochStats:
    epoch: int
    train_rmse: float
    test_rmse: float
    mse: float
    weighted_bce: float
    lr: float


_TSV_COLUMNS = ("epoch", "train_rmse", "test_rmse", "mse", "weighted_bce", "lr")


@dataclass
class TrainRecord:
    """Per-epoch training log with a tab-separated on-disk form."""

    rows: list[EpochStats] = field(default_factory=list)

    def append(self, stats: EpochStats) -> None:
        self.rows.append(stats)

    @property
    def last(self) -> EpochStats:
        if not self.rows:
            raise DataError("training record is empty")
        return self.rows[-1]

    def to_tsv(self, path) -> None:
        lines = ["\t".join(_TSV_COLUMNS)]
        for r in self.rows:
            lines.append(
                "\t".join(
                    [
                        str(r.epoch),
                        repr(r.train_rmse),
                        repr(r.test_rmse),
                        repr(r.mse),
                        repr(r.weighted_bce),
                        repr(r.lr),
                    ]
                )
            )
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_tsv(cls, path) -> "TrainRecord":
        lines = Path(path).read_text().splitlines()
        if not lines or tuple(lines[0].split("\t")) != _TSV_COLUMNS:
            raise DataError(f"{path}: not a training record")
        rows = []
        for line in lines[1:]:
            parts = line.split("\t")
            if len(parts) != len(_TSV_COLUMNS):
                raise DataError(f"{path}: malformed row {line!r}")
            rows.append(
                EpochStats(
                    epoch=int(parts[0]),
                    train_rmse=float(parts[1]),
                    test_rmse=float(parts[2]),
                    mse=float(parts[3]),
                    weighted_bce=float(parts[4]),
                    lr=float(parts[5]),
                )
            )
        return cls(rows)


def minibatch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches covering all ``n`` records, last one possibly short."""
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Shuffling stream for one epoch, independent of training history."""
    return np.random.default_rng(np.random.SeedSequence((seed, 17, epoch)))


def predict(net, x: np.ndarray, t: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Evaluation-mode forward pass over a whole record set, in batches."""
    outs = []
    for i in range(0, x.shape[0], batch_size):
        outs.append(net.forward(x[i : i + batch_size], t[i : i + batch_size], train=False))
    return np.concatenate(outs, axis=0)


def _apply_weight_decay(params, weight_decay: float) -> None:
    if weight_decay == 0.0:
        return
    for p in params.values():
        p.grad += weight_decay * p.value


def _batch_grad(pred, yb, bce_weight, with_bce):
    """Distance gradient over the two physical fields, optionally plus the
    weighted membership term on the third channel. Without it the membership
    channel receives no gradient at all."""
    mse, g_mse = mse_loss(pred[:, :2], yb[:, :2])
    grad = np.zeros_like(pred)
    grad[:, :2] = g_mse
    bce = 0.0
    if with_bce:
        bce, g_bce = bce_loss(pred[:, 2:3], yb[:, 2:3])
        grad[:, 2:3] = bce_weight * g_bce
    return mse, bce, grad


def _check_arrays(arrays):
    x, t, y = arrays
    if x.shape[0] != t.shape[0] or x.shape[0] != y.shape[0]:
        raise DataError(
            f"record counts disagree: x={x.shape[0]} t={t.shape[0]} y={y.shape[0]}"
        )
    if x.shape[0] == 0:
        raise DataError("training needs at least one record")
    if y.shape[1] < 3:
        raise DataError(f"targets need 3 channels, got {y.shape[1]}")
    return x, t, y


def _train(
    net,
    train_arrays,
    config: TrainConfig,
    *,
    two_stage: bool,
    eval_arrays=None,
    adam: Adam | None = None,
    scheduler: PlateauScheduler | None = None,
    start_epoch: int = 0,
    epoch_hook=None,
) -> TrainRecord:
    x, t, y = _check_arrays(train_arrays)
    params = net.named_parameters()
    if adam is None:
        adam = Adam(params, lr=config.learning_rate, betas=config.betas)
    if scheduler is None:
        scheduler = PlateauScheduler(
            lr=config.learning_rate,
            factor=config.scheduler_factor,
            patience=config.scheduler_patience,
            min_delta=config.scheduler_min_delta,
            min_lr=config.scheduler_min_lr,
        )
    record = TrainRecord()
    for epoch in range(start_epoch, config.epochs):
        rng = epoch_rng(config.seed, epoch)
        mse_sum = 0.0
        bce_sum = 0.0
        count = 0
        for idx in minibatch_indices(x.shape[0], config.batch_size, rng):
            xb, tb, yb = x[idx], t[idx], y[idx]
            adam.lr = scheduler.lr

            pred = net.forward(xb, tb, train=True)
            mse, bce, grad = _batch_grad(pred, yb, config.bce_weight, False)
            net.zero_grads()
            net.backward(grad)
            _apply_weight_decay(params, config.weight_decay)
            adam.step()

            if two_stage:
                pred = net.forward(xb, tb, train=True)
                mse, bce, grad = _batch_grad(pred, yb, config.bce_weight, True)
                net.zero_grads()
                net.backward(grad)
                _apply_weight_decay(params, config.weight_decay)
                adam.step()

            mse_sum += mse * len(idx)
            bce_sum += bce * len(idx)
            count += len(idx)

        lr_used = scheduler.lr
        train_pred = predict(net, x, t)
        _, train_rmse = metrics_r2_rmse(train_pred[:, :2], y[:, :2])
        test_rmse = float("nan")
        if eval_arrays is not None:
            ex, et, ey = eval_arrays
            test_pred = predict(net, ex, et)
            _, test_rmse = metrics_r2_rmse(test_pred[:, :2], ey[:, :2])
        scheduler.step(train_rmse)
        stats = EpochStats(
            epoch=epoch,
            train_rmse=train_rmse,
            test_rmse=test_rmse,
            mse=mse_sum / count,
            weighted_bce=config.bce_weight * bce_sum / count,
            lr=lr_used,
        )
        record.append(stats)
        if epoch_hook is not None:
            epoch_hook(epoch, net, adam, scheduler, stats)
    return record


def train_two_stage(net, train_arrays, config: TrainConfig, **kwargs) -> TrainRecord:
    """Distance update then combined distance-plus-membership update per batch."""
    return _train(net, train_arrays, config, two_stage=True, **kwargs)


def mse_only_train(net, train_arrays, config: TrainConfig, **kwargs) -> TrainRecord:
    """Baseline: one update per batch on the physical fields alone.

    The membership channel is still produced by the network but receives no
    gradient, so its output is meaningless under this mode.
    """
    return _train(net, train_arrays, config, two_stage=False, **kwargs)
