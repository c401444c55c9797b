"""Adam, the warmup + cosine schedule, and the k-fold training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FoldMismatch, NonFiniteLoss, SingleClass, SingleClassFold
from ..metrics import auc_mann_whitney
from ..volume import draw_rotation, rotate_channels
from .model import MBConvNet, NetworkConfig, NetworkParams

log = logging.getLogger(__name__)

SELECTION_RULES = ("best_val_auc", "last")


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 500
    batch_size: int = 8
    lr_max: float = 0.0005
    warmup_epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    aug_max_angle: float = 0.2
    aug_prob: float = 0.3
    seed: int = 0
    selection: str = "best_val_auc"
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs)")
        if not self.lr_max > 0:
            raise ValueError("lr_max must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two items)")
        if self.selection not in SELECTION_RULES:
            raise ValueError(f"selection must be one of {SELECTION_RULES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at_epoch(cfg: TrainingConfig, epoch: int) -> float:
    """Linear warmup from 0 to ``lr_max``, then half-cosine decay toward 0."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    w, E = cfg.warmup_epochs, cfg.epochs
    if epoch < w:
        return cfg.lr_max * epoch / w
    return max(0.0, cfg.lr_max * (1.0 + math.cos(math.pi * (epoch - w) / (E - w))) / 2.0)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update, applied in place to ``params``.

    Tensors without a gradient entry are left alone.
    """
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name], dtype=np.float64)
            state.v[name] = np.zeros_like(params[name], dtype=np.float64)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[name] = params[name] - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


@dataclass
class EpochRecord:
    fold: int
    epoch: int
    lr: float
    train_loss: float
    val_auc: float


@dataclass
class TrainResult:
    checkpoints: list
    selected_epochs: list
    val_scores: np.ndarray | None      # (k, n_val) on the shared validation set
    oof_scores: np.ndarray             # (n_train,) from the fold that held each exam out
    test_scores: np.ndarray | None     # (k, n_test)
    log: list


def _safe_auc(scores, labels) -> float:
    try:
        return auc_mann_whitney(scores, labels)
    except SingleClass:
        return float("nan")


def _batches(order: np.ndarray, batch_size: int):
    """Split ``order`` into batches; a trailing singleton joins the previous batch."""
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def _augment(x: np.ndarray, rng: np.random.Generator, cfg: TrainingConfig) -> np.ndarray:
    out = np.empty_like(x)
    for i in range(len(x)):
        angles, _ = draw_rotation(rng, cfg.aug_max_angle, cfg.aug_prob)
        out[i] = rotate_channels(x[i], angles)
    return out


def train_fold(net: MBConvNet, x_tr, y_tr, x_sel, y_sel, cfg: TrainingConfig, fold: int,
               rng: np.random.Generator, epoch_log: list) -> tuple[NetworkParams, int]:
    """Train one model; returns the selected parameters and the epoch they came from."""
    params = net.init_params(int(rng.integers(2 ** 31)))
    state = AdamState()
    best, best_auc, best_epoch = None, -np.inf, -1
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        losses = []
        for idx in _batches(rng.permutation(len(x_tr)), cfg.batch_size):
            xb = _augment(x_tr[idx], rng, cfg) if cfg.aug_prob > 0 else x_tr[idx]
            loss, grads, _ = net.loss_and_grads(params, xb, y_tr[idx])
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"fold {fold} epoch {epoch}: loss {loss} (lr {lr:.3g})")
            adam_step(params.tensors, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            losses.append(loss * len(idx))
        train_loss = float(np.sum(losses) / len(x_tr))
        val_auc = float("nan")
        if x_sel is not None and cfg.selection == "best_val_auc":
            val_auc = _safe_auc(net.predict(params, x_sel), y_sel)
        epoch_log.append(EpochRecord(fold, epoch, lr, train_loss, val_auc))
        log.debug("fold %d epoch %d lr %.2e loss %.4f val_auc %.4f", fold, epoch, lr, train_loss, val_auc)
        if not np.isnan(val_auc) and val_auc > best_auc:
            best, best_auc, best_epoch = params.copy(), val_auc, epoch
    if best is None:
        # rule "last", or no epoch had a defined validation AUC
        return params.copy(), cfg.epochs - 1
    return best, best_epoch


def train(x_train, y_train, folds, net_cfg: NetworkConfig, train_cfg: TrainingConfig,
          x_val=None, y_val=None, x_test=None) -> TrainResult:
    """k-fold training: fold ``k``'s model trains on every exam with ``folds != k``.

    Checkpoints are selected on the shared validation set ``(x_val, y_val)``
    when given, else on the held-out fold.  Inputs are ``(N, C, X, Y, Z)``.
    """
    dt = np.dtype(train_cfg.dtype)
    x_train = np.asarray(x_train, dtype=dt)
    y_train = np.asarray(y_train, dtype=np.float64)
    folds = np.asarray(folds)
    fold_ids = sorted(set(folds.tolist()))
    net = MBConvNet(net_cfg)
    x_val = None if x_val is None else np.asarray(x_val, dtype=dt)
    y_val = None if y_val is None else np.asarray(y_val, dtype=np.float64)
    x_test = None if x_test is None else np.asarray(x_test, dtype=dt)

    checkpoints, epochs, epoch_log = [], [], []
    oof = np.full(len(x_train), np.nan)
    val_scores, test_scores = [], []
    for k in fold_ids:
        tr, ho = folds != k, folds == k
        if len(np.unique(y_train[tr])) < 2 or len(np.unique(y_train[ho])) < 2:
            raise SingleClassFold(f"fold {k} has a single class in its training or held-out part")
        rng = np.random.default_rng([train_cfg.seed, k])
        x_sel, y_sel = (x_val, y_val) if x_val is not None else (x_train[ho], y_train[ho])
        params, best_epoch = train_fold(net, x_train[tr], y_train[tr], x_sel, y_sel, train_cfg, k, rng, epoch_log)
        log.info("fold %d: selected epoch %d", k, best_epoch)
        checkpoints.append(params)
        epochs.append(best_epoch)
        oof[ho] = net.predict(params, x_train[ho])
        if x_val is not None:
            val_scores.append(net.predict(params, x_val))
        if x_test is not None:
            test_scores.append(net.predict(params, x_test))
    return TrainResult(checkpoints, epochs, np.array(val_scores) if val_scores else None, oof,
                       np.array(test_scores) if test_scores else None, epoch_log)


def aggregate_fold_scores(fold_scores, mode: str = "mean", exam_ids=None) -> np.ndarray:
    """Combine per-fold scores of one exam set.

    ``mean`` averages the folds per exam; ``pooled`` keeps every fold's
    prediction as its own observation (fold-major, length ``k * n``).
    ``exam_ids``, if given, is one id sequence per fold and must agree.
    """
    rows = [np.asarray(s, dtype=np.float64) for s in fold_scores]
    if not rows:
        raise FoldMismatch("no fold scores given")
    if len({r.shape for r in rows}) != 1 or rows[0].ndim != 1:
        raise FoldMismatch("folds scored different numbers of exams")
    if exam_ids is not None:
        ids = [list(e) for e in exam_ids]
        if len(ids) != len(rows) or any(e != ids[0] for e in ids):
            raise FoldMismatch("folds scored different exam sets")
    arr = np.stack(rows)
    if mode == "mean":
        return arr.mean(axis=0)
    if mode == "pooled":
        return arr.reshape(-1)
    raise ValueError(f"unknown aggregation mode {mode!r}")


def write_epoch_log(records, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "epoch", "lr", "train_loss", "val_auc"])
        for r in records:
            w.writerow([r.fold, r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_auc)])
    return path
