"""Mini-batch training with early stopping, and the USD-scale metric suite."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .data import ArrayDataset
from .errors import TrainingError

PREDICT_CHUNK = 256


@dataclass
class TrainingConfig:
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    seed: int = 42
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    shuffle: bool = True

    def validate(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Metrics:
    rmse: float
    mae: float
    mape: float

    def as_dict(self):
        return {"rmse": self.rmse, "mae": self.mae, "mape": self.mape}

    @classmethod
    def from_dict(cls, d):
        return cls(rmse=float(d["rmse"]), mae=float(d["mae"]), mape=float(d["mape"]))


@dataclass
class EpochStat:
    epoch: int
    train_loss: float
    val_mae: float


@dataclass
class TrainReport:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    stopping_reason: str = ""

    @property
    def best_val_mae(self):
        return self.history[self.best_epoch].val_mae

    def to_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for stat in self.history:
                fh.write(json.dumps({
                    "epoch": stat.epoch,
                    "train_loss": stat.train_loss,
                    "val_mae": stat.val_mae,
                    "best": stat.epoch == self.best_epoch,
                }) + "\n")


def predict_in_chunks(model, x, images=None, chunk=PREDICT_CHUNK):
    outs = []
    for i in range(0, x.shape[0], chunk):
        img = None if images is None else images[i:i + chunk]
        outs.append(model.forward(x[i:i + chunk], img) if img is not None
                    else model.forward(x[i:i + chunk]))
    return np.concatenate(outs, axis=0)


def _usd_mae(model, ds: ArrayDataset) -> float:
    pred_z = predict_in_chunks(model, ds.x, ds.images).reshape(-1)
    pred_usd = model.schema.inverse_transform_price(pred_z)
    return float(np.mean(np.abs(ds.price - pred_usd)))


def train(model, train_ds: ArrayDataset, val_ds: ArrayDataset,
          config: TrainingConfig) -> TrainReport:
    """Adam on MSE in transformed target space, early-stopped on validation MAE.

    Keeps the best-so-far parameters (by validation MAE in USD) and restores
    them before returning. Batch order is reshuffled every epoch from a seed
    derived deterministically from (config.seed, epoch).
    """
    config.validate()
    if model.kind not in ("mlp", "fusion"):
        raise ValueError(f"train() handles mlp/fusion; got '{model.kind}' (use linreg_fit)")
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("train and validation splits must be non-empty")
    needs_images = model.kind == "fusion"
    if needs_images and (train_ds.images is None or val_ds.images is None):
        raise ValueError("fusion training requires image arrays in both splits")

    params = model.parameters()
    state = tc.AdamState.for_params(params, lr=config.lr, beta1=config.beta1,
                                    beta2=config.beta2, epsilon=config.epsilon)
    report = TrainReport()
    best_mae = math.inf
    best_params = [p.copy() for p in params]
    since_best = 0
    n = len(train_ds)

    for epoch in range(config.max_epochs):
        if config.shuffle:
            order = np.random.default_rng([config.seed, epoch]).permutation(n)
        else:
            order = np.arange(n)
        loss_sum = 0.0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb, yb = train_ds.x[idx], train_ds.y[idx]
            if needs_images:
                out = model.forward(xb, train_ds.images[idx])
            else:
                out = model.forward(xb)
            loss, dout = tc.mse_loss(out, yb)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch} batch {bi}")
            grads = model.backward(dout)
            tc.adam_step(params, grads, state)
            loss_sum += loss * len(idx)
        val_mae = _usd_mae(model, val_ds)
        report.history.append(EpochStat(epoch, loss_sum / n, val_mae))
        if val_mae < best_mae:
            best_mae = val_mae
            best_params = [p.copy() for p in params]
            report.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                report.stopping_reason = "early_stop"
                break
    if not report.stopping_reason:
        report.stopping_reason = "max_epochs"
    model.load_parameters(best_params)
    return report


def evaluate_metrics(model, ds: ArrayDataset) -> Metrics:
    """RMSE / MAE / MAPE in USD after inverting the target transform."""
    if len(ds) == 0:
        raise ValueError("evaluate_metrics: empty split")
    images = ds.images if model.kind == "fusion" else None
    pred_z = predict_in_chunks(model, ds.x, images).reshape(-1)
    pred_usd = model.schema.inverse_transform_price(pred_z)
    err = ds.price - pred_usd
    return Metrics(
        rmse=float(np.sqrt(np.mean(err ** 2))),
        mae=float(np.mean(np.abs(err))),
        mape=float(100.0 * np.mean(np.abs(err) / ds.price)),
    )


def compare_models(baseline: Metrics, challenger: Metrics) -> dict:
    """Per-metric relative reduction in percent; negative means worse."""
    out = {}
    for name in ("rmse", "mae", "mape"):
        b = getattr(baseline, name)
        c = getattr(challenger, name)
        if b <= 0:
            raise ValueError(f"compare_models: baseline {name} must be > 0, got {b}")
        out[name] = 100.0 * (b - c) / b
    return out
