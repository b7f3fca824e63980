"""Training loop for the reconstruction autoencoder."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInputError
from . import tensorops as T
from .layers import Autoencoder, build_autoencoder, patches_to_batch

log = logging.getLogger("stainscope.train")


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_epochs: int = 100
    patience: int = 5
    val_fraction: float = 0.1
    negative_slope: float = 0.01
    seed: int = 0


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainingLog:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "best"])
            for row in self.epochs:
                writer.writerow([
                    row.epoch,
                    f"{row.train_loss:.8e}",
                    f"{row.val_loss:.8e}",
                    int(row.epoch == self.best_epoch),
                ])


class Adam:
    """Adam over a model's named parameters, one moment pair per array."""

    def __init__(self, model: Autoencoder, config: TrainConfig):
        self.model = model
        self.config = config
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p in model.named_params()}
        self.v = {name: np.zeros_like(p) for name, p in model.named_params()}

    def step(self) -> None:
        self.t += 1
        cfg = self.config
        grads = dict(self.model.named_grads())
        for name, param in self.model.named_params():
            grad = grads[name]
            if grad is None:
                raise InvalidInputError(f"no gradient for parameter {name}")
            T.adam_update(
                param,
                grad,
                self.m[name],
                self.v[name],
                self.t,
                lr=cfg.learning_rate,
                beta1=cfg.beta1,
                beta2=cfg.beta2,
                eps=cfg.adam_epsilon,
            )


def _epoch_loss(model: Autoencoder, batch_iter) -> float:
    # Weighted by batch size so ragged final batches do not skew the mean.
    total, count = 0.0, 0
    for xb in batch_iter:
        out = model.forward(xb, training=False)
        loss, _ = T.mse_loss(out, xb)
        total += loss * xb.shape[0]
        count += xb.shape[0]
    return total / count


def _batches(data: np.ndarray, order: np.ndarray, batch_size: int):
    for i in range(0, order.size, batch_size):
        yield np.ascontiguousarray(data[order[i : i + batch_size]])


def train_autoencoder(
    patches,
    config: TrainConfig | None = None,
    model: Autoencoder | None = None,
) -> tuple[Autoencoder, TrainingLog]:
    """Train an autoencoder to reconstruct the given healthy patches.

    Parameters
    ----------
    patches : sequence
        uint8 HWC patch images (or anything :func:`patches_to_batch` accepts).
    config : TrainConfig
        Optimization settings; defaults are used when omitted.
    model : Autoencoder, optional
        Start from this model instead of a freshly initialized one.

    Returns
    -------
    (model, TrainingLog)
        The model carries the weights of the best validation epoch; the log
        has one entry per completed epoch.

    Notes
    -----
    The patch set is shuffled once with the configured seed and split into
    validation (first ``val_fraction`` share, at least one patch) and
    training parts.  Training stops early when the validation loss has not
    improved for ``patience`` consecutive epochs.
    """
    config = config or TrainConfig()
    data = patches_to_batch(patches)
    n = data.shape[0]
    if n < 2:
        raise InvalidInputError(f"need at least 2 patches to train, got {n}")
    if not 0.0 < config.val_fraction < 1.0:
        raise InvalidInputError("val_fraction must lie in (0, 1)")

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    n_val = min(max(1, round(config.val_fraction * n)), n - 1)
    val_idx = perm[:n_val]
    train_idx = perm[n_val:]

    if model is None:
        model = build_autoencoder(seed=config.seed, negative_slope=config.negative_slope)
    optimizer = Adam(model, config)
    tlog = TrainingLog()
    best_state = model.snapshot()
    stale = 0

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.monotonic()
        order = train_idx[rng.permutation(train_idx.size)]
        run_total, run_count = 0.0, 0
        for xb in _batches(data, order, config.batch_size):
            out = model.forward(xb, training=True)
            loss, dout = T.mse_loss(out, xb)
            model.backward(dout)
            optimizer.step()
            run_total += loss * xb.shape[0]
            run_count += xb.shape[0]
        train_loss = run_total / run_count
        val_loss = _epoch_loss(model, _batches(data, val_idx, config.batch_size))
        tlog.epochs.append(EpochStats(epoch, train_loss, val_loss))
        log.info(
            "epoch %d: train_loss=%.6e val_loss=%.6e (%.1fs)",
            epoch,
            train_loss,
            val_loss,
            time.monotonic() - t0,
        )

        if val_loss < tlog.best_val_loss:
            tlog.best_val_loss = val_loss
            tlog.best_epoch = epoch
            best_state = model.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop at epoch %d (best epoch %d)", epoch, tlog.best_epoch)
                break

    model.restore(best_state)
    return model, tlog


def reconstruct(model: Autoencoder, images, batch_size: int = 8) -> np.ndarray:
    """Run uint8 HWC images through the model; returns a float (n,3,h,w) batch."""
    data = patches_to_batch(images)
    outs = [
        model.forward(data[i : i + batch_size], training=False)
        for i in range(0, data.shape[0], batch_size)
    ]
    return np.concatenate(outs, axis=0)
