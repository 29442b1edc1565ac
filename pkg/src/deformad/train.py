"""Training loop: seeded batching, cosine schedule, dead-item reseeding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .data import as_batch
from .losses import model_loss
from .model import Model
from .numeric.tensor import Tensor, backward
from .quantize import reseed_dead_items


class NumericError(RuntimeError):
    """Non-finite loss or parameters during training (CLI exit code 3)."""


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    rec: float
    com: float
    df: float
    cyc: float
    total: float

    ROW_FIELDS = ("epoch", "lr", "rec", "com", "df", "cyc", "total")

    def row(self):
        return [self.epoch, f"{self.lr:.8g}", f"{self.rec:.8g}",
                f"{self.com:.8g}", f"{self.df:.8g}", f"{self.cyc:.8g}",
                f"{self.total:.8g}"]


def batch_indices(n, batch_size, seed, epoch):
    """Deterministic shuffled batches for one epoch."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE0, epoch]))
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def loss_on_batch(model, x, config, training=False):
    """Forward plus assembled loss; gradients only when a tape is active."""
    outputs = model.forward(x, training=training)
    return model_loss(x, outputs, config)


def _check_finite(record):
    for name in ("rec", "com", "df", "cyc", "total"):
        value = getattr(record, name)
        if value is not None and not np.isfinite(value):
            raise NumericError(f"loss component {name!r} became non-finite")


def train_model(config, train_images, model=None, on_epoch=None):
    """Train on LabeledImages; anomaly flags are never consulted.

    Returns (model, history). ``on_epoch`` receives each EpochRecord and,
    when it returns False, training stops early (used by smoke tests).
    """
    if not train_images:
        raise ValueError("training set is empty")
    model = model or Model(config)
    opt = nm.AdamW(model.parameters(), lr=config.optimizer.lr,
                   betas=(config.optimizer.beta1, config.optimizer.beta2),
                   eps=config.optimizer.eps,
                   weight_decay=config.optimizer.weight_decay)
    pixels = as_batch(train_images)
    history = []
    epochs = config.optimizer.epochs
    for epoch in range(epochs):
        lr = (nm.cosine_lr(config.optimizer.lr, epoch, epochs)
              if config.optimizer.schedule == "cosine" else config.optimizer.lr)
        sums = np.zeros(5)
        steps = 0
        for idx in batch_indices(len(train_images),
                                 config.optimizer.batch_size,
                                 config.seed, epoch):
            x = Tensor(pixels[idx])
            with nm.Tape():
                total, record = loss_on_batch(model, x, config, training=True)
                _check_finite(record)
                backward(total)
            opt.step(lr)
            opt.zero_grad()
            sums += [record.rec, record.com, record.df, record.cyc or 0.0,
                     record.total]
            steps += 1
            last_batch = idx
        if model.use_memory:
            # reseed from the final batch's queries, one epoch boundary at a time
            outputs = model.forward(Tensor(pixels[last_batch]))
            depth = outputs.z_e.shape[1]
            queries = outputs.z_e.data.transpose(0, 2, 3, 1).reshape(-1, depth)
            reseed_dead_items(model.bank, queries,
                              config.memory.reseed_staleness)
        if not model.all_finite():
            raise NumericError("model parameters became non-finite")
        mean = sums / max(steps, 1)
        rec = EpochRecord(epoch=epoch, lr=lr, rec=mean[0], com=mean[1],
                          df=mean[2], cyc=mean[3], total=mean[4])
        history.append(rec)
        if on_epoch is not None and on_epoch(rec) is False:
            break
    return model, history
