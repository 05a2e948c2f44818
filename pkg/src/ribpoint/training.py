"""Training: Adam, stepped learning-rate schedule, and the epoch loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import rng
from .nn import ModelParams, NetworkConfig, forward, init_params
from .pointcloud import AugmentConfig, PointSet, augment, normalize, random_downsample

__all__ = [
    "TrainConfig",
    "lr_at_epoch",
    "adam_step",
    "train",
]

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    batch_size: int = 8
    lr0: float = 1e-3
    decay: float = 0.5
    decay_every: int = 20
    lr_floor: float = 1e-5
    points_per_sample: int = 30000
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    checkpoint_every: int = 50

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr0", "decay", "decay_every",
                     "lr_floor", "points_per_sample"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_floor > self.lr0:
            raise ValueError("lr_floor must not exceed lr0")

    def to_json_dict(self) -> dict:
        d = asdict(self)
        return d


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Stepped decay: lr0 * decay^(epoch // decay_every), floored."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return max(cfg.lr0 * cfg.decay ** (epoch // cfg.decay_every), cfg.lr_floor)


def adam_step(model: ModelParams, lr: float) -> None:
    """One Adam update from the gradients currently stored on the params.

    Parameters with no gradient this step are skipped (their moments do
    not advance).  Iteration order is by name, so updates are
    deterministic.
    """
    model.opt_step += 1
    t = model.opt_step
    for name, p in model.named():
        g = p.grad
        if g is None:
            continue
        if name not in model.opt_m:
            model.opt_m[name] = np.zeros_like(p.data)
            model.opt_v[name] = np.zeros_like(p.data)
        m = model.opt_m[name]
        v = model.opt_v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * (g * g)
        m_hat = m / (1 - ADAM_BETA1 ** t)
        v_hat = v / (1 - ADAM_BETA2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def _prepare(dataset) -> list[PointSet]:
    out = []
    for p in dataset:
        if p.labels is None:
            raise ValueError("training samples need per-point labels")
        out.append(normalize(p)[0])
    return out


def train(dataset, net_cfg: NetworkConfig, train_cfg: TrainConfig, seed: int,
          val_dataset=None, checkpoint_fn=None, stop_dice: float | None = None,
          log_every: int = 1):
    """Train on a sequence of labeled point sets (millimetre coordinates).

    Every epoch shuffles the sample order, resamples each case to
    ``points_per_sample`` with a fresh derived seed, augments, and
    accumulates gradients over mini-batches before each Adam step.
    Returns ``(model, history)`` where history has one record per epoch
    with the learning rate, mean loss, and training point Dice.

    ``checkpoint_fn(model, epoch, tag)`` is invoked every
    ``checkpoint_every`` epochs and whenever validation Dice improves.
    ``stop_dice`` ends training early once the epoch's training Dice
    reaches it (the schedule itself is unchanged).
    """
    samples = _prepare(dataset)
    if not samples:
        raise ValueError("training dataset is empty")
    val_samples = _prepare(val_dataset) if val_dataset else None

    model = init_params(net_cfg)
    history: list[dict] = []
    best_val = -1.0
    n = len(samples)

    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(train_cfg, epoch)
        order = rng.generator(rng.derive(seed, 0x0ED0, epoch)).permutation(n)
        losses = []
        inter = 0
        pred_pos = 0
        true_pos = 0
        for b0 in range(0, n, train_cfg.batch_size):
            batch = order[b0:b0 + train_cfg.batch_size]
            model.zero_grads()
            inv = 1.0 / len(batch)
            for si in batch:
                s_seed = rng.derive(seed, epoch, int(si))
                p = random_downsample(samples[si], train_cfg.points_per_sample,
                                      seed=rng.derive(s_seed, 1))
                if train_cfg.augment is not None:
                    p = augment(p, train_cfg.augment, seed=rng.derive(s_seed, 2))
                coords = p.coords.astype(np.float32)
                logits = forward(model, coords, fps_seed=rng.derive(s_seed, 3))
                loss = ad.cross_entropy(logits, p.labels.astype(np.int64))
                ad.mul(loss, np.asarray(inv, dtype=loss.data.dtype)).backward()
                losses.append(float(loss.data))
                pred = np.argmax(logits.data, axis=-1)
                truth = p.labels.astype(bool)
                inter += int((pred.astype(bool) & truth).sum())
                pred_pos += int(pred.sum())
                true_pos += int(truth.sum())
            adam_step(model, lr)
        denom = pred_pos + true_pos
        train_d = 1.0 if denom == 0 else 2.0 * inter / denom
        record = {
            "epoch": epoch,
            "lr": lr,
            "loss": float(np.mean(losses)),
            "train_dice": train_d,
        }
        if val_samples is not None:
            record["val_dice"] = _eval_point_dice(model, val_samples, train_cfg, seed)
            if record["val_dice"] > best_val:
                best_val = record["val_dice"]
                if checkpoint_fn is not None:
                    checkpoint_fn(model, epoch, "best")
        history.append(record)
        if checkpoint_fn is not None and (epoch + 1) % train_cfg.checkpoint_every == 0:
            checkpoint_fn(model, epoch, "periodic")
        if epoch % log_every == 0:
            logger.info("epoch %d lr %.2e loss %.4f dice %.4f (%.1fs)",
                        epoch, lr, record["loss"], train_d,
                        time.perf_counter() - t0)
        if stop_dice is not None and train_d >= stop_dice:
            logger.info("early stop at epoch %d: train dice %.4f", epoch, train_d)
            break
    return model, history


def _eval_point_dice(model: ModelParams, samples: list[PointSet],
                     train_cfg: TrainConfig, seed: int) -> float:
    inter = 0
    denom = 0
    for i, s in enumerate(samples):
        p = random_downsample(s, train_cfg.points_per_sample,
                              seed=rng.derive(seed, 0xA1, i))
        coords = p.coords.astype(np.float32)
        with ad.no_grad():
            logits = forward(model, coords, fps_seed=rng.derive(seed, 0xA2, i))
        pred = np.argmax(logits.data, axis=-1).astype(bool)
        truth = p.labels.astype(bool)
        inter += int((pred & truth).sum())
        denom += int(pred.sum()) + int(truth.sum())
    return 1.0 if denom == 0 else 2.0 * inter / denom
