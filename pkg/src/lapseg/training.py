"""Training objective (gamma-blended soft dice + cross-entropy), SGD with
momentum and weight decay, and the per-epoch training loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .metrics import confusion_metrics, dsc_metric, hausdorff
from .tensor import NumericalError, Tape, Tensor, _wrap


@dataclass
class LossConfig:
    """gamma blends dice against cross-entropy: gamma*dice + (1-gamma)*ce."""

    gamma: float = 0.6
    dice_eps: float = 1e-5

    def validate(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        return self


@dataclass
class SgdConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0001


class SgdState:
    """Per-parameter velocity buffers, aligned with the parameter list."""

    def __init__(self, params):
        self.velocities = [np.zeros_like(p.data) for p in params]


class NonFiniteLossError(NumericalError):
    """Training loss became NaN/Inf."""


def one_hot(mask: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    if mask.min() < 0 or mask.max() >= num_classes:
        raise ValueError("mask ids out of range")
    out = np.zeros(mask.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(out, mask[..., None].astype(np.int64), 1.0, axis=-1)
    return out


def dice_loss(probs: Tensor, target: Tensor, eps: float = 1e-5) -> Tensor:
    """Soft dice over (H, W, K) class probabilities vs a one-hot target.

    Per class: 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps); averaged
    over classes. In [0, 1] up to eps effects.
    """
    if probs.shape != target.shape:
        raise ValueError(f"probs {probs.shape} vs target {target.shape}")
    inter = ops.sum_(ops.mul(probs, target), axis=(0, 1))
    total = ops.add(ops.sum_(probs, axis=(0, 1)), ops.sum_(target, axis=(0, 1)))
    ratio = ops.div(ops.add_scalar(ops.scale(inter, 2.0), eps),
                    ops.add_scalar(total, eps))
    return ops.add_scalar(ops.scale(ops.mean_(ratio), -1.0), 1.0)


def ce_loss(logits: Tensor, target: Tensor) -> Tensor:
    """Mean over pixels of -log softmax at the target class."""
    if logits.shape != target.shape:
        raise ValueError(f"logits {logits.shape} vs target {target.shape}")
    npix = logits.shape[0] * logits.shape[1]
    ls = ops.log_softmax(logits, axis=2)
    return ops.scale(ops.sum_(ops.mul(ls, target)), -1.0 / npix)


def combined_loss(logits: Tensor, target: Tensor, cfg: LossConfig) -> Tensor:
    probs = ops.softmax(logits, axis=2)
    d = dice_loss(probs, target, cfg.dice_eps)
    c = ce_loss(logits, target)
    return ops.add(ops.scale(d, cfg.gamma), ops.scale(c, 1.0 - cfg.gamma))


def sgd_step(params, grads, state: SgdState, cfg: SgdConfig):
    """v <- momentum*v + (g + wd*p);  p <- p - lr*v.

    Parameters are updated by swapping their buffers; returns the params.
    """
    if len(params) != len(grads) or len(params) != len(state.velocities):
        raise ValueError("params, grads and velocities must align")
    for p, g, v in zip(params, grads, state.velocities):
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.data.shape}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        v *= cfg.momentum
        v += g
        p.data = p.data - cfg.lr * v
    return params


def evaluate(model, samples, loss_cfg: LossConfig | None = None) -> dict:
    """Mean segmentation metrics of a model over samples (no gradients)."""
    dtype = model.cfg.np_dtype
    k = model.cfg.num_classes
    dices, hds, ses, sps, accs, losses = [], [], [], [], [], []
    for sample in samples:
        logits = model.forward(_wrap(sample.image.astype(dtype), False))
        pred = np.argmax(logits.data, axis=2)
        _, mean_dsc = dsc_metric(pred, sample.mask, k)
        dices.append(mean_dsc)
        hds.append(hausdorff(pred, sample.mask))
        cm = confusion_metrics(pred, sample.mask)
        ses.append(cm["se"])
        sps.append(cm["sp"])
        accs.append(cm["acc"])
        if loss_cfg is not None:
            target = _wrap(one_hot(sample.mask, k, dtype), False)
            losses.append(combined_loss(logits, target, loss_cfg).item())
    out = {
        "dice": float(np.mean(dices)),
        "hd": float(np.mean(hds)),
        "se": float(np.mean(ses)),
        "sp": float(np.mean(sps)),
        "acc": float(np.mean(accs)),
    }
    if loss_cfg is not None:
        out["eval_loss"] = float(np.mean(losses))
    return out


def train_model(model, train_samples, *, epochs: int, opt: SgdConfig,
                loss_cfg: LossConfig, batch_size: int = 4, seed: int = 0,
                eval_samples=None, on_epoch=None) -> list:
    """Minibatch SGD over per-sample tapes with gradient accumulation.

    Returns one record per epoch: epoch index, mean train loss, and (when
    eval_samples is given) dice/hd/se/sp/acc on that set. ``on_epoch`` is
    called with each record as it is produced.
    """
    params = model.parameters()
    state = SgdState(params)
    dtype = model.cfg.np_dtype
    k = model.cfg.num_classes
    rng = np.random.default_rng(seed)
    targets = {}
    records = []
    for epoch in range(epochs):
        order = rng.permutation(len(train_samples))
        total_loss = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            accum = [np.zeros_like(p.data) for p in params]
            for idx in batch:
                sample = train_samples[idx]
                if idx not in targets:
                    targets[idx] = _wrap(one_hot(sample.mask, k, dtype), False)
                img = _wrap(sample.image.astype(dtype), False)
                with Tape() as tape:
                    logits = model.forward(img)
                    loss = combined_loss(logits, targets[idx], loss_cfg)
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteLossError(
                        f"non-finite loss at epoch {epoch}, sample {idx}"
                    )
                total_loss += value
                tape.backward(loss)
                for acc, p in zip(accum, params):
                    if p.grad is not None:
                        acc += p.grad
                        p.grad = None
            grads = [acc / len(batch) for acc in accum]
            sgd_step(params, grads, state, opt)
        record = {"epoch": epoch, "loss": total_loss / len(order)}
        if eval_samples:
            record.update(evaluate(model, eval_samples))
        records.append(record)
        if on_epoch is not None:
            on_epoch(record, state)
    return records
