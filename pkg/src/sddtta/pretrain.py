"""Supervised source-domain training of the two-stage net.

Plain SGD, no momentum, no weight decay. Class imbalance is handled by
undersampling: each epoch uses every positive plus an equal count of
negatives drawn from a fixed seeded rotation, so all negatives are used
equally often (counts never differ by more than one).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .network import ModelParams, build_architecture, forward_batch
from .synthdata import Sample


@dataclass
class PretrainConfig:
    epochs: int = 20
    lr: float = 0.05
    batch_size: int = 5
    seed: int = 0
    seg_loss_weight: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class PretrainResult:
    params: ModelParams
    epoch_losses: list[float]
    negative_usage: dict[str, int]


def downsample_mask(mask: np.ndarray) -> np.ndarray:
    """8x8 block max: a block is positive if any of its pixels is."""
    h, w = mask.shape
    if h % 8 or w % 8:
        raise ConfigError(f"mask dims ({h},{w}) must be divisible by 8")
    return mask.reshape(h // 8, 8, w // 8, 8).max(axis=(1, 3))


def _bce_mean(prob: ad.Tensor, targets: np.ndarray) -> ad.Tensor:
    eps = 1e-7
    p = ad.clip(prob, eps, 1 - eps)
    t = targets.astype(prob.data.dtype)
    return ad.mean_all(ad.log(p) * (-t) + ad.log(1.0 - p) * (t - 1.0))


class _NegativeRotation:
    """Fixed seeded circular order over the negative samples."""

    def __init__(self, count: int, rng: np.random.Generator):
        self.order = rng.permutation(count)
        self.pos = 0

    def take(self, k: int) -> list[int]:
        out = []
        for _ in range(k):
            out.append(int(self.order[self.pos]))
            self.pos = (self.pos + 1) % len(self.order)
        return out


def pretrain(datasets: list[Sample], cfg: PretrainConfig) -> PretrainResult:
    """Train from scratch on labeled samples; returns final parameters."""
    positives = [s for s in datasets if s.label == 1]
    negatives = [s for s in datasets if s.label == 0]
    if not positives:
        raise ConfigError("pretraining needs at least one positive sample")
    if not negatives:
        raise ConfigError("pretraining needs at least one negative sample")
    h, w = positives[0].image.shape[1:]
    params = build_architecture(h, w, cfg.seed)

    rng = np.random.default_rng(cfg.seed)
    rotation = _NegativeRotation(len(negatives), rng)
    usage = {s.id: 0 for s in negatives}

    seg_targets = {
        s.id: downsample_mask(s.mask).astype(np.float32)[None] for s in datasets if s.mask is not None
    }

    epoch_losses = []
    for _ in range(cfg.epochs):
        chosen = [negatives[i] for i in rotation.take(len(positives))]
        for s in chosen:
            usage[s.id] += 1
        epoch_samples = positives + chosen
        order = rng.permutation(len(epoch_samples))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [epoch_samples[i] for i in order[start : start + cfg.batch_size]]
            images = np.stack([s.image for s in batch])
            seg_t = np.stack([seg_targets[s.id] for s in batch])
            cls_t = np.array([[s.label] for s in batch], dtype=np.float32)

            tape = ad.Tape()
            seg_prob, cls_prob, _, _ = forward_batch(params, images, tape)
            loss = _bce_mean(seg_prob, seg_t) * cfg.seg_loss_weight + _bce_mean(cls_prob, cls_t)
            grads = ad.backward(tape, loss)
            for name, g in grads.items():
                params.params[name] -= cfg.lr * g.astype(np.float32)
            total += loss.item() * len(batch)
            count += len(batch)
        epoch_losses.append(total / count)

    params.provenance = {"stage": "pretrain", "epochs": cfg.epochs, "lr": cfg.lr}
    return PretrainResult(params, epoch_losses, usage)
