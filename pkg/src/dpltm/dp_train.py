"""Differentially private training of a masked network.

Every step draws a Poisson lot, clips each example's gradient to joint l2 norm
C, adds N(0, (sigma C)^2) noise per coordinate and divides by the configured
lot size L (not the realised one). Noise is drawn at full shape and masked, so
pruned weights never move.

Randomness here comes from the privacy stream. numpy's PCG64 is fine for
experiments but is not a cryptographic source.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .accountant import AccountantState, calibrate_sigma, cumulative_epsilon, spend_step, total_epsilon
from .nn import (DivergenceError, GradientSet, LabeledBatch, Mask, NetworkParams, _backprop_deltas,
                 _output_deltas, _weighted_grads, accuracy, forward, per_example_grad_norms,
                 per_example_losses, sgd_step)

log = logging.getLogger(__name__)


@dataclass
class DPTrainConfig:
    clip: float = 1.0
    lot_size: int = 400
    lr: float = 0.1
    epochs: int = 50
    eps2: float = 0.9
    delta: float = 1e-5
    early_stop_eps: Optional[float] = None
    sigma: Optional[float] = None  # None -> calibrate from (eps2, delta)

    def __post_init__(self):
        if not (self.clip > 0 and self.lot_size >= 1 and self.lr > 0 and self.epochs >= 0):
            raise ValueError("clip, lot_size and lr must be positive, epochs >= 0")


@dataclass
class EpochRecord:
    epoch: int
    test_accuracy: float
    cumulative_epsilon: float  # training phase only
    loss: float


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)
    sigma: float = 0.0
    steps: int = 0
    stopped_early: bool = False


def lots_per_epoch(n: int, lot_size: int) -> int:
    return math.ceil(n / lot_size)


def poisson_sample(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 < q <= 1:
        raise ValueError(f"q must be in (0, 1], got {q}")
    return np.flatnonzero(rng.random(n) < q)


def clip_scales(norms: np.ndarray, clip: float) -> np.ndarray:
    """min(1, C / norm) per example; zero gradients pass through unchanged."""
    if math.isinf(clip):
        return np.ones_like(norms)
    return clip / np.maximum(norms, clip)


def clip_gradient(g: GradientSet, clip: float) -> GradientSet:
    return g.scaled(float(clip_scales(np.array([g.norm()]), clip)[0]))


def noise_std(sigma: float, clip: float) -> float:
    """sigma * C, with sigma = 0 meaning no noise even when C is infinite."""
    return 0.0 if sigma == 0 else sigma * clip


def _masked_noise(shapes_from: GradientSet, mask: Optional[Mask], std: float,
                  rng: np.random.Generator) -> GradientSet:
    ws = [rng.standard_normal(w.shape) * std for w in shapes_from.weights]
    bs = [rng.standard_normal(b.shape) * std for b in shapes_from.biases]
    if mask is not None:
        ws = [w * m for w, m in zip(ws, mask)]
    return GradientSet(ws, bs)


def noisy_lot_gradient(per_example: List[GradientSet], clip: float, sigma: float, lot_size: int,
                       rng: np.random.Generator, template: Optional[GradientSet] = None,
                       mask: Optional[Mask] = None) -> GradientSet:
    """(sum of clipped gradients + N(0, sigma^2 C^2 I)) / L.

    `template` supplies shapes when the lot is empty.
    """
    shapes = per_example[0] if per_example else template
    if shapes is None:
        raise ValueError("empty lot needs a template for the noise shape")
    total = GradientSet.zeros_like(shapes)
    for g in per_example:
        total = total + clip_gradient(g, clip)
    noise = _masked_noise(shapes, mask, noise_std(sigma, clip), rng)
    return _finish(total, noise, lot_size)


def _finish(total: GradientSet, noise: GradientSet, lot_size: int) -> GradientSet:
    return GradientSet([(w + n) / lot_size for w, n in zip(total.weights, noise.weights)],
                       [(b + n) / lot_size for b, n in zip(total.biases, noise.biases)])


def clipped_lot_sum(params: NetworkParams, mask: Mask, lot: LabeledBatch, clip: float):
    """Sum of clipped per-example gradients in one backward pass.

    Returns (sum, per-example norms before clipping, per-example losses).
    """
    logits, cache = forward(params, mask, lot)
    losses = per_example_losses(logits, lot.labels)
    if not np.all(np.isfinite(losses)):
        raise DivergenceError("non-finite loss during DP training")
    deltas = _backprop_deltas(cache, _output_deltas(logits, lot.labels))
    norms = per_example_grad_norms(cache, deltas, mask)
    total = _weighted_grads(cache, deltas, mask, clip_scales(norms, clip))
    return total, norms, losses


def make_accountant(n: int, cfg: DPTrainConfig) -> AccountantState:
    q = min(1.0, cfg.lot_size / n)
    steps = max(cfg.epochs * lots_per_epoch(n, cfg.lot_size), 1)  # 0 epochs: nothing is spent anyway
    sigma = cfg.sigma if cfg.sigma is not None else calibrate_sigma(cfg.eps2, cfg.delta, q, steps)
    return AccountantState(q=q, sigma=sigma, delta=cfg.delta, total_steps=steps)


def train_dp(mask: Mask, theta0: NetworkParams, train: LabeledBatch, test: LabeledBatch,
             cfg: DPTrainConfig, rng: np.random.Generator, accountant: Optional[AccountantState] = None,
             epsilon_offset: float = 0.0):
    """Train the ticket (mask, theta0) privately.

    `epsilon_offset` is privacy already spent elsewhere (the selection draw);
    it only enters the early-stopping test. Early stopping halts before any
    epoch whose end-of-epoch total would exceed `cfg.early_stop_eps`, so the
    returned model never overspends.

    Returns (params, history); history epsilons are training-phase only.
    """
    n = len(train)
    if cfg.lot_size > n:
        raise ValueError(f"lot size {cfg.lot_size} exceeds dataset size {n}")
    if accountant is None:
        accountant = make_accountant(n, cfg)
    per_epoch = lots_per_epoch(n, cfg.lot_size)
    params = theta0.copy()
    history = TrainHistory(sigma=accountant.sigma)
    template = GradientSet.zeros_like(params)

    for epoch in range(1, cfg.epochs + 1):
        if cfg.early_stop_eps is not None:
            end = total_epsilon(accountant.sigma, accountant.q, accountant.steps_taken + per_epoch,
                                accountant.delta, accountant.total_steps)
            if epsilon_offset + end > cfg.early_stop_eps:
                history.stopped_early = True
                break
        loss_sum, loss_n = 0.0, 0
        for _ in range(per_epoch):
            idx = poisson_sample(n, accountant.q, rng)
            if len(idx):
                total, _, losses = clipped_lot_sum(params, mask, train.subset(idx), cfg.clip)
                loss_sum += float(losses.sum())
                loss_n += len(losses)
            else:
                total = template
            noise = _masked_noise(template, mask, noise_std(accountant.sigma, cfg.clip), rng)
            params = sgd_step(params, mask, _finish(total, noise, cfg.lot_size), cfg.lr)
            spend_step(accountant)
            history.steps += 1
        rec = EpochRecord(epoch, accuracy(params, mask, test), cumulative_epsilon(accountant),
                          loss_sum / loss_n if loss_n else float("nan"))
        history.records.append(rec)
        log.debug("epoch %d acc=%.4f eps=%.4f loss=%.4f", rec.epoch, rec.test_accuracy,
                  rec.cumulative_epsilon, rec.loss)
    return params, history
