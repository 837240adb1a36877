"""Lottery ticket generation by iterative magnitude pruning with reset to init."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .nn import (LabeledBatch, Mask, NetworkParams, ShapeError, accuracy, full_mask, init_network,
                 loss_and_backward, mask_fraction, sgd_step)

log = logging.getLogger(__name__)


class PruneError(ValueError):
    pass


@dataclass
class TicketRecord:
    index: int
    mask: Mask
    accuracy: float
    fraction: float


@dataclass
class TicketStore:
    layer_dims: List[int]
    init_seed: int
    theta0: NetworkParams
    records: List[TicketRecord] = field(default_factory=list)
    prune_rates: List[float] = field(default_factory=list)

    def record(self, index: int) -> TicketRecord:
        for r in self.records:
            if r.index == index:
                return r
        raise KeyError(f"no ticket with index {index}")


def default_prune_rates(n_layers: int) -> List[float]:
    """30% for every layer but the output layer, which gets 20%."""
    return [0.3] * (n_layers - 1) + [0.2]


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def prune_step(params: NetworkParams, mask: Mask, prune_rates: Sequence[float]) -> Mask:
    """Layer-wise magnitude pruning of surviving weights.

    Removes round_half_up(rate * survivors) of the smallest-|w| survivors in
    each layer, ties broken by lowest flat index. Pruned entries stay pruned.
    """
    if len(prune_rates) != params.n_layers or len(mask) != params.n_layers:
        raise ShapeError("need one prune rate and one mask per layer")
    new_mask = []
    for l, (w, m, rate) in enumerate(zip(params.weights, mask, prune_rates)):
        if not 0.0 < rate < 1.0:
            raise PruneError(f"prune rate for layer {l} must be in (0,1), got {rate}")
        flat_m = m.ravel().astype(bool)
        alive = np.flatnonzero(flat_m)
        k = round_half_up(rate * len(alive))
        if len(alive) - k < 1:
            raise PruneError(f"layer {l} would have no surviving weights "
                             f"({len(alive)} alive, pruning {k})")
        order = np.argsort(np.abs(w.ravel()[alive]), kind="stable")
        out = flat_m.copy()
        out[alive[order[:k]]] = False
        new_mask.append(out.reshape(m.shape))
    return new_mask


def reset_to_init(params: NetworkParams, theta0: NetworkParams, mask: Mask) -> NetworkParams:
    """Copy of theta0 (weights and biases); training state in `params` is discarded.

    Masked weights also take their theta0 value; they are inert at forward time.
    """
    if params.layer_dims != theta0.layer_dims or len(mask) != theta0.n_layers:
        raise ShapeError("params, theta0 and mask must share an architecture")
    for m, w in zip(mask, theta0.weights):
        if m.shape != w.shape:
            raise ShapeError("mask shape does not match theta0")
    return theta0.copy()


def train_sgd(params: NetworkParams, mask: Mask, train: LabeledBatch, iterations: int, lr: float,
              batch_size: int, rng: np.random.Generator) -> NetworkParams:
    """Non-private minibatch SGD; batches drawn by reshuffling each epoch."""
    n = len(train)
    bs = min(batch_size, n)
    order = rng.permutation(n)
    pos = 0
    for _ in range(iterations):
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + bs]
        pos += bs
        _, grads = loss_and_backward(params, mask, train.subset(idx))
        params = sgd_step(params, mask, grads, lr)
    return params


def generate_tickets(train: LabeledBatch, test: LabeledBatch, layer_dims: Sequence[int], T: int,
                     iters_per_ticket: int, prune_rates: Optional[Sequence[float]] = None,
                     lr: float = 0.1, batch_size: int = 400, seed: int = 0) -> TicketStore:
    if T < 1 or iters_per_ticket < 1:
        raise ValueError("T and iters_per_ticket must be >= 1")
    dims = [int(d) for d in layer_dims]
    rates = list(prune_rates) if prune_rates is not None else default_prune_rates(len(dims) - 1)
    theta0 = init_network(dims, seed)
    shuffle_rng = np.random.default_rng([seed, 1])
    store = TicketStore(dims, seed, theta0, [], rates)
    mask = full_mask(dims)
    for i in range(1, T + 1):
        params = reset_to_init(theta0, theta0, mask)
        params = train_sgd(params, mask, train, iters_per_ticket, lr, batch_size, shuffle_rng)
        acc = accuracy(params, mask, test)
        new_mask = prune_step(params, mask, rates)
        frac = mask_fraction(new_mask)
        if store.records and frac >= store.records[-1].fraction:
            raise PruneError(f"round {i} pruned nothing; network too small for these rates")
        store.records.append(TicketRecord(i, new_mask, acc, frac))
        log.info("ticket %d: accuracy=%.4f fraction=%.5f", i, acc, frac)
        mask = new_mask
    return store
