"""Private winner selection with the exponential mechanism.

The score rewards accuracy and penalises the remaining-weight fraction:
``score = accuracy * (1 - nu * fraction)``. For nu > 1 the score moves by at
most nu - 1 between neighbouring datasets, which is the sensitivity used in
the mechanism.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tickets import TicketRecord

DEFAULT_NU = 50.0


@dataclass(frozen=True)
class ScoreConfig:
    nu: float = DEFAULT_NU
    epsilon1: float = 0.1

    def __post_init__(self):
        _check_nu(self.nu)
        if not self.epsilon1 > 0:
            raise ValueError(f"epsilon1 must be > 0, got {self.epsilon1}")


def _check_nu(nu: float):
    if not nu > 1:
        raise ValueError(f"nu must be > 1 for the sensitivity bound to hold, got {nu}")


def score(accuracy: float, fraction: float, nu: float = DEFAULT_NU) -> float:
    _check_nu(nu)
    if not (0.0 <= accuracy <= 1.0 and 0.0 <= fraction <= 1.0):
        raise ValueError("accuracy and fraction must lie in [0, 1]")
    return accuracy * (1.0 - nu * fraction)


def sensitivity(nu: float) -> float:
    _check_nu(nu)
    return abs(1.0 - nu)


def score_range(nu: float) -> float:
    """Exact spread max S - min S of the score over accuracy, fraction in [0, 1].

    Attained at (A, C) = (1, 0) against (1, 1). This is one more than
    `sensitivity`, so the mechanism's guarantee at budget eps1 is really
    eps1 * nu / (nu - 1).
    """
    _check_nu(nu)
    return nu


def probabilities_from_scores(scores: Sequence[float], epsilon1: float, delta_score: float) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("no candidates")
    logits = epsilon1 * s / (2.0 * delta_score)
    w = np.exp(logits - logits.max())
    return w / w.sum()


def selection_probabilities(records: Sequence[TicketRecord], cfg: ScoreConfig) -> np.ndarray:
    if not records:
        raise ValueError("no tickets to select from")
    scores = [score(r.accuracy, r.fraction, cfg.nu) for r in records]
    return probabilities_from_scores(scores, cfg.epsilon1, sensitivity(cfg.nu))


def sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; one uniform from `rng` per call."""
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return min(int(np.searchsorted(cdf, u, side="right")), len(probs) - 1)


def select_winner(records: Sequence[TicketRecord], cfg: ScoreConfig, rng: np.random.Generator,
                  ledger: Optional["PrivacyLedger"] = None) -> TicketRecord:
    """Draw a ticket with the exponential mechanism.

    `rng` must be the privacy stream. When a ledger is given the draw's
    epsilon1 is charged to it.
    """
    probs = selection_probabilities(records, cfg)
    winner = records[sample_index(probs, rng)]
    if ledger is not None:
        ledger.charge("selection", cfg.epsilon1)
    return winner


def select_uniform(records: Sequence[TicketRecord], rng: np.random.Generator) -> TicketRecord:
    """Data-independent baseline draw; costs no privacy."""
    if not records:
        raise ValueError("no tickets to select from")
    return records[sample_index(np.full(len(records), 1.0 / len(records)), rng)]


def select_public(records: Sequence[TicketRecord], max_fraction: float = 0.10) -> TicketRecord:
    """Non-private pick for tickets built on public data.

    Most accurate ticket with at most `max_fraction` of the weights left
    (smaller fraction breaks ties); falls back to the smallest ticket.
    """
    if not records:
        raise ValueError("no tickets to select from")
    small = [r for r in records if r.fraction <= max_fraction]
    if not small:
        return min(records, key=lambda r: r.fraction)
    return max(small, key=lambda r: (r.accuracy, -r.fraction))


class PrivacyLedger:
    """Running list of (phase, epsilon) charges for one pipeline run."""

    def __init__(self):
        self.entries = []

    def charge(self, phase: str, epsilon: float):
        self.entries.append((phase, float(epsilon)))

    def spent(self, phase: Optional[str] = None) -> float:
        return sum(e for p, e in self.entries if phase is None or p == phase)
