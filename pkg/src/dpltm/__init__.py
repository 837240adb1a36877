"""Differentially private lottery ticket mechanism.

Phase 1 (:mod:`dpltm.tickets`) builds lottery tickets by iterative magnitude
pruning, phase 2 (:mod:`dpltm.selection`) picks one with the exponential
mechanism, phase 3 (:mod:`dpltm.dp_train`) trains it with clipped, noised
gradients under budget tracked by :mod:`dpltm.accountant`.
"""

from .accountant import AccountantState, calibrate_sigma, cumulative_epsilon
from .dp_train import DPTrainConfig, train_dp
from .nn import GradientSet, LabeledBatch, NetworkParams, init_network
from .selection import ScoreConfig, select_winner, selection_probabilities
from .tickets import TicketRecord, TicketStore, generate_tickets

__version__ = "0.1.0"
