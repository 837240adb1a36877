"""Privacy accounting for subsampled Gaussian steps.

Each step is bounded with the classical Gaussian-mechanism guarantee,
amplified by Poisson subsampling and composed over steps with the advanced
composition theorem. The clipping norm cancels out (sensitivity C, noise
sigma * C), so nothing here depends on it.

Delta allocation: half of the target delta is the composition slack, the other
half is spread evenly over the planned steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class CalibrationError(ValueError):
    pass


SIGMA_BRACKET = (0.1, 1e4)
SIGMA_TOL = 1e-3


def step_epsilon(sigma: float, delta0: float) -> float:
    """epsilon of one Gaussian-mechanism release at noise multiplier sigma."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if not 0 < delta0 < 1:
        raise ValueError(f"delta0 must be in (0, 1), got {delta0}")
    return math.sqrt(2.0 * math.log(1.25 / delta0)) / sigma


def amplified_epsilon(eps0: float, q: float) -> float:
    if not eps0 > 0:
        raise ValueError(f"eps0 must be > 0, got {eps0}")
    if not 0 < q <= 1:
        raise ValueError(f"q must be in (0, 1], got {q}")
    if q == 1:
        return eps0
    return math.log1p(q * math.expm1(eps0))


def composed_epsilon(eps_step: float, delta_step: float, k: int, delta_slack: float):
    """(eps_total, delta_total) for k-fold advanced composition."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if eps_step < 0 or delta_step < 0 or not 0 < delta_slack < 1:
        raise ValueError("invalid per-step parameters or slack")
    if k == 0:
        return 0.0, delta_slack
    eps = math.sqrt(2.0 * k * math.log(1.0 / delta_slack)) * eps_step + k * eps_step * math.expm1(eps_step)
    return eps, k * delta_step + delta_slack


def delta_split(delta: float, total_steps: int):
    """(per-step delta, composition slack)."""
    return delta / (2.0 * total_steps), delta / 2.0


def total_epsilon(sigma: float, q: float, steps: int, delta: float, total_steps: int) -> float:
    """Cumulative epsilon after `steps` of a run planned for `total_steps`."""
    if steps == 0:
        return 0.0
    if sigma == 0:
        return math.inf
    delta0, slack = delta_split(delta, total_steps)
    eps = amplified_epsilon(step_epsilon(sigma, delta0), q)
    return composed_epsilon(eps, delta0, steps, slack)[0]


def calibrate_sigma(eps2: float, delta: float, q: float, total_steps: int,
                    tol: float = SIGMA_TOL, bracket=SIGMA_BRACKET) -> float:
    """Smallest sigma in the bracket (to within `tol`) meeting (eps2, delta) after total_steps."""
    if not eps2 > 0:
        raise ValueError("eps2 must be > 0")
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    if not 0 < q <= 1:
        raise ValueError("q must be in (0, 1]")
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")

    def ok(sigma):
        return total_epsilon(sigma, q, total_steps, delta, total_steps) <= eps2

    lo, hi = bracket
    if not ok(hi):
        raise CalibrationError(f"eps2={eps2} unreachable with sigma <= {hi} "
                               f"(q={q}, steps={total_steps}, delta={delta})")
    if ok(lo):
        return lo
    # invariant: ok(hi) and not ok(lo)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class AccountantState:
    q: float
    sigma: float
    delta: float
    total_steps: int
    steps_taken: int = 0

    @property
    def per_step_delta(self) -> float:
        return delta_split(self.delta, self.total_steps)[0]


def spend_step(state: AccountantState) -> AccountantState:
    state.steps_taken += 1
    return state


def cumulative_epsilon(state: AccountantState) -> float:
    return total_epsilon(state.sigma, state.q, state.steps_taken, state.delta, state.total_steps)


def cumulative_delta(state: AccountantState) -> float:
    delta0, slack = delta_split(state.delta, state.total_steps)
    return state.steps_taken * delta0 + slack if state.steps_taken else 0.0
