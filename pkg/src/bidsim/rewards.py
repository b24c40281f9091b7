"""Credit assignment for multi-agent bidding.

Three reward modes for a per-step auction outcome:

* competitive: every agent keeps its raw reward (winner gets the value).
* cooperative: every agent receives the summed raw reward.
* temperature-weighted: the summed reward is split by a softmax over bid
  amounts at temperature tau, so higher bidders earn a larger share and
  tau interpolates between winner-take-all (tau -> 0) and an even split
  (tau -> inf).

Also provides the bar-gated scheme used by adversarial bar agents and the
closed-form cooperation threshold for the two-agent single-impression
game, plus a brute-force grid check of that threshold.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

# Threshold value meaning "every positive temperature cooperates".
ALWAYS_COOPERATIVE = 0.0


@dataclass(frozen=True)
class RewardMode:
    kind: str
    tau: Optional[float] = None

    _KINDS = ("competitive", "cooperative", "trca")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown reward mode {self.kind!r}")
        if self.kind == "trca":
            if self.tau is None or not self.tau > 0:
                raise ValueError("temperature-weighted mode needs tau > 0")
        elif self.tau is not None:
            raise ValueError(f"mode {self.kind!r} takes no tau")

    @classmethod
    def competitive(cls) -> "RewardMode":
        return cls("competitive")

    @classmethod
    def cooperative(cls) -> "RewardMode":
        return cls("cooperative")

    @classmethod
    def trca(cls, tau: float) -> "RewardMode":
        return cls("trca", tau)


def trca_weights(bid_amounts: Sequence[float], tau: float) -> np.ndarray:
    """Softmax over bid amounts at temperature tau.

    Computed with max subtraction so extreme temperatures stay finite.
    Weights are strictly positive and sum to 1.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    amounts = np.asarray(bid_amounts, dtype=float)
    if amounts.ndim != 1 or amounts.size == 0:
        raise ValueError("bid_amounts must be a non-empty 1-d sequence")
    scaled = amounts / tau
    scaled -= scaled.max()
    w = np.exp(scaled)
    return w / w.sum()


def assign_rewards(
    bid_amounts: Sequence[float],
    raw_rewards: Sequence[float],
    mode: RewardMode,
) -> np.ndarray:
    """Per-agent training rewards for one auction step under a reward mode."""
    raw = np.asarray(raw_rewards, dtype=float)
    if len(bid_amounts) != raw.size:
        raise ValueError("bid_amounts and raw_rewards must have equal length")
    if mode.kind == "competitive":
        return raw.copy()
    total = raw.sum()
    if mode.kind == "cooperative":
        return np.full(raw.size, total)
    return trca_weights(bid_amounts, mode.tau) * total


def bar_gate(bid_amount: float, bar: float) -> float:
    """1.0 when the bid clears the bar, else 0.0."""
    return 1.0 if bid_amount >= bar else 0.0


def gated_rewards(
    bid_amounts: Sequence[float],
    bar_levels: Sequence[float],
    assigned_rewards: Sequence[float],
    payment: float,
) -> tuple:
    """Rewards for bidders and their adversarial bar agents.

    Bidder i keeps its assigned reward only when its bid clears its own
    bar; the matching bar agent is paid the auction payment under the
    same gate. Returns (bidder_rewards, bar_rewards) arrays.
    """
    amounts = np.asarray(bid_amounts, dtype=float)
    bars = np.asarray(bar_levels, dtype=float)
    assigned = np.asarray(assigned_rewards, dtype=float)
    if not (amounts.shape == bars.shape == assigned.shape):
        raise ValueError("bid_amounts, bar_levels, assigned_rewards must align")
    z = (amounts >= bars).astype(float)
    return z * assigned, z * payment


def cooperation_threshold(
    v1: float, v2: float, b_min: float, b_max: float
) -> float:
    """Temperature above which the low-value agent prefers to stop competing.

    Two agents with per-impression values v1 >= v2 bid on one impression
    under the temperature-weighted split. For v2 < v1 < 2*v2 the best
    response of agent 2 flips from outbidding to conceding at

        tau* = (b_min - b_max) / log(2*v2/v1 - 1)

    and the function returns that finite threshold. When v1 >= 2*v2 the
    concession is preferred at every temperature (ALWAYS_COOPERATIVE,
    i.e. 0.0). When v1 <= v2 no finite temperature suffices (returns inf).
    """
    for name, v in (("v1", v1), ("v2", v2)):
        if not v > 0:
            raise ValueError(f"{name} must be > 0, got {v}")
    if not b_max > b_min:
        raise ValueError("b_max must exceed b_min")
    if b_min < 0:
        raise ValueError("b_min must be >= 0")
    if v1 >= 2.0 * v2:
        return ALWAYS_COOPERATIVE
    if v1 <= v2:
        return math.inf
    return (b_min - b_max) / math.log(2.0 * v2 / v1 - 1.0)


def verify_theorem(
    v1: float,
    v2: float,
    b_min: float,
    b_max: float,
    tau: float,
    grid_points: int = 21,
) -> bool:
    """Brute-force check: does agent 2 prefer conceding at this temperature?

    Enumerates all joint bids on a grid_points^2 lattice under the real
    auction rules (ties go to agent 1, nothing is sold when both bids are
    zero), splits the winner's value through the softmax weights, and
    compares agent 2's best share over profiles it loses against its best
    over profiles it wins. True means conceding (cooperation) is at least
    as good, i.e. the game sits at or above the threshold.
    """
    if grid_points < 2:
        raise ValueError("grid_points must be >= 2")
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    grid = np.linspace(b_min, b_max, grid_points)
    b1 = grid[:, None]
    b2 = grid[None, :]
    # agent 2's softmax share, stable for any tau: 1 / (1 + exp((b1-b2)/tau))
    alpha2 = np.exp(-np.logaddexp(0.0, (b1 - b2) / tau))
    win2 = b2 > b1
    sold = np.maximum(b1, b2) > 0
    r2 = alpha2 * np.where(win2, v2, np.where(sold, v1, 0.0))
    best_win = r2[win2].max()
    best_lose = r2[~win2].max()
    return bool(best_lose >= best_win)


def normalize_episode_reward(rewards: Sequence[float], v_max: float) -> np.ndarray:
    """Scale a reward sequence by the episode's maximum attainable value.

    v_max <= 0 (an episode with nothing to win) maps everything to 0.
    """
    arr = np.asarray(rewards, dtype=float)
    if v_max <= 0:
        return np.zeros_like(arr)
    return arr / v_max
