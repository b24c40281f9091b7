"""Single-slot second-price auction with eCPM ranking.

Each bidder submits a non-negative bid amount together with a quality
multiplier (a pCTR-like factor, fixed to 1 in the two-agent environment).
Entries are ranked by effective score ``quality * amount``; the top entry
wins and pays the runner-up score. The winner's raw reward is its private
impression value, everyone else gets 0.
"""

from dataclasses import dataclass, replace
from typing import Optional, Sequence


@dataclass(frozen=True)
class Bid:
    """One agent's entry into a single auction."""

    agent_id: int
    amount: float
    quality: float = 1.0

    def __post_init__(self):
        if self.amount < 0:
            raise ValueError(f"bid amount must be >= 0, got {self.amount}")
        if self.quality < 0:
            raise ValueError(f"bid quality must be >= 0, got {self.quality}")

    @property
    def score(self) -> float:
        return self.quality * self.amount


@dataclass(frozen=True)
class AuctionOutcome:
    """Result of one auction: winner (None if no positive score), per-agent
    win indicators, the second-price payment, and per-agent raw rewards."""

    winner: Optional[int]
    win_flags: tuple
    payment: float
    raw_rewards: tuple


def mask_bid(bid: Bid, remaining_budget: float) -> Bid:
    """Force the bid amount to 0 once the bidder's budget is exhausted.

    The bid passes through unchanged while remaining_budget > 0; at 0 or
    below the amount is zeroed so the agent cannot win further auctions.
    """
    if remaining_budget > 0:
        return bid
    return replace(bid, amount=0.0)


def run_auction(bids: Sequence[Bid], values: Sequence[float]) -> AuctionOutcome:
    """Run one second-price auction over the given bids.

    The winner is the entry with the highest effective score
    ``quality * amount`` (ties broken by lowest agent index), and pays the
    second-highest score (0 if fewer than two positive scores). If every
    score is 0 there is no winner. ``values[i]`` is agent i's private
    impression value; the winner's raw reward equals its value.
    """
    if not bids:
        raise ValueError("run_auction requires at least one bid")
    if len(values) != len(bids):
        raise ValueError(f"got {len(bids)} bids but {len(values)} values")

    scores = [b.score for b in bids]
    best = max(scores)
    n = len(bids)
    if best <= 0:
        return AuctionOutcome(
            winner=None,
            win_flags=(0,) * n,
            payment=0.0,
            raw_rewards=(0.0,) * n,
        )

    # ties broken by lowest agent index, deterministically
    winner_pos = min(
        (i for i in range(n) if scores[i] == best),
        key=lambda i: bids[i].agent_id,
    )
    runner_up = max(
        (s for i, s in enumerate(scores) if i != winner_pos), default=0.0
    )
    payment = runner_up if runner_up > 0 else 0.0

    win_flags = tuple(1 if i == winner_pos else 0 for i in range(n))
    rewards = tuple(
        float(values[i]) if i == winner_pos else 0.0 for i in range(n)
    )
    return AuctionOutcome(
        winner=bids[winner_pos].agent_id,
        win_flags=win_flags,
        payment=float(payment),
        raw_rewards=rewards,
    )
