"""Mean-field advertiser groups bidding on logged impression opportunities.

Each advertiser group is controlled by one agent that submits a single
mean bid per timestep. Every member ad's bid is derived from it by
scaling with the ad's value relative to the group's mean value at that
timestep (ratio clipped to [0, 3]). All opportunities of the timestep
are auctioned simultaneously under second pricing on bid * quality.

Group bookkeeping per timestep: reward is the value won averaged over
the timestep's opportunities, payment is the summed runner-up score of
won opportunities, and the group's budget drops by that payment. A
group whose budget is exhausted bids 0 from the next timestep on, so it
can overshoot by at most one timestep's payment.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from .logs import GROUPS, ImpressionRecord, LogTable


def group_by_objective(records: Iterable[ImpressionRecord]) -> Dict[str, list]:
    """Map each group name to the sorted ad ids bidding under it."""
    seen: Dict[int, str] = {}
    out: Dict[str, set] = {}
    for rec in records:
        prev = seen.get(rec.ad_id)
        if prev is not None and prev != rec.group:
            raise ValueError(
                f"ad_id {rec.ad_id} appears in groups {prev!r} and {rec.group!r}"
            )
        seen[rec.ad_id] = rec.group
        out.setdefault(rec.group, set()).add(rec.ad_id)
    return {g: sorted(ids) for g, ids in out.items()}


def mean_value(values: np.ndarray, present: Optional[np.ndarray] = None) -> tuple:
    """Mean over the present (opportunity, member) values.

    Returns (mean, True) or (0.0, False) when nothing is present.
    """
    arr = np.asarray(values, dtype=float)
    if present is not None:
        arr = arr[np.asarray(present, dtype=bool)]
    if arr.size == 0:
        return 0.0, False
    return float(arr.mean()), True


def derive_bid(
    mean_bid: float, value: float, group_mean_value: float, ratio_clip: float = 3.0
) -> float:
    """Member bid: mean bid scaled by the ad's value share, ratio clipped."""
    if mean_bid < 0:
        raise ValueError(f"mean_bid must be >= 0, got {mean_bid}")
    if group_mean_value <= 0:
        return 0.0
    ratio = np.clip(value / group_mean_value, 0.0, ratio_clip)
    return float(mean_bid * ratio)


def derive_bids(
    mean_bid: float,
    values: np.ndarray,
    group_mean_value: float,
    ratio_clip: float = 3.0,
) -> np.ndarray:
    if group_mean_value <= 0:
        return np.zeros_like(np.asarray(values, dtype=float))
    ratios = np.clip(np.asarray(values, dtype=float) / group_mean_value, 0.0, ratio_clip)
    return mean_bid * ratios


def group_reward(values: np.ndarray, win_mask: np.ndarray, num_opportunities: int) -> float:
    """Won value averaged over the timestep's opportunity count."""
    if num_opportunities < 1:
        raise ValueError("num_opportunities must be >= 1")
    vals = np.asarray(values, dtype=float)
    mask = np.asarray(win_mask, dtype=bool)
    return float(vals[mask].sum()) / num_opportunities


def group_payment(opportunity_payments: np.ndarray, win_mask: np.ndarray) -> float:
    """Summed second-price payments over the opportunities this group won."""
    pays = np.asarray(opportunity_payments, dtype=float)
    mask = np.asarray(win_mask, dtype=bool)
    return float(pays[mask].sum())


def episode_v_max(table: LogTable, episode: int) -> np.ndarray:
    """Best attainable value per group: win everything with the best member ad."""
    vals = table.values[episode % table.num_episodes]
    out = np.empty(table.num_groups)
    for g in range(table.num_groups):
        out[g] = vals[:, :, table.group_columns(g)].max(axis=2).sum()
    return out


@dataclass
class GroupedStepResult:
    rewards: np.ndarray
    payments: np.ndarray
    won_values: np.ndarray
    submitted_bids: np.ndarray
    winner_columns: np.ndarray
    opportunity_payments: np.ndarray
    done: bool

    @property
    def total_payment(self) -> float:
        return float(self.payments.sum())


class GroupedLogEnv:
    """Replays one log episode, one timestep of simultaneous auctions at a time.

    Groups listed in msb_groups ignore the submitted mean bid and use the
    log's per-ad manual bids instead (still budget masked); this backs the
    manual baseline and single-agent training against static opponents.
    """

    def __init__(
        self,
        table: LogTable,
        initial_budgets: Sequence[float],
        msb_groups: Iterable[int] = (),
        ratio_clip: float = 3.0,
    ):
        budgets = np.asarray(initial_budgets, dtype=float)
        if budgets.shape != (table.num_groups,):
            raise ValueError(
                f"initial_budgets must have {table.num_groups} entries"
            )
        if (budgets < 0).any():
            raise ValueError("initial_budgets must be >= 0")
        self.table = table
        self.num_groups = table.num_groups
        self.episode_length = table.episode_length
        self.num_opportunities = table.opportunities_per_timestep
        self.initial_budgets = budgets.copy()
        self.msb_groups = frozenset(int(g) for g in msb_groups)
        for g in self.msb_groups:
            if not 0 <= g < self.num_groups:
                raise ValueError(f"msb group index {g} out of range")
        self.ratio_clip = ratio_clip
        self.remaining_budgets = budgets.copy()
        self.t = 0
        self._episode = 0

    @property
    def done(self) -> bool:
        return self.t >= self.episode_length

    @property
    def timesteps_left(self) -> int:
        return self.episode_length - self.t

    @property
    def episode_index(self) -> int:
        return self._episode

    def reset(self, episode_index: int) -> None:
        self._episode = episode_index % self.table.num_episodes
        self.remaining_budgets = self.initial_budgets.copy()
        self.t = 0

    def v_max(self) -> np.ndarray:
        return episode_v_max(self.table, self._episode)

    def current_slice(self) -> tuple:
        """(values, qualities, msbs) arrays for the current timestep."""
        e, t = self._episode, self.t
        return (
            self.table.values[e, t],
            self.table.qualities[e, t],
            self.table.msbs[e, t],
        )

    def current_mean_values(self) -> np.ndarray:
        """Per-group mean member value at the current timestep (0 when done)."""
        out = np.zeros(self.num_groups)
        if self.done:
            return out
        vals = self.table.values[self._episode, self.t]
        for g in range(self.num_groups):
            out[g], _ = mean_value(vals[:, self.table.group_columns(g)])
        return out

    def bid_matrix(self, mean_bids: Sequence[float]) -> tuple:
        """Per-ad bids for the current timestep plus the masked mean bids.

        Does not advance the episode; step() uses exactly this matrix.
        """
        if self.done:
            raise RuntimeError("cannot bid on a terminated episode")
        submitted = np.asarray(mean_bids, dtype=float).copy()
        if submitted.shape != (self.num_groups,):
            raise ValueError(f"mean_bids must have {self.num_groups} entries")
        if (submitted < 0).any() or not np.isfinite(submitted).all():
            raise ValueError("mean_bids must be finite and >= 0")
        vals, _, msbs = self.current_slice()
        exhausted = self.remaining_budgets <= 0.0
        bids = np.empty_like(vals)
        for g in range(self.num_groups):
            cols = self.table.group_columns(g)
            if g in self.msb_groups:
                member_bids = msbs[:, cols].copy()
                submitted[g] = float(member_bids.mean())
            else:
                mv, _ = mean_value(vals[:, cols])
                member_bids = derive_bids(submitted[g], vals[:, cols], mv, self.ratio_clip)
            if exhausted[g]:
                member_bids = np.zeros_like(member_bids)
                submitted[g] = 0.0
            bids[:, cols] = member_bids
        return bids, submitted

    def step(self, mean_bids: Sequence[float]) -> GroupedStepResult:
        bids, submitted = self.bid_matrix(mean_bids)
        vals, quals, _ = self.current_slice()
        scores = bids * quals
        num_opps = self.num_opportunities
        rows = np.arange(num_opps)
        best_col = scores.argmax(axis=1)
        best_score = scores[rows, best_col]
        sold = best_score > 0.0
        second = np.partition(scores, scores.shape[1] - 2, axis=1)[:, -2]
        opp_payments = np.where(sold & (second > 0.0), second, 0.0)
        winner_cols = np.where(sold, best_col, -1)

        won_totals = np.zeros(self.num_groups)
        payments = np.zeros(self.num_groups)
        winner_group = best_col // self.table.ads_per_group
        np.add.at(won_totals, winner_group[sold], vals[rows, best_col][sold])
        np.add.at(payments, winner_group[sold], opp_payments[sold])

        self.remaining_budgets -= payments
        self.t += 1
        return GroupedStepResult(
            rewards=won_totals / num_opps,
            payments=payments,
            won_values=won_totals,
            submitted_bids=submitted,
            winner_columns=winner_cols,
            opportunity_payments=opp_payments,
            done=self.done,
        )
