"""Episode-stepping auction environment with sampled impression values.

An episode is ``episode_length`` sequential impression opportunities. At
each step every agent observes (remaining budget, current value, timesteps
left), submits a bid, and the single-slot second-price auction from
:mod:`bidsim.auction` decides winner and payment. Values are drawn i.i.d.
per agent per step from a normal distribution clipped below at 0, or
replayed from a fixed matrix.
"""

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .auction import AuctionOutcome, Bid, mask_bid, run_auction


@dataclass(frozen=True)
class GaussianValues:
    """Per-step values ~ Normal(mean, variance), clipped below at 0."""

    mean: float = 0.5
    variance: float = 1.0

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError(f"variance must be >= 0, got {self.variance}")


@dataclass(frozen=True)
class ReplayValues:
    """Per-step values read from a fixed (episode_length, num_agents) matrix."""

    values: np.ndarray

    def row(self, t: int) -> np.ndarray:
        return self.values[t]


ValueSource = Union[GaussianValues, ReplayValues]


@dataclass(frozen=True)
class EpisodeConfig:
    num_agents: int
    episode_length: int
    budgets: tuple
    value_source: ValueSource
    seed: int = 0

    def __post_init__(self):
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")
        if len(self.budgets) != self.num_agents:
            raise ValueError("budgets length must equal num_agents")
        for b in self.budgets:
            if not math.isfinite(b) or b < 0:
                raise ValueError(f"budgets must be finite and >= 0, got {b}")


@dataclass
class EnvState:
    """Mutable per-episode state; one instance per running episode."""

    remaining_budgets: np.ndarray
    current_values: np.ndarray
    step_index: int
    episode_length: int

    @property
    def timesteps_left(self) -> int:
        return self.episode_length - self.step_index

    @property
    def done(self) -> bool:
        return self.timesteps_left <= 0


def sample_value(rng: np.random.Generator, mean: float, variance: float) -> float:
    """Draw one impression value from Normal(mean, variance) clipped at 0."""
    if variance < 0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    if variance == 0:
        return max(0.0, mean)
    return max(0.0, float(rng.normal(mean, math.sqrt(variance))))


def rectified_normal_mean(mean: float, variance: float) -> float:
    """Analytic mean of max(X, 0) for X ~ Normal(mean, variance)."""
    if variance == 0:
        return max(0.0, mean)
    sigma = math.sqrt(variance)
    z = mean / sigma
    cdf = 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))
    pdf = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return mean * cdf + sigma * pdf


def _draw_values(source: ValueSource, t: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(source, ReplayValues):
        if t >= len(source.values):
            return np.zeros(n)
        return np.asarray(source.values[t], dtype=float).copy()
    draws = rng.normal(source.mean, math.sqrt(source.variance), size=n) \
        if source.variance > 0 else np.full(n, source.mean)
    return np.maximum(draws, 0.0)


def initial_state(config: EpisodeConfig, rng: np.random.Generator) -> EnvState:
    return EnvState(
        remaining_budgets=np.asarray(config.budgets, dtype=float).copy(),
        current_values=_draw_values(config.value_source, 0, config.num_agents, rng),
        step_index=0,
        episode_length=config.episode_length,
    )


def step(
    state: EnvState,
    joint_bids: Sequence[Bid],
    rng: np.random.Generator,
    value_source: ValueSource,
) -> tuple:
    """Advance the episode by one auction.

    Bids of agents with exhausted budgets are masked to 0, the auction is
    run against the state's current values, the winner's budget decreases
    by the payment (it may go negative by at most that one payment), and
    the next step's values are drawn. Returns (state, outcome); the state
    is updated in place and returned for convenience.
    """
    if state.done:
        raise RuntimeError("cannot step a terminated episode")
    if len(joint_bids) != len(state.remaining_budgets):
        raise ValueError("joint_bids length must equal num_agents")

    masked = [
        mask_bid(b, state.remaining_budgets[i]) for i, b in enumerate(joint_bids)
    ]
    outcome = run_auction(masked, state.current_values)
    if outcome.winner is not None:
        pos = outcome.win_flags.index(1)
        state.remaining_budgets[pos] -= outcome.payment

    state.step_index += 1
    n = len(state.remaining_budgets)
    if state.done:
        state.current_values = np.zeros(n)
    else:
        state.current_values = _draw_values(value_source, state.step_index, n, rng)
    return state, outcome


class SampledValueEnv:
    """Sequential-episode wrapper owning the config and per-episode RNG.

    Each episode draws its value matrix up front from an RNG split off the
    base seed and the episode counter, so traces are reproducible no matter
    how many episodes ran before.
    """

    def __init__(self, config: EpisodeConfig):
        self.config = config
        self.num_agents = config.num_agents
        self.episode_length = config.episode_length
        self._episode_counter = 0
        self._state = None
        self._source = None

    def reset(self, episode_index: int = None) -> EnvState:
        if episode_index is None:
            episode_index = self._episode_counter
        self._episode_counter = episode_index + 1
        rng = np.random.default_rng(
            np.random.SeedSequence(self.config.seed, spawn_key=(episode_index,))
        )
        src = self.config.value_source
        if isinstance(src, GaussianValues):
            # pre-draw the whole episode's value matrix with one RNG pass
            matrix = np.empty((self.episode_length, self.num_agents))
            raw = rng.normal(
                src.mean,
                math.sqrt(src.variance) if src.variance > 0 else 0.0,
                size=matrix.shape,
            ) if src.variance > 0 else np.full(matrix.shape, src.mean)
            matrix[:] = np.maximum(raw, 0.0)
            src = ReplayValues(matrix)
        self._source = src
        self._rng = rng
        self._state = EnvState(
            remaining_budgets=np.asarray(self.config.budgets, dtype=float).copy(),
            current_values=np.asarray(self._source.row(0), dtype=float).copy(),
            step_index=0,
            episode_length=self.episode_length,
        )
        return self._state

    @property
    def state(self) -> EnvState:
        return self._state

    def step(self, amounts: Sequence[float]) -> tuple:
        bids = [Bid(agent_id=i, amount=float(a)) for i, a in enumerate(amounts)]
        return step(self._state, bids, self._rng, self._source)

    def episode_values(self) -> np.ndarray:
        """The (T, n) value matrix of the current episode."""
        return self._source.values
