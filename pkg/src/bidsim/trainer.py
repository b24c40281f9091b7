"""Training and evaluation harness shared by every agent method.

One episode loop serves both environments: act epsilon-greedily, step,
shape rewards through the method's mode (and bar gate when present),
store the whole episode in replay, then do one network update for the
bidders and two for the bar agents, syncing target networks on a fixed
episode cadence. Exploration anneals on the global environment step
counter. Evaluation runs greedily on a fixed set of test episodes with
bar agents removed and never touches parameters or replay.

Rewards are normalized during training by the episode's best attainable
value per agent so returns live on a comparable scale across episodes
and environments; evaluation reports both raw and normalized totals.
"""

import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .agents import AgentBundle, AgentKind
from .errors import TrainingError
from .env import (
    EpisodeConfig,
    GaussianValues,
    SampledValueEnv,
    rectified_normal_mean,
)
from .learner import (
    ActionGrid,
    BATCH_SIZE,
    EpsilonSchedule,
    EpisodeBatch,
    GAMMA,
    ObservationCodec,
    ReplayBuffer,
    TARGET_SYNC_EVERY,
    train_step,
)
from .meanfield import GroupedLogEnv
from .logs import LogTable

EVAL_EVERY = 10_000
EVAL_EPISODES = 5
TWO_AGENT_EPISODE_LENGTH = 100
TWO_AGENT_VALUE_MEAN = 0.5
TWO_AGENT_VALUE_VARIANCE = 1.0
BID_CAP = 5.0
# test episodes use an index range training can never reach
EVAL_EPISODE_BASE = 1_000_000_000


@dataclass
class StepData:
    """Environment feedback for one timestep, normalized across env types."""

    submitted: np.ndarray
    raw_rewards: np.ndarray
    won_values: np.ndarray
    payments: np.ndarray
    wins: np.ndarray
    total_payment: float
    done: bool


class TwoAgentAdapter:
    """Drives the sampled-value auction env through the common loop."""

    def __init__(self, env: SampledValueEnv, codec: ObservationCodec):
        self.env = env
        self.codec = codec
        self.num_agents = env.num_agents
        self.group_names = tuple(f"agent{i + 1}" for i in range(env.num_agents))

    def reset(self, episode_index: int) -> None:
        self.env.reset(episode_index)

    def reset_eval(self, test_index: int) -> None:
        self.env.reset(EVAL_EPISODE_BASE + test_index)

    @property
    def done(self) -> bool:
        return self.env.state.done

    def observations(self) -> np.ndarray:
        s = self.env.state
        return self.codec.encode_all(
            s.remaining_budgets, s.current_values, s.timesteps_left
        )

    def value_denominators(self) -> np.ndarray:
        """Best attainable raw value per agent: win every step."""
        return self.env.episode_values().sum(axis=0)

    def reward_scale(self) -> np.ndarray:
        return self.value_denominators()

    def current_values(self) -> np.ndarray:
        return self.env.state.current_values.copy()

    def remaining_budgets(self) -> np.ndarray:
        return self.env.state.remaining_budgets.copy()

    def step(self, amounts: Sequence[float]) -> StepData:
        budgets = self.env.state.remaining_budgets
        submitted = np.where(budgets > 0, np.asarray(amounts, dtype=float), 0.0)
        state, outcome = self.env.step(amounts)
        raw = np.asarray(outcome.raw_rewards, dtype=float)
        payments = np.zeros(self.num_agents)
        if outcome.winner is not None:
            payments[outcome.win_flags.index(1)] = outcome.payment
        return StepData(
            submitted=submitted,
            raw_rewards=raw,
            won_values=raw.copy(),
            payments=payments,
            wins=np.asarray(outcome.win_flags, dtype=float),
            total_payment=float(outcome.payment),
            done=state.done,
        )


class GroupedAdapter:
    """Drives the grouped log-replay env through the common loop."""

    def __init__(self, env: GroupedLogEnv, codec: ObservationCodec):
        self.env = env
        self.codec = codec
        self.num_agents = env.num_groups
        self.group_names = env.table.group_names

    def reset(self, episode_index: int) -> None:
        self.env.reset(episode_index)

    def reset_eval(self, test_index: int) -> None:
        self.env.reset(test_index % self.env.table.num_episodes)

    @property
    def done(self) -> bool:
        return self.env.done

    def observations(self) -> np.ndarray:
        return self.codec.encode_all(
            self.env.remaining_budgets,
            self.env.current_mean_values(),
            self.env.timesteps_left,
        )

    def value_denominators(self) -> np.ndarray:
        return self.env.v_max()

    def reward_scale(self) -> np.ndarray:
        # step rewards are per-opportunity means, so scale the denominator too
        return self.env.v_max() / self.env.num_opportunities

    def current_values(self) -> np.ndarray:
        return self.env.current_mean_values()

    def remaining_budgets(self) -> np.ndarray:
        return self.env.remaining_budgets.copy()

    def step(self, amounts: Sequence[float]) -> StepData:
        res = self.env.step(amounts)
        wins = np.zeros(self.num_agents)
        sold = res.winner_columns >= 0
        if sold.any():
            groups = res.winner_columns[sold] // self.env.table.ads_per_group
            wins[np.unique(groups)] = 1.0
        return StepData(
            submitted=res.submitted_bids,
            raw_rewards=res.rewards,
            won_values=res.won_values,
            payments=res.payments,
            wins=wins,
            total_payment=res.total_payment,
            done=res.done,
        )


@dataclass(frozen=True)
class EvalResult:
    """Greedy test-episode averages (bar agents removed)."""

    raw_values: np.ndarray
    norm_values: np.ndarray
    payments: np.ndarray

    @property
    def social_welfare(self) -> float:
        return float(self.norm_values.sum())

    @property
    def raw_welfare(self) -> float:
        return float(self.raw_values.sum())

    @property
    def revenue(self) -> float:
        return float(self.payments.sum())


@dataclass
class TrainResult:
    bundle: AgentBundle
    metrics: List[dict]
    final_eval: EvalResult
    counters: dict
    bid_trace: List[dict]
    run_id: str
    seed: int


def evaluate(bundle: AgentBundle, adapter, num_episodes: int = EVAL_EPISODES) -> EvalResult:
    """Average greedy performance over the fixed test episodes."""
    n = adapter.num_agents
    rng = np.random.default_rng(0)  # untouched at epsilon 0
    raw = np.zeros(n)
    norm = np.zeros(n)
    pay = np.zeros(n)
    for j in range(num_episodes):
        adapter.reset_eval(j)
        denom = adapter.value_denominators()
        ep_raw = np.zeros(n)
        ep_pay = np.zeros(n)
        while not adapter.done:
            obs = adapter.observations()
            actions = bundle.act(obs, 0.0, rng)
            amounts = bundle.action_grid.amounts(actions)
            sd = adapter.step(amounts)
            ep_raw += sd.won_values
            ep_pay += sd.payments
        raw += ep_raw
        pay += ep_pay
        norm += np.where(denom > 0, ep_raw / np.where(denom > 0, denom, 1.0), 0.0)
    return EvalResult(raw / num_episodes, norm / num_episodes, pay / num_episodes)


def metrics_rows(
    run_id: str, seed: int, step: int, group_names: Sequence[str], result: EvalResult
) -> List[dict]:
    rows = []
    for name, value in zip(group_names, result.norm_values):
        rows.append({
            "run_id": run_id, "seed": seed, "step": step,
            "group": name, "metric": "norm_value", "value": float(value),
        })
    rows.append({
        "run_id": run_id, "seed": seed, "step": step,
        "group": "all", "metric": "social_welfare",
        "value": result.social_welfare,
    })
    rows.append({
        "run_id": run_id, "seed": seed, "step": step,
        "group": "all", "metric": "revenue", "value": result.revenue,
    })
    return rows


def kind_label(kind: AgentKind) -> str:
    label = kind.name
    if kind.tau is not None:
        label += f"-tau{kind.tau:g}"
    if kind.fixed_bar is not None:
        label += f"-bar{kind.fixed_bar:g}"
    return label


def _abort_on_nonfinite(loss: float, bundle: AgentBundle, run_id: str,
                        episode_index: int) -> None:
    if math.isfinite(loss):
        return
    stem = os.path.join(tempfile.mkdtemp(prefix="bidsim-abort-"), "checkpoint")
    bundle.save(stem)
    raise TrainingError(
        f"non-finite loss {loss} at episode {episode_index} of run {run_id}; "
        f"diagnostic checkpoint at {stem}")


def _run_training(
    bundle: AgentBundle,
    adapter,
    *,
    seed: int,
    max_episodes: Optional[int] = None,
    max_steps: Optional[int] = None,
    run_id: str,
    eval_every: int = EVAL_EVERY,
    eval_episodes: int = EVAL_EPISODES,
    batch_size: int = BATCH_SIZE,
    sync_every: int = TARGET_SYNC_EVERY,
    gamma: float = GAMMA,
    schedule: Optional[EpsilonSchedule] = None,
    normalize: bool = True,
    active_agent: Optional[int] = None,
    record_metrics: bool = True,
) -> TrainResult:
    """The shared episode loop. active_agent restricts learning to one index."""
    if max_episodes is None and max_steps is None:
        raise ValueError("need max_episodes or max_steps")
    if schedule is None:
        schedule = EpsilonSchedule()
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    replay = ReplayBuffer()
    bar_replay = ReplayBuffer() if bundle.kind.learned_bar else None
    counters = {
        "episodes": 0, "global_steps": 0, "train_updates": 0,
        "bar_updates": 0, "target_syncs": 0, "replay_insertions": 0,
    }
    metrics: List[dict] = []
    bid_trace: List[dict] = []
    global_step = 0
    next_eval = eval_every
    episode_index = 0
    last_eval_step = -1

    def net_index() -> int:
        return 0 if bundle.kind.shared_net else int(active_agent)

    while True:
        if max_episodes is not None and episode_index >= max_episodes:
            break
        if max_steps is not None and global_step >= max_steps:
            break
        adapter.reset(episode_index)
        scale = adapter.reward_scale() if normalize else np.ones(adapter.num_agents)
        scale = np.where(scale > 0, scale, 1.0)
        obs = adapter.observations()
        obs_hist, act_hist, rew_hist, next_hist, term_hist = [], [], [], [], []
        bar_act_hist, bar_rew_hist = [], []
        bid_sum = np.zeros(adapter.num_agents)
        bar_sum = np.zeros(adapter.num_agents)
        steps_in_episode = 0
        while not adapter.done:
            eps = schedule.value(global_step)
            actions = bundle.act(obs, eps, rng)
            amounts = bundle.action_grid.amounts(actions)
            bar_levels, bar_actions = bundle.bar_levels(obs, eps, rng)
            sd = adapter.step(amounts)
            bidder_r, bar_r = bundle.training_rewards(
                sd.submitted, sd.raw_rewards, sd.total_payment, bar_levels
            )
            bidder_r = bidder_r / scale
            if bar_r is not None:
                bar_r = bar_r / scale
            next_obs = adapter.observations()
            obs_hist.append(obs)
            act_hist.append(actions)
            rew_hist.append(bidder_r)
            next_hist.append(next_obs)
            term_hist.append(1.0 if sd.done else 0.0)
            if bar_actions is not None:
                bar_act_hist.append(bar_actions)
                bar_rew_hist.append(bar_r)
            bid_sum += amounts
            if bar_levels is not None:
                bar_sum += bar_levels
            obs = next_obs
            global_step += 1
            steps_in_episode += 1

        n = adapter.num_agents
        term = np.repeat(np.asarray(term_hist), n)
        if active_agent is None:
            batch = EpisodeBatch(
                obs=np.concatenate(obs_hist),
                actions=np.concatenate(act_hist),
                rewards=np.concatenate(rew_hist),
                next_obs=np.concatenate(next_hist),
                terminal=term,
            )
        else:
            g = active_agent
            batch = EpisodeBatch(
                obs=np.stack([o[g] for o in obs_hist]),
                actions=np.asarray([a[g] for a in act_hist]),
                rewards=np.asarray([r[g] for r in rew_hist]),
                next_obs=np.stack([o[g] for o in next_hist]),
                terminal=np.asarray(term_hist),
            )
        replay.add(batch)
        counters["replay_insertions"] += 1
        if bar_replay is not None:
            bar_replay.add(EpisodeBatch(
                obs=np.concatenate(obs_hist),
                actions=np.concatenate(bar_act_hist),
                rewards=np.concatenate(bar_rew_hist),
                next_obs=np.concatenate(next_hist),
                terminal=term,
            ))

        if replay.ready(batch_size):
            i = net_index()
            stacked = ReplayBuffer.stack(replay.sample(batch_size, rng))
            loss = train_step(
                bundle.nets[i], bundle.target_nets[i], bundle.optimizers[i],
                stacked.obs, stacked.actions, stacked.rewards,
                stacked.next_obs, stacked.terminal, gamma,
            )
            counters["train_updates"] += 1
            _abort_on_nonfinite(loss, bundle, run_id, episode_index)
        if bar_replay is not None and bar_replay.ready(batch_size):
            for _ in range(2):
                bs = ReplayBuffer.stack(bar_replay.sample(batch_size, rng))
                loss = train_step(
                    bundle.bar_net, bundle.bar_target, bundle.bar_optimizer,
                    bs.obs, bs.actions, bs.rewards, bs.next_obs, bs.terminal,
                    gamma,
                )
                counters["bar_updates"] += 1
                _abort_on_nonfinite(loss, bundle, run_id, episode_index)

        counters["episodes"] += 1
        if counters["episodes"] % sync_every == 0:
            bundle.sync_targets()
            counters["target_syncs"] += 1

        bid_trace.append({
            "episode": episode_index,
            "step": global_step,
            "mean_bids": bid_sum / steps_in_episode,
            "mean_bars": (bar_sum / steps_in_episode
                          if bundle.kind.gated else None),
        })
        episode_index += 1

        if record_metrics:
            while next_eval <= global_step:
                result = evaluate(bundle, adapter, eval_episodes)
                metrics.extend(metrics_rows(
                    run_id, seed, global_step, adapter.group_names, result
                ))
                last_eval_step = global_step
                next_eval += eval_every

    final = evaluate(bundle, adapter, eval_episodes)
    if record_metrics and last_eval_step != global_step:
        metrics.extend(metrics_rows(
            run_id, seed, global_step, adapter.group_names, final
        ))
    counters["global_steps"] = global_step
    return TrainResult(
        bundle=bundle,
        metrics=metrics,
        final_eval=final,
        counters=counters,
        bid_trace=bid_trace,
        run_id=run_id,
        seed=seed,
    )


def two_agent_budgets(
    b0: float,
    ratio: float,
    episode_length: int = TWO_AGENT_EPISODE_LENGTH,
    value_mean: float = TWO_AGENT_VALUE_MEAN,
    value_variance: float = TWO_AGENT_VALUE_VARIANCE,
) -> tuple:
    """Split a per-episode spending pool between the two agents.

    The pool is b0 times the expected total value of an episode, so b0 of
    1.0 means the two budgets together can absorb roughly every
    impression at its value; ratio is agent 1's share of the pool.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    if b0 <= 0:
        raise ValueError(f"b0 must be > 0, got {b0}")
    pool = b0 * episode_length * rectified_normal_mean(value_mean, value_variance)
    return pool * ratio, pool * (1.0 - ratio)


def make_two_agent_setup(
    kind: AgentKind,
    seed: int,
    b0: float,
    ratio: float,
    episode_length: int = TWO_AGENT_EPISODE_LENGTH,
    action_grid: Optional[ActionGrid] = None,
) -> tuple:
    """(bundle, adapter) pair for the sampled-value environment."""
    budgets = two_agent_budgets(b0, ratio, episode_length)
    config = EpisodeConfig(
        num_agents=2,
        episode_length=episode_length,
        budgets=budgets,
        value_source=GaussianValues(TWO_AGENT_VALUE_MEAN, TWO_AGENT_VALUE_VARIANCE),
        seed=seed,
    )
    codec = ObservationCodec(2, episode_length, budgets)
    grid = action_grid or ActionGrid()
    bundle = AgentBundle(kind, codec, grid, seed)
    adapter = TwoAgentAdapter(SampledValueEnv(config), codec)
    return bundle, adapter


def train_two_agent(
    kind: AgentKind,
    seed: int,
    episodes: int,
    b0: float,
    ratio: float,
    *,
    episode_length: int = TWO_AGENT_EPISODE_LENGTH,
    run_id: Optional[str] = None,
    **loop_kwargs,
) -> TrainResult:
    if not kind.trains:
        raise ValueError(f"{kind.name} cannot train in the sampled-value env")
    if kind.single_agent_training:
        raise ValueError(f"{kind.name} needs logged opponents; use the grouped env")
    bundle, adapter = make_two_agent_setup(kind, seed, b0, ratio, episode_length)
    rid = run_id or f"{kind_label(kind)}-b{b0:g}-r{ratio:g}-s{seed}"
    return _run_training(
        bundle, adapter, seed=seed, max_episodes=episodes, run_id=rid,
        **loop_kwargs,
    )


def grouped_budgets(
    table: LogTable,
    b0: float,
    ratios: Sequence[float],
    bid_cap: float = BID_CAP,
) -> np.ndarray:
    """Per-group budgets anchored to spending at maximal bids.

    A probe episode (episode 0, unlimited budgets, every group bidding
    the cap) measures total payments P; group i then gets P * b0 *
    ratios[i].
    """
    if b0 <= 0:
        raise ValueError(f"b0 must be > 0, got {b0}")
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (table.num_groups,):
        raise ValueError(f"ratios must have {table.num_groups} entries")
    if (ratios <= 0).any():
        raise ValueError("ratios must be > 0")
    probe = GroupedLogEnv(table, np.full(table.num_groups, np.inf))
    probe.reset(0)
    total = 0.0
    while not probe.done:
        total += probe.step(np.full(table.num_groups, bid_cap)).total_payment
    return total * b0 * ratios


def make_grouped_setup(
    kind: AgentKind,
    table: LogTable,
    seed: int,
    b0: float,
    ratios: Sequence[float],
    msb_groups: Sequence[int] = (),
    action_grid: Optional[ActionGrid] = None,
) -> tuple:
    budgets = grouped_budgets(table, b0, ratios)
    codec = ObservationCodec(
        table.num_groups, table.episode_length, tuple(float(b) for b in budgets)
    )
    grid = action_grid or ActionGrid()
    bundle = AgentBundle(kind, codec, grid, seed)
    env = GroupedLogEnv(table, budgets, msb_groups=msb_groups)
    return bundle, GroupedAdapter(env, codec)


def train_grouped(
    kind: AgentKind,
    table: LogTable,
    seed: int,
    total_steps: int,
    b0: float,
    ratios: Sequence[float],
    *,
    run_id: Optional[str] = None,
    eval_episodes: int = EVAL_EPISODES,
    **loop_kwargs,
) -> TrainResult:
    """Train (or just evaluate, for the manual baseline) on a log."""
    rid = run_id or f"{kind_label(kind)}-b{b0:g}-s{seed}"
    n = table.num_groups
    if not kind.trains:
        bundle, adapter = make_grouped_setup(
            kind, table, seed, b0, ratios, msb_groups=range(n)
        )
        final = evaluate(bundle, adapter, eval_episodes)
        rows = metrics_rows(rid, seed, 0, adapter.group_names, final)
        return TrainResult(bundle, rows, final, {"episodes": 0, "global_steps": 0},
                           [], rid, seed)
    if kind.single_agent_training:
        bundle, adapter = make_grouped_setup(kind, table, seed, b0, ratios)
        for g in range(n):
            solo_env = GroupedLogEnv(
                table, adapter.env.initial_budgets,
                msb_groups=[h for h in range(n) if h != g],
            )
            solo = GroupedAdapter(solo_env, adapter.codec)
            _run_training(
                bundle, solo, seed=seed, max_steps=total_steps,
                run_id=rid, active_agent=g, record_metrics=False,
                eval_episodes=eval_episodes, **loop_kwargs,
            )
        final = evaluate(bundle, adapter, eval_episodes)
        rows = metrics_rows(rid, seed, total_steps, adapter.group_names, final)
        return TrainResult(bundle, rows, final,
                           {"episodes": 0, "global_steps": total_steps},
                           [], rid, seed)
    bundle, adapter = make_grouped_setup(kind, table, seed, b0, ratios)
    return _run_training(
        bundle, adapter, seed=seed, max_steps=total_steps, run_id=rid,
        eval_episodes=eval_episodes, **loop_kwargs,
    )


def episode_trace(bundle: AgentBundle, adapter, episode_index: int = 0) -> List[dict]:
    """Greedy rollout of one test episode as per-(step, agent) trace rows."""
    rng = np.random.default_rng(0)
    adapter.reset_eval(episode_index)
    rows = []
    t = 0
    while not adapter.done:
        values = adapter.current_values()
        obs = adapter.observations()
        actions = bundle.act(obs, 0.0, rng)
        amounts = bundle.action_grid.amounts(actions)
        sd = adapter.step(amounts)
        budgets = adapter.remaining_budgets()
        for i in range(adapter.num_agents):
            rows.append({
                "step": t,
                "agent_id": i,
                "bid": float(sd.submitted[i]),
                "win": int(sd.wins[i] > 0),
                "payment": float(sd.payments[i]),
                "value": float(values[i]),
                "remaining_budget": float(budgets[i]),
            })
        t += 1
    return rows
