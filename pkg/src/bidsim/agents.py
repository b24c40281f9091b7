"""Agent method roster and the network bundles that implement them.

Seven methods share one episode loop and differ only in how rewards are
shaped and which networks exist:

* MSB: no learning, every ad bids its logged manual bid.
* DQN-S: each agent trains alone against manual-bid opponents.
* CM-IL: independent learners, raw competitive rewards, shared network.
* CO-IL: like CM-IL but every agent receives the summed reward.
* MIX-IL: summed reward split by the bid softmax at temperature tau.
* MAAB: MIX-IL plus learned adversarial bar agents gating rewards.
* MAAB-fix: MIX-IL plus a fixed bar level gating rewards (no bar nets).
"""

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .learner import (
    ActionGrid,
    ObservationCodec,
    QNet,
    RMSProp,
    load_checkpoint,
    save_checkpoint,
    select_actions,
)
from .rewards import RewardMode, assign_rewards, gated_rewards


@dataclass(frozen=True)
class AgentKind:
    """What a method trains and how it shapes rewards."""

    name: str
    trains: bool
    shared_net: bool
    single_agent_training: bool
    reward_mode: Optional[RewardMode]
    learned_bar: bool = False
    fixed_bar: Optional[float] = None

    @classmethod
    def msb(cls) -> "AgentKind":
        return cls("MSB", False, False, False, None)

    @classmethod
    def dqns(cls) -> "AgentKind":
        return cls("DQN-S", True, False, True, RewardMode.competitive())

    @classmethod
    def cmil(cls) -> "AgentKind":
        return cls("CM-IL", True, True, False, RewardMode.competitive())

    @classmethod
    def coil(cls) -> "AgentKind":
        return cls("CO-IL", True, True, False, RewardMode.cooperative())

    @classmethod
    def mixil(cls, tau: float) -> "AgentKind":
        return cls("MIX-IL", True, True, False, RewardMode.trca(tau))

    @classmethod
    def maab(cls, tau: float) -> "AgentKind":
        return cls("MAAB", True, True, False, RewardMode.trca(tau), learned_bar=True)

    @classmethod
    def maab_fix(cls, tau: float, bar: float) -> "AgentKind":
        if bar < 0:
            raise ValueError(f"fixed bar must be >= 0, got {bar}")
        return cls("MAAB-fix", True, True, False, RewardMode.trca(tau), fixed_bar=bar)

    @property
    def gated(self) -> bool:
        return self.learned_bar or self.fixed_bar is not None

    @property
    def tau(self) -> Optional[float]:
        if self.reward_mode is not None and self.reward_mode.kind == "trca":
            return self.reward_mode.tau
        return None


def parse_kind(name: str, tau: Optional[float] = None, bar: Optional[float] = None) -> AgentKind:
    """Build an AgentKind from a CLI-style method name plus parameters."""
    key = name.strip().lower().replace("_", "-")
    if key == "msb":
        return AgentKind.msb()
    if key == "dqn-s":
        return AgentKind.dqns()
    if key == "cm-il":
        return AgentKind.cmil()
    if key == "co-il":
        return AgentKind.coil()
    needs_tau = {"mix-il": AgentKind.mixil, "maab": AgentKind.maab,
                 "maab-fix": AgentKind.maab_fix}
    if key not in needs_tau:
        raise ValueError(f"unknown method {name!r}")
    if tau is None:
        raise ValueError(f"method {name!r} needs a temperature (tau)")
    if key == "maab-fix":
        if bar is None:
            raise ValueError("MAAB-fix needs a fixed bar level")
        return AgentKind.maab_fix(tau, bar)
    return needs_tau[key](tau)


class AgentBundle:
    """Networks, targets, and optimizers for one method instance.

    Shared-net methods hold a single network driven with one-hot agent
    ids; DQN-S holds one network per agent. MAAB adds a shared bar
    network whose agents bid bar levels on the same action grid.
    """

    def __init__(
        self,
        kind: AgentKind,
        codec: ObservationCodec,
        action_grid: ActionGrid,
        seed: int = 0,
    ):
        self.kind = kind
        self.codec = codec
        self.action_grid = action_grid
        self.num_agents = codec.num_agents
        self.nets = []
        self.target_nets = []
        self.optimizers = []
        self.bar_net = None
        self.bar_target = None
        self.bar_optimizer = None
        if kind.trains:
            count = 1 if kind.shared_net else self.num_agents
            for i in range(count):
                rng = np.random.default_rng(
                    np.random.SeedSequence(seed, spawn_key=(0, i))
                )
                net = QNet(codec.obs_dim, len(action_grid), rng=rng)
                target = net.clone()
                self.nets.append(net)
                self.target_nets.append(target)
                self.optimizers.append(RMSProp(net))
        if kind.learned_bar:
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
            self.bar_net = QNet(codec.obs_dim, len(action_grid), rng=rng)
            self.bar_target = self.bar_net.clone()
            self.bar_optimizer = RMSProp(self.bar_net)

    def act(
        self, obs: np.ndarray, epsilon: float, rng: np.random.Generator
    ) -> np.ndarray:
        """Bid actions for all agents; zeros for the non-learning baseline."""
        if not self.kind.trains:
            return np.zeros(self.num_agents, dtype=int)
        if self.kind.shared_net:
            return select_actions(self.nets[0], obs, epsilon, rng)
        return np.array([
            select_actions(self.nets[i], obs[i:i + 1], epsilon, rng)[0]
            for i in range(self.num_agents)
        ])

    def bar_levels(
        self, obs: np.ndarray, epsilon: float, rng: np.random.Generator
    ) -> tuple:
        """(bar levels, bar actions) for gating; (None, None) when ungated."""
        if self.kind.learned_bar:
            actions = select_actions(self.bar_net, obs, epsilon, rng)
            return self.action_grid.amounts(actions), actions
        if self.kind.fixed_bar is not None:
            return np.full(self.num_agents, self.kind.fixed_bar), None
        return None, None

    def training_rewards(
        self,
        submitted_bids: np.ndarray,
        raw_rewards: np.ndarray,
        payment: float,
        bar_levels: Optional[np.ndarray] = None,
    ) -> tuple:
        """(bidder rewards, bar rewards or None) for one training step."""
        assigned = assign_rewards(submitted_bids, raw_rewards, self.kind.reward_mode)
        if not self.kind.gated:
            return assigned, None
        if bar_levels is None:
            raise ValueError("gated methods need bar levels")
        bidder, bar = gated_rewards(submitted_bids, bar_levels, assigned, payment)
        if not self.kind.learned_bar:
            bar = None
        return bidder, bar

    def sync_targets(self) -> None:
        for net, target in zip(self.nets, self.target_nets):
            target.copy_from(net)
        if self.bar_target is not None:
            self.bar_target.copy_from(self.bar_net)

    def save(self, stem: str) -> None:
        """Write {stem}.manifest.json plus one .npz per network."""
        manifest = {
            "kind": {
                "name": self.kind.name,
                "tau": self.kind.tau,
                "fixed_bar": self.kind.fixed_bar,
            },
            "num_nets": len(self.nets),
            "has_bar": self.bar_net is not None,
            "codec": {
                "num_agents": self.codec.num_agents,
                "episode_length": self.codec.episode_length,
                "initial_budgets": list(self.codec.initial_budgets),
            },
            "action_grid": {
                "low": self.action_grid.low,
                "high": self.action_grid.high,
                "num_actions": self.action_grid.num_actions,
            },
        }
        os.makedirs(os.path.dirname(os.path.abspath(stem)), exist_ok=True)
        for i, net in enumerate(self.nets):
            save_checkpoint(
                f"{stem}.net{i}.npz", net, self.optimizers[i],
                codec=self.codec, action_grid=self.action_grid,
            )
        if self.bar_net is not None:
            save_checkpoint(
                f"{stem}.bar.npz", self.bar_net, self.bar_optimizer,
                codec=self.codec, action_grid=self.action_grid,
            )
        with open(f"{stem}.manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, stem: str) -> "AgentBundle":
        with open(f"{stem}.manifest.json") as fh:
            manifest = json.load(fh)
        kind = parse_kind(
            manifest["kind"]["name"],
            tau=manifest["kind"]["tau"],
            bar=manifest["kind"]["fixed_bar"],
        )
        c = manifest["codec"]
        codec = ObservationCodec(
            num_agents=c["num_agents"],
            episode_length=c["episode_length"],
            initial_budgets=tuple(c["initial_budgets"]),
        )
        g = manifest["action_grid"]
        bundle = cls(kind, codec, ActionGrid(g["low"], g["high"], g["num_actions"]))
        bundle.nets = []
        bundle.target_nets = []
        bundle.optimizers = []
        for i in range(manifest["num_nets"]):
            state = load_checkpoint(f"{stem}.net{i}.npz")
            bundle.nets.append(state["qnet"])
            bundle.target_nets.append(state["qnet"].clone())
            bundle.optimizers.append(state["optimizer"] or RMSProp(state["qnet"]))
        if manifest["has_bar"]:
            state = load_checkpoint(f"{stem}.bar.npz")
            bundle.bar_net = state["qnet"]
            bundle.bar_target = state["qnet"].clone()
            bundle.bar_optimizer = state["optimizer"] or RMSProp(state["qnet"])
        return bundle
