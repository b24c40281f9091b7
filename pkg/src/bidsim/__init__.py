"""Multi-agent auto-bidding simulation and training toolkit."""

from .auction import AuctionOutcome, Bid, mask_bid, run_auction
from .agents import AgentBundle, AgentKind, parse_kind
from .env import (
    EnvState,
    EpisodeConfig,
    GaussianValues,
    ReplayValues,
    SampledValueEnv,
    rectified_normal_mean,
    sample_value,
)
from .errors import ConfigurationError, LogParseError, LogSchemaError, TrainingError
from .learner import (
    ActionGrid,
    EpisodeBatch,
    EpsilonSchedule,
    ObservationCodec,
    QNet,
    RMSProp,
    ReplayBuffer,
    load_checkpoint,
    save_checkpoint,
    select_action,
    select_actions,
    td_targets,
    train_step,
)
from .logs import (
    GROUPS,
    ImpressionRecord,
    LogConfig,
    LogTable,
    generate_log,
    iter_records,
    read_log,
    write_log,
)
from .meanfield import (
    GroupedLogEnv,
    GroupedStepResult,
    derive_bid,
    episode_v_max,
    group_by_objective,
    group_payment,
    group_reward,
    mean_value,
)
from .rewards import (
    ALWAYS_COOPERATIVE,
    RewardMode,
    assign_rewards,
    bar_gate,
    cooperation_threshold,
    gated_rewards,
    normalize_episode_reward,
    trca_weights,
    verify_theorem,
)
from .trainer import (
    EvalResult,
    TrainResult,
    episode_trace,
    evaluate,
    grouped_budgets,
    train_grouped,
    train_two_agent,
    two_agent_budgets,
)

__version__ = "0.1.0"
