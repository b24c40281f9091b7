"""Command-line entry point.

Subcommands: gen-logs (synthesize an impression log CSV), train (one
training run writing a metrics CSV), grid (the two-agent budget sweep),
evaluate (reload a checkpoint and score it), report (aggregate CSVs and
render figures). Exit codes: 0 success, 1 configuration problem, 2
runtime failure.
"""

import argparse
import os
import sys
from typing import Optional, Sequence

from . import config as cfgmod
from .agents import AgentBundle, parse_kind
from .errors import ConfigurationError, LogParseError, LogSchemaError, TrainingError
from .grid import GRID_B0, GRID_EPISODES, GRID_RATIOS, run_grid, write_grid_csv
from .logs import LogConfig, generate_log, read_log, write_log
from .meanfield import GroupedLogEnv
from .report import render_report, write_episode_trace, write_metrics_csv
from .env import EpisodeConfig, GaussianValues, SampledValueEnv
from .trainer import (
    EVAL_EPISODES,
    EVAL_EVERY,
    GroupedAdapter,
    TWO_AGENT_VALUE_MEAN,
    TWO_AGENT_VALUE_VARIANCE,
    TwoAgentAdapter,
    episode_trace,
    evaluate,
    train_grouped,
    train_two_agent,
)

GROUPED_RATIOS_DEFAULT = (1.5, 0.5, 1.0)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bidsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", help="JSON config supplying defaults")
        return p

    p = add("gen-logs", "write a synthetic impression log CSV")
    p.add_argument("--out", help="output CSV path")
    p.add_argument("--episodes", type=int, help="episodes in the log")
    p.add_argument("--timesteps", type=int, help="timesteps per episode")
    p.add_argument("--opportunities", type=int, help="opportunities per timestep")
    p.add_argument("--ads-per-group", type=int, help="candidate ads per group")
    p.add_argument("--seed", type=int, help="generator seed")

    p = add("train", "train one method and write its metrics CSV")
    p.add_argument("--env", choices=["two-agent", "grouped"])
    p.add_argument("--method", help="MSB, DQN-S, CM-IL, CO-IL, MIX-IL, MAAB, MAAB-fix")
    p.add_argument("--tau", type=float, help="temperature for MIX-IL/MAAB/MAAB-fix")
    p.add_argument("--bar", type=float, help="fixed bar level for MAAB-fix")
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int, help="two-agent training episodes")
    p.add_argument("--steps", type=int, help="grouped training env steps")
    p.add_argument("--b0", type=float, help="budget scale")
    p.add_argument("--ratio", type=float, help="agent 1 budget share (two-agent)")
    p.add_argument("--ratios", help="per-group budget ratios (grouped), e.g. 1.5,0.5,1")
    p.add_argument("--log", help="impression log CSV (grouped)")
    p.add_argument("--eval-every", type=int)
    p.add_argument("--eval-episodes", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--run-id")
    p.add_argument("--save", help="checkpoint stem to write")

    p = add("grid", "two-agent sweep over budget scale and share")
    p.add_argument("--methods", help="comma-separated method names")
    p.add_argument("--tau", type=float)
    p.add_argument("--bar", type=float)
    p.add_argument("--b0s", dest="b0_values", help="budget scales, e.g. 0.25,0.5,0.75,1")
    p.add_argument("--ratios", help="agent 1 shares, e.g. 0.3,0.5,0.7")
    p.add_argument("--seeds", help="training seeds, e.g. 0,1,2")
    p.add_argument("--episodes", type=int)
    p.add_argument("--workers", type=int, help="parallel worker processes")
    p.add_argument("--out-dir")

    p = add("evaluate", "reload a checkpoint and run greedy test episodes")
    p.add_argument("--checkpoint", help="checkpoint stem written by train --save")
    p.add_argument("--log", help="impression log CSV for grouped checkpoints")
    p.add_argument("--episodes", type=int, help="test episodes to average")
    p.add_argument("--seed", type=int, help="environment seed (two-agent)")
    p.add_argument("--trace", help="write a per-step episode trace CSV here")

    p = add("report", "aggregate metrics/grid CSVs and render figures")
    p.add_argument("--metrics", nargs="*", help="metrics CSV paths")
    p.add_argument("--grid", help="grid CSV path")
    p.add_argument("--out-dir")

    return parser


def _cmd_gen_logs(args, cfg) -> int:
    out = cfgmod.require(cfgmod.pick(args.out, cfg, "out"), "out")
    log_config = LogConfig(
        num_episodes=cfgmod.positive_int(
            cfgmod.pick(args.episodes, cfg, "log_episodes", 10), "episodes"),
        episode_length=cfgmod.positive_int(
            cfgmod.pick(args.timesteps, cfg, "timesteps", 60), "timesteps"),
        opportunities_per_timestep=cfgmod.positive_int(
            cfgmod.pick(args.opportunities, cfg, "opportunities", 20), "opportunities"),
        ads_per_group=cfgmod.positive_int(
            cfgmod.pick(args.ads_per_group, cfg, "ads_per_group", 4), "ads-per-group"),
        seed=int(cfgmod.pick(args.seed, cfg, "log_seed", 0)),
    )
    table = generate_log(log_config)
    parent = os.path.dirname(os.path.abspath(out))
    os.makedirs(parent, exist_ok=True)
    write_log(out, table)
    rows = (table.num_episodes * table.episode_length
            * table.opportunities_per_timestep * table.values.shape[3])
    print(f"wrote {rows} impression rows to {out}")
    return 0


def _print_eval(result, group_names) -> None:
    for name, raw, norm, pay in zip(
        group_names, result.raw_values, result.norm_values, result.payments
    ):
        print(f"  {name}: value={raw:.4f} norm_value={norm:.4f} payment={pay:.4f}")
    print(f"  social_welfare={result.social_welfare:.4f} "
          f"revenue={result.revenue:.4f}")


def _cmd_train(args, cfg) -> int:
    env = cfgmod.require(cfgmod.pick(args.env, cfg, "env"), "env")
    method = cfgmod.require(cfgmod.pick(args.method, cfg, "method"), "method")
    tau = cfgmod.pick(args.tau, cfg, "tau")
    bar = cfgmod.pick(args.bar, cfg, "bar")
    try:
        kind = parse_kind(method, tau=tau, bar=bar)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    seed = int(cfgmod.pick(args.seed, cfg, "seed", 0))
    b0 = cfgmod.positive_float(cfgmod.pick(args.b0, cfg, "b0",
                                           1.0 if env == "two-agent" else 0.25), "b0")
    out_dir = cfgmod.pick(args.out_dir, cfg, "out_dir", ".")
    eval_every = cfgmod.positive_int(
        cfgmod.pick(args.eval_every, cfg, "eval_every", EVAL_EVERY), "eval-every")
    eval_episodes = cfgmod.positive_int(
        cfgmod.pick(args.eval_episodes, cfg, "eval_episodes", EVAL_EPISODES),
        "eval-episodes")
    run_id = cfgmod.pick(args.run_id, cfg, "run_id")

    if env == "two-agent":
        episodes = cfgmod.positive_int(
            cfgmod.pick(args.episodes, cfg, "episodes", GRID_EPISODES), "episodes")
        ratio = cfgmod.open_ratio(cfgmod.pick(args.ratio, cfg, "ratio", 0.5), "ratio")
        if not kind.trains or kind.single_agent_training:
            raise ConfigurationError(
                f"{kind.name} is not trainable in the two-agent environment")
        result = train_two_agent(
            kind, seed, episodes, b0, ratio, run_id=run_id,
            eval_every=eval_every, eval_episodes=eval_episodes,
        )
        group_names = ("agent1", "agent2")
    else:
        steps = cfgmod.positive_int(
            cfgmod.pick(args.steps, cfg, "steps", 200_000), "steps")
        ratios = cfgmod.float_list(
            cfgmod.pick(args.ratios, cfg, "ratios", list(GROUPED_RATIOS_DEFAULT)),
            "ratios")
        log_path = cfgmod.require(cfgmod.pick(args.log, cfg, "log"), "log")
        if not os.path.exists(log_path):
            raise ConfigurationError(f"log file not found: {log_path}")
        table = read_log(log_path)
        if len(ratios) != table.num_groups:
            raise ConfigurationError(
                f"ratios must have {table.num_groups} entries, got {len(ratios)}")
        result = train_grouped(
            kind, table, seed, steps, b0, ratios, run_id=run_id,
            eval_every=eval_every, eval_episodes=eval_episodes,
        )
        group_names = table.group_names

    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, f"metrics_{result.run_id}.csv")
    write_metrics_csv(metrics_path, result.metrics)
    save_stem = cfgmod.pick(args.save, cfg, "save")
    if save_stem:
        result.bundle.save(save_stem)
        print(f"checkpoint written to {save_stem}.*")
    print(f"run {result.run_id}: {result.counters.get('global_steps', 0)} steps, "
          f"metrics in {metrics_path}")
    _print_eval(result.final_eval, group_names)
    return 0


def _cmd_grid(args, cfg) -> int:
    methods = cfgmod.pick(args.methods, cfg, "methods", "CM-IL,CO-IL")
    if isinstance(methods, str):
        methods = [m.strip() for m in methods.split(",") if m.strip()]
    if not methods:
        raise ConfigurationError("methods must not be empty")
    tau = cfgmod.pick(args.tau, cfg, "tau")
    bar = cfgmod.pick(args.bar, cfg, "bar")
    for m in methods:
        try:
            k = parse_kind(m, tau=tau, bar=bar)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None
        if not k.trains or k.single_agent_training:
            raise ConfigurationError(
                f"{k.name} is not trainable in the two-agent grid")
    b0_values = cfgmod.float_list(
        cfgmod.pick(args.b0_values, cfg, "b0_values", list(GRID_B0)), "b0s")
    ratios = cfgmod.float_list(
        cfgmod.pick(args.ratios, cfg, "ratios", list(GRID_RATIOS)), "ratios")
    for r in ratios:
        cfgmod.open_ratio(r, "ratios")
    seeds = cfgmod.int_list(cfgmod.pick(args.seeds, cfg, "seeds", [0, 1, 2]), "seeds")
    episodes = cfgmod.positive_int(
        cfgmod.pick(args.episodes, cfg, "episodes", GRID_EPISODES), "episodes")
    workers = cfgmod.positive_int(cfgmod.pick(args.workers, cfg, "workers", 1), "workers")
    out_dir = cfgmod.pick(args.out_dir, cfg, "out_dir", ".")
    os.makedirs(out_dir, exist_ok=True)
    rows = run_grid(methods, b0_values, ratios, seeds, episodes,
                    tau=tau, bar=bar, workers=workers)
    path = os.path.join(out_dir, "grid.csv")
    write_grid_csv(path, rows)
    print(f"wrote {len(rows)} grid rows to {path}")
    return 0


def _adapter_for_bundle(bundle: AgentBundle, log_path: Optional[str], seed: int):
    codec = bundle.codec
    if log_path is not None:
        table = read_log(log_path)
        if table.num_groups != codec.num_agents:
            raise ConfigurationError(
                f"checkpoint expects {codec.num_agents} groups, "
                f"log has {table.num_groups}")
        msb = range(table.num_groups) if not bundle.kind.trains else ()
        env = GroupedLogEnv(table, codec.initial_budgets, msb_groups=msb)
        return GroupedAdapter(env, codec), table.group_names
    env_config = EpisodeConfig(
        num_agents=codec.num_agents,
        episode_length=codec.episode_length,
        budgets=codec.initial_budgets,
        value_source=GaussianValues(TWO_AGENT_VALUE_MEAN, TWO_AGENT_VALUE_VARIANCE),
        seed=seed,
    )
    adapter = TwoAgentAdapter(SampledValueEnv(env_config), codec)
    return adapter, adapter.group_names


def _cmd_evaluate(args, cfg) -> int:
    stem = cfgmod.require(cfgmod.pick(args.checkpoint, cfg, "checkpoint"), "checkpoint")
    if not os.path.exists(f"{stem}.manifest.json"):
        raise ConfigurationError(f"no checkpoint manifest at {stem}.manifest.json")
    bundle = AgentBundle.load(stem)
    log_path = cfgmod.pick(args.log, cfg, "log")
    if log_path is not None and not os.path.exists(log_path):
        raise ConfigurationError(f"log file not found: {log_path}")
    seed = int(cfgmod.pick(args.seed, cfg, "seed", 0))
    episodes = cfgmod.positive_int(
        cfgmod.pick(args.episodes, cfg, "eval_episodes", EVAL_EPISODES), "episodes")
    adapter, group_names = _adapter_for_bundle(bundle, log_path, seed)
    result = evaluate(bundle, adapter, episodes)
    print(f"evaluated {bundle.kind.name} over {episodes} test episodes")
    _print_eval(result, group_names)
    trace_path = cfgmod.pick(args.trace, cfg, "trace")
    if trace_path:
        write_episode_trace(trace_path, episode_trace(bundle, adapter, 0))
        print(f"trace written to {trace_path}")
    return 0


def _cmd_report(args, cfg) -> int:
    metrics = list(args.metrics or [])
    if not metrics and "metrics" in cfg:
        m = cfg["metrics"]
        metrics = [m] if isinstance(m, str) else list(m)
    grid_path = cfgmod.pick(args.grid, cfg, "grid")
    if not metrics and grid_path is None:
        raise ConfigurationError("report needs --metrics and/or --grid")
    for p in metrics:
        if not os.path.exists(p):
            raise ConfigurationError(f"metrics file not found: {p}")
    if grid_path is not None and not os.path.exists(grid_path):
        raise ConfigurationError(f"grid file not found: {grid_path}")
    out_dir = cfgmod.pick(args.out_dir, cfg, "out_dir", "report")
    written = render_report(metrics, out_dir, grid_path)
    for path in written:
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "gen-logs": _cmd_gen_logs,
    "train": _cmd_train,
    "grid": _cmd_grid,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise ConfigurationError("no subcommand given (see --help)")
        cfg = cfgmod.load_config(getattr(args, "config", None))
        return _COMMANDS[args.command](args, cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (LogSchemaError, LogParseError) as exc:
        print(f"log error: {exc}", file=sys.stderr)
        return 1
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything unexpected is a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
