"""Training harness, grid, report, and CLI plumbing tests.

Runs in here are deliberately tiny (short episodes, a handful of
updates): they pin bookkeeping, determinism, and file formats, not
learning quality.
"""

import json
import os
import subprocess

import numpy as np
import pytest

from bidsim.agents import AgentBundle, AgentKind
from bidsim.cli import main
from bidsim.grid import GRID_HEADER, read_grid_csv, run_grid, write_grid_csv
from bidsim.learner import ActionGrid
from bidsim.logs import LOG_HEADER, LogConfig, generate_log, write_log
from bidsim.report import (
    TRACE_HEADER,
    aggregate_metrics,
    plot_bid_trace,
    read_metrics_csv,
    render_report,
    run_label,
    write_episode_trace,
    write_metrics_csv,
)
from bidsim.trainer import (
    episode_trace,
    evaluate,
    grouped_budgets,
    kind_label,
    make_grouped_setup,
    make_two_agent_setup,
    train_grouped,
    train_two_agent,
    two_agent_budgets,
)

POOL_REF = 69.77965574013061  # 100 * E[max(N(0.5, 1), 0)]
RATIOS3 = (1.5, 0.5, 1.0)

FAST = dict(eval_every=10**9, eval_episodes=1)


@pytest.fixture(scope="module")
def table():
    return generate_log(LogConfig(
        num_episodes=2, episode_length=6, opportunities_per_timestep=5,
        ads_per_group=3, seed=11,
    ))


def test_two_agent_budget_pool():
    b1, b2 = two_agent_budgets(1.0, 0.7)
    assert b1 + b2 == pytest.approx(POOL_REF, rel=1e-12)
    assert b1 == pytest.approx(0.7 * POOL_REF, rel=1e-12)
    assert b2 == pytest.approx(0.3 * POOL_REF, rel=1e-12)
    h1, h2 = two_agent_budgets(0.5, 0.3)
    assert h1 + h2 == pytest.approx(0.5 * POOL_REF, rel=1e-12)
    assert h1 == pytest.approx(0.3 * (h1 + h2), rel=1e-12)
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ValueError):
            two_agent_budgets(1.0, bad)
    with pytest.raises(ValueError):
        two_agent_budgets(0.0, 0.5)


def test_grouped_budgets_probe(table):
    budgets = grouped_budgets(table, 0.25, RATIOS3)
    assert budgets.shape == (3,)
    assert (budgets > 0).all()
    # proportional to the ratios and linear in b0
    per_ratio = budgets / np.asarray(RATIOS3)
    assert np.allclose(per_ratio, per_ratio[0], rtol=1e-12)
    assert np.allclose(grouped_budgets(table, 0.5, RATIOS3), 2 * budgets, rtol=1e-12)
    # anchored to total payments of a cap-bidding probe episode
    from bidsim.meanfield import GroupedLogEnv
    probe = GroupedLogEnv(table, np.full(3, np.inf))
    probe.reset(0)
    total = 0.0
    while not probe.done:
        total += probe.step(np.full(3, 5.0)).total_payment
    assert per_ratio[0] == pytest.approx(0.25 * total, rel=1e-12)
    with pytest.raises(ValueError):
        grouped_budgets(table, 0.25, (1.0, 2.0))
    with pytest.raises(ValueError):
        grouped_budgets(table, -1.0, RATIOS3)
    with pytest.raises(ValueError):
        grouped_budgets(table, 0.25, (1.0, 0.0, 1.0))


def test_labels():
    assert kind_label(AgentKind.msb()) == "MSB"
    assert kind_label(AgentKind.mixil(2.0)) == "MIX-IL-tau2"
    assert kind_label(AgentKind.maab_fix(2.0, 4.0)) == "MAAB-fix-tau2-bar4"
    assert run_label("CM-IL-b1-r0.7-s12") == "CM-IL-b1-r0.7"
    assert run_label("MSB-b0.25-s0") == "MSB-b0.25"
    assert run_label("no-seed-marker") == "no-seed-marker"


def test_two_agent_counters_and_trace():
    result = train_two_agent(
        AgentKind.cmil(), 0, 6, 1.0, 0.5, episode_length=10,
        sync_every=3, batch_size=2, **FAST,
    )
    c = result.counters
    assert c["episodes"] == 6
    assert c["global_steps"] == 60
    assert c["replay_insertions"] == 6
    # one bidder update per episode once the buffer holds a full batch
    assert c["train_updates"] == 5
    assert c["bar_updates"] == 0
    assert c["target_syncs"] == 2
    assert len(result.bid_trace) == 6
    first = result.bid_trace[0]
    assert first["mean_bids"].shape == (2,)
    assert first["mean_bars"] is None
    assert result.run_id == "CM-IL-b1-r0.5-s0"


def test_no_updates_before_replay_is_ready():
    result = train_two_agent(
        AgentKind.cmil(), 0, 3, 1.0, 0.5, episode_length=10,
        batch_size=8, **FAST,
    )
    assert result.counters["replay_insertions"] == 3
    assert result.counters["train_updates"] == 0


def test_bar_agent_counters():
    result = train_two_agent(
        AgentKind.maab(1.0), 0, 4, 1.0, 0.5, episode_length=10,
        batch_size=2, **FAST,
    )
    assert result.counters["train_updates"] == 3
    assert result.counters["bar_updates"] == 6  # two bar updates per episode
    assert result.bid_trace[0]["mean_bars"].shape == (2,)


def test_nonfinite_loss_aborts_with_checkpoint():
    from bidsim.errors import TrainingError
    from bidsim.trainer import _run_training

    bundle, adapter = make_two_agent_setup(AgentKind.cmil(), 0, 1.0, 0.5, 5)
    bundle.nets[0].weights[0][:] = np.inf
    with np.errstate(invalid="ignore"):
        with pytest.raises(TrainingError, match="diagnostic checkpoint"):
            _run_training(bundle, adapter, seed=0, max_episodes=2,
                          run_id="abort-test", batch_size=1, **FAST)


def test_evaluate_leaves_parameters_untouched():
    bundle, adapter = make_two_agent_setup(AgentKind.mixil(2.0), 3, 1.0, 0.5, 10)
    before = [w.copy() for w in bundle.nets[0].weights]
    r1 = evaluate(bundle, adapter, 3)
    r2 = evaluate(bundle, adapter, 3)
    for w0, w1 in zip(before, bundle.nets[0].weights):
        assert (w0 == w1).all()
    assert r1.norm_values == pytest.approx(r2.norm_values, abs=0)
    assert r1.revenue == r2.revenue


def test_eval_cadence_records_crossing_step():
    result = train_two_agent(
        AgentKind.cmil(), 0, 3, 1.0, 0.5, episode_length=50,
        eval_every=120, eval_episodes=1,
    )
    # the 120-step boundary is crossed at the end of episode 3 (step 150),
    # which is also the final step: exactly one eval block, no duplicate
    steps = {row["step"] for row in result.metrics}
    assert steps == {150}
    assert len(result.metrics) == 4  # 2 norm_value rows + welfare + revenue
    assert {row["metric"] for row in result.metrics} == {
        "norm_value", "social_welfare", "revenue"}
    groups = [r["group"] for r in result.metrics if r["metric"] == "norm_value"]
    assert groups == ["agent1", "agent2"]
    result = train_two_agent(
        AgentKind.cmil(), 0, 2, 1.0, 0.5, episode_length=50,
        eval_every=50, eval_episodes=1,
    )
    assert [row["step"] for row in result.metrics] == [50] * 4 + [100] * 4


def test_same_seed_runs_are_identical(tmp_path):
    kwargs = dict(episode_length=20, eval_every=40, eval_episodes=2)
    a = train_two_agent(AgentKind.coil(), 7, 3, 1.0, 0.5, **kwargs)
    b = train_two_agent(AgentKind.coil(), 7, 3, 1.0, 0.5, **kwargs)
    assert a.metrics == b.metrics
    for wa, wb in zip(a.bundle.nets[0].weights, b.bundle.nets[0].weights):
        assert (wa == wb).all()
    pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
    write_metrics_csv(pa, a.metrics)
    write_metrics_csv(pb, b.metrics)
    assert pa.read_bytes() == pb.read_bytes()
    back = read_metrics_csv(pa)
    assert [r["value"] for r in back] == pytest.approx(
        [r["value"] for r in a.metrics])
    assert [r["step"] for r in back] == [r["step"] for r in a.metrics]


def test_evaluation_does_not_perturb_training():
    kwargs = dict(episode_length=10, sync_every=2)
    a = train_two_agent(AgentKind.cmil(), 5, 6, 1.0, 0.5,
                        eval_every=25, eval_episodes=2, **kwargs)
    b = train_two_agent(AgentKind.cmil(), 5, 6, 1.0, 0.5,
                        eval_every=10**9, eval_episodes=1, **kwargs)
    for wa, wb in zip(a.bundle.nets[0].weights, b.bundle.nets[0].weights):
        assert (wa == wb).all()


def test_trace_agrees_with_evaluate():
    bundle, adapter = make_two_agent_setup(AgentKind.cmil(), 1, 1.0, 0.5, 25)
    result = evaluate(bundle, adapter, 1)
    rows = episode_trace(bundle, adapter, 0)
    assert len(rows) == 50  # 25 steps x 2 agents
    by_agent = lambda i, k: sum(r[k] for r in rows if r["agent_id"] == i)
    assert by_agent(0, "payment") + by_agent(1, "payment") == pytest.approx(
        result.revenue, abs=1e-12)
    raw = [by_agent(i, "value") for i in range(2)]
    del raw  # value column is the offered value, not the won one
    for r in rows:
        assert set(r) == set(TRACE_HEADER)
        if r["payment"] > 0:
            assert r["win"] == 1
        # budget accounting: pre-step budget is post plus payment
        assert np.isfinite(r["remaining_budget"])


class _ConstantBidder:
    """Minimal act() stand-in bidding the top of the grid every step."""

    def __init__(self):
        self.action_grid = ActionGrid()

    def act(self, obs, epsilon, rng):
        return np.full(len(obs), len(self.action_grid) - 1, dtype=int)


def test_trace_masks_exhausted_bidder():
    _, adapter = make_two_agent_setup(AgentKind.cmil(), 0, 0.05, 0.5, 12)
    rows = episode_trace(_ConstantBidder(), adapter, 0)
    a0 = [r for r in rows if r["agent_id"] == 0]
    a1 = [r for r in rows if r["agent_id"] == 1]
    # both start at 0.5 * 0.05 * 12 * E[max(N(0.5,1),0)] ~ 0.209; agent 0
    # wins the opening tie, pays 5, and goes negative exactly once
    assert a0[0]["bid"] == 5.0 and a0[0]["payment"] == 5.0
    assert a0[0]["remaining_budget"] == pytest.approx(
        0.5 * 0.05 * 12 * POOL_REF / 100 - 5.0)
    # after exhaustion its bid is masked to zero and it never pays again
    for r in a0[1:]:
        assert r["bid"] == 0.0 and r["payment"] == 0.0
    # agent 1 then wins alone with no positive runner-up, so pays nothing
    for r in a1:
        assert r["bid"] == 5.0 and r["payment"] == 0.0
    assert all(r["win"] == 1 for r in a1[1:])
    # overshoot is bounded by the single payment that crossed zero
    assert a0[-1]["remaining_budget"] > -5.0
    for r in rows:  # masking rule: no bid once the pre-step budget is gone
        if r["remaining_budget"] + r["payment"] <= 0:
            assert r["bid"] == 0.0


def test_write_episode_trace(tmp_path):
    bundle, adapter = make_two_agent_setup(AgentKind.cmil(), 1, 1.0, 0.5, 5)
    path = tmp_path / "trace.csv"
    write_episode_trace(path, episode_trace(bundle, adapter, 0))
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(TRACE_HEADER)
    assert len(lines) == 1 + 10


def test_grid_rows_and_roundtrip(tmp_path):
    rows = run_grid(["CM-IL"], [0.5], [0.5], [0], episodes=2)
    assert len(rows) == 1
    row = rows[0]
    assert tuple(row) == GRID_HEADER
    assert row["method"] == "CM-IL" and row["seed"] == 0
    assert row["social_welfare"] >= row["agent1_value"] >= 0
    path = tmp_path / "grid.csv"
    write_grid_csv(path, rows)
    assert read_grid_csv(path) == [pytest.approx(row)]
    bad = tmp_path / "bad.csv"
    bad.write_text("method,b0\nCM-IL,1\n")
    with pytest.raises(ValueError):
        read_grid_csv(bad)


def test_grid_worker_processes_match_serial():
    serial = run_grid(["CM-IL"], [0.5], [0.4, 0.6], [0], episodes=1)
    parallel = run_grid(["CM-IL"], [0.5], [0.4, 0.6], [0], episodes=1, workers=2)
    assert parallel == serial


def test_aggregate_metrics_math():
    rows = []
    for seed, v in ((0, 1.0), (1, 3.0)):
        rows.append({"run_id": f"CM-IL-b1-r0.5-s{seed}", "seed": seed,
                     "step": 100, "group": "all", "metric": "revenue",
                     "value": v})
    rows.append({"run_id": "CO-IL-b1-r0.5-s0", "seed": 0, "step": 100,
                 "group": "all", "metric": "revenue", "value": 9.0})
    agg = aggregate_metrics(rows)
    assert len(agg) == 2
    cm = next(a for a in agg if a["label"] == "CM-IL-b1-r0.5")
    assert cm["mean"] == pytest.approx(2.0)
    assert cm["std"] == pytest.approx(np.std([1.0, 3.0], ddof=1))
    assert cm["count"] == 2
    co = next(a for a in agg if a["label"] == "CO-IL-b1-r0.5")
    assert co["std"] == 0.0 and co["count"] == 1


def test_render_report_files(tmp_path):
    rows = []
    for seed in (0, 1):
        for step in (100, 200):
            rows.append({"run_id": f"CM-IL-b1-r0.5-s{seed}", "seed": seed,
                         "step": step, "group": "all",
                         "metric": "social_welfare", "value": 1.0 + step / 100})
            rows.append({"run_id": f"CM-IL-b1-r0.5-s{seed}", "seed": seed,
                         "step": step, "group": "all", "metric": "revenue",
                         "value": 5.0})
    mpath = tmp_path / "metrics_x.csv"
    write_metrics_csv(mpath, rows)
    gpath = tmp_path / "grid.csv"
    write_grid_csv(gpath, [
        {"method": "CM-IL", "b0": b0, "ratio": r, "seed": 0,
         "agent1_value": b0 + r, "social_welfare": 2 * b0, "revenue": r}
        for b0 in (0.5, 1.0) for r in (0.3, 0.7)
    ])
    out = tmp_path / "report"
    written = render_report([str(mpath)], str(out), str(gpath))
    names = {os.path.basename(p) for p in written}
    assert names == {
        "metrics_aggregate.csv", "curve_social_welfare.png", "curve_revenue.png",
        "grid_agent1_value.png", "grid_social_welfare.png", "grid_revenue.png",
    }
    for p in written:
        assert os.path.getsize(p) > 0


def test_plot_bid_trace(tmp_path):
    trace = [
        {"episode": e, "step": 10 * (e + 1),
         "mean_bids": np.array([1.0 + e, 2.0]),
         "mean_bars": np.array([0.5, 1.0])}
        for e in range(3)
    ]
    path = tmp_path / "trace.png"
    plot_bid_trace(trace, str(path))
    assert path.stat().st_size > 0
    with pytest.raises(ValueError):
        plot_bid_trace([], str(path))


def test_grouped_msb_is_eval_only(table):
    result = train_grouped(AgentKind.msb(), table, 0, 1000, 0.25, RATIOS3,
                           eval_episodes=2)
    assert result.counters["episodes"] == 0
    assert {r["step"] for r in result.metrics} == {0}
    assert result.final_eval.raw_welfare > 0
    assert result.run_id == "MSB-b0.25-s0"


def test_grouped_shared_training(table):
    result = train_grouped(AgentKind.cmil(), table, 0, 12, 0.25, RATIOS3,
                           eval_every=10**9, eval_episodes=2)
    assert result.counters["episodes"] == 2
    assert result.counters["global_steps"] == 12
    assert {r["step"] for r in result.metrics} == {12}
    groups = [r["group"] for r in result.metrics if r["metric"] == "norm_value"]
    assert groups == ["CLICK", "CONV", "CART"]
    assert np.isfinite(result.final_eval.norm_values).all()


def test_grouped_sequential_training(table):
    result = train_grouped(AgentKind.dqns(), table, 0, 12, 0.25, RATIOS3,
                           eval_every=10**9, eval_episodes=2)
    assert len(result.bundle.nets) == 3
    assert result.counters["global_steps"] == 12
    assert {r["step"] for r in result.metrics} == {12}
    assert result.final_eval.revenue >= 0


def test_train_two_agent_rejects_wrong_kinds():
    with pytest.raises(ValueError):
        train_two_agent(AgentKind.msb(), 0, 1, 1.0, 0.5)
    with pytest.raises(ValueError):
        train_two_agent(AgentKind.dqns(), 0, 1, 1.0, 0.5)


# CLI


def _gen_tiny_log(tmp_path):
    log = tmp_path / "log.csv"
    assert main(["gen-logs", "--out", str(log), "--episodes", "2",
                 "--timesteps", "4", "--opportunities", "3",
                 "--ads-per-group", "2", "--seed", "3"]) == 0
    return log


def test_cli_end_to_end(tmp_path):
    log = _gen_tiny_log(tmp_path)
    out = tmp_path / "runs"
    assert main(["train", "--env", "grouped", "--method", "MSB",
                 "--log", str(log), "--steps", "10", "--b0", "0.25",
                 "--out-dir", str(out)]) == 0
    assert (out / "metrics_MSB-b0.25-s0.csv").exists()

    stem = str(tmp_path / "ckpt")
    assert main(["train", "--env", "two-agent", "--method", "CM-IL",
                 "--episodes", "2", "--b0", "0.5", "--ratio", "0.5",
                 "--seed", "1", "--eval-episodes", "2",
                 "--out-dir", str(out), "--save", stem]) == 0
    metrics = out / "metrics_CM-IL-b0.5-r0.5-s1.csv"
    assert metrics.exists()

    trace = tmp_path / "trace.csv"
    assert main(["evaluate", "--checkpoint", stem, "--episodes", "2",
                 "--trace", str(trace)]) == 0
    assert trace.read_text().splitlines()[0] == ",".join(TRACE_HEADER)

    report = tmp_path / "report"
    assert main(["report", "--metrics", str(metrics),
                 "--out-dir", str(report)]) == 0
    assert (report / "metrics_aggregate.csv").exists()


def test_cli_grouped_train_and_evaluate(tmp_path):
    log = _gen_tiny_log(tmp_path)
    stem = str(tmp_path / "gckpt")
    assert main(["train", "--env", "grouped", "--method", "MIX-IL",
                 "--tau", "2", "--log", str(log), "--steps", "8",
                 "--eval-every", "1000000", "--eval-episodes", "2",
                 "--out-dir", str(tmp_path), "--save", stem]) == 0
    assert main(["evaluate", "--checkpoint", stem, "--log", str(log),
                 "--episodes", "2"]) == 0
    # a two-agent checkpoint cannot be scored against a 3-group log
    two = str(tmp_path / "two")
    assert main(["train", "--env", "two-agent", "--method", "CM-IL",
                 "--episodes", "1", "--eval-episodes", "1",
                 "--out-dir", str(tmp_path), "--save", two]) == 0
    assert main(["evaluate", "--checkpoint", two, "--log", str(log)]) == 1


def test_cli_grid_and_report(tmp_path):
    assert main(["grid", "--methods", "CM-IL", "--b0s", "0.5", "--ratios",
                 "0.5", "--seeds", "0", "--episodes", "1",
                 "--out-dir", str(tmp_path)]) == 0
    grid = tmp_path / "grid.csv"
    assert len(read_grid_csv(grid)) == 1
    assert main(["report", "--grid", str(grid),
                 "--out-dir", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "grid_revenue.png").exists()


def test_cli_config_file_defaults_and_override(tmp_path):
    out = tmp_path / "log.csv"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "out": str(out), "log_episodes": 1, "timesteps": 2,
        "opportunities": 2, "ads_per_group": 1, "log_seed": 0,
    }))
    assert main(["gen-logs", "-c", str(cfg)]) == 0
    assert len(out.read_text().splitlines()) == 1 + 1 * 2 * 2 * 3
    # the command line wins over the file
    assert main(["gen-logs", "-c", str(cfg), "--episodes", "2"]) == 0
    assert len(out.read_text().splitlines()) == 1 + 2 * 2 * 2 * 3


def test_cli_exit_code_config_errors(tmp_path):
    assert main([]) == 1
    assert main(["train"]) == 1  # env and method missing
    assert main(["train", "--env", "two-agent", "--method", "NOPE"]) == 1
    assert main(["train", "--env", "two-agent", "--method", "MIX-IL"]) == 1
    assert main(["train", "--env", "two-agent", "--method", "MSB"]) == 1
    assert main(["train", "--env", "grouped", "--method", "CM-IL",
                 "--log", str(tmp_path / "missing.csv")]) == 1
    assert main(["train", "--no-such-flag"]) == 1
    assert main(["grid", "--methods", "MSB"]) == 1
    assert main(["grid", "--methods", ""]) == 1
    assert main(["evaluate", "--checkpoint", str(tmp_path / "nope")]) == 1
    assert main(["report"]) == 1
    assert main(["report", "--metrics", str(tmp_path / "missing.csv")]) == 1
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text("{not json")
    assert main(["gen-logs", "-c", str(bad_cfg), "--out", "x.csv"]) == 1
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"wibble": 1}))
    assert main(["gen-logs", "-c", str(unknown), "--out", "x.csv"]) == 1


def test_cli_exit_code_log_errors(tmp_path):
    bad = tmp_path / "bad_log.csv"
    bad.write_text("episode,timestep\n0,0\n")
    assert main(["train", "--env", "grouped", "--method", "CM-IL",
                 "--log", str(bad), "--steps", "5"]) == 1
    garbled = tmp_path / "garbled.csv"
    garbled.write_text(",".join(LOG_HEADER) + "\n"
                       "0,0,0,0,CLICK,not-a-number,1.0,1.0\n")
    assert main(["train", "--env", "grouped", "--method", "CM-IL",
                 "--log", str(garbled), "--steps", "5"]) == 1


def test_cli_exit_code_runtime_error(tmp_path):
    stem = str(tmp_path / "broken")
    bundle, _ = make_two_agent_setup(AgentKind.cmil(), 0, 1.0, 0.5, 10)
    bundle.save(stem)
    os.remove(f"{stem}.net0.npz")
    assert main(["evaluate", "--checkpoint", stem]) == 2


def test_console_script_help():
    proc = subprocess.run(["bidsim", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("gen-logs", "train", "grid", "evaluate", "report"):
        assert sub in proc.stdout
