"""Network, optimizer, replay, schedule, codec, and checkpoint tests."""

import json

import numpy as np
import pytest

from bidsim.learner import (
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

CHI2_CRIT_DF20 = 45.315  # p = 0.001
CHI2_CRIT_DF99 = 148.230  # p = 0.001


def test_action_grid_default_spacing_is_exact():
    grid = ActionGrid()
    assert len(grid) == 21
    for k in range(21):
        assert grid.amount(k) == k * 0.25
    assert grid.amounts([0, 4, 20]) == pytest.approx([0.0, 1.0, 5.0], abs=0)


def test_action_grid_validation():
    with pytest.raises(ValueError):
        ActionGrid(num_actions=1)
    with pytest.raises(ValueError):
        ActionGrid(low=2.0, high=2.0)


def test_qnet_shapes_and_init_bounds():
    rng = np.random.default_rng(0)
    net = QNet(5, 21, rng=rng)
    assert [w.shape for w in net.weights] == [(5, 64), (64, 64), (64, 64), (64, 21)]
    for w in net.weights:
        bound = 1.0 / np.sqrt(w.shape[0])
        assert np.abs(w).max() <= bound
    for b in net.biases:
        assert (b == 0).all()
    q = net.forward(np.zeros((3, 5)))
    assert q.shape == (3, 21)


def test_qnet_forward_matches_hand_computation():
    net = QNet(2, 1, hidden_sizes=(2,), rng=np.random.default_rng(0))
    net.weights[0][:] = [[1.0, -1.0], [0.5, 2.0]]
    net.biases[0][:] = [0.1, -0.2]
    net.weights[1][:] = [[1.0], [-1.0]]
    net.biases[1][:] = [0.5]
    out = net.forward(np.array([[1.0, 2.0]]))
    # z = [2.1, 2.8] -> relu -> 2.1 - 2.8 + 0.5
    assert out[0, 0] == pytest.approx(-0.2, abs=1e-12)


def test_qnet_relu_kills_negative_preactivations():
    net = QNet(1, 1, hidden_sizes=(1,), rng=np.random.default_rng(0))
    net.weights[0][:] = [[-1.0]]
    net.weights[1][:] = [[5.0]]
    net.biases[1][:] = [0.25]
    assert net.forward(np.array([[2.0]]))[0, 0] == 0.25


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    net = QNet(4, 3, hidden_sizes=(6, 5), rng=rng)
    x = rng.normal(size=(2, 4))
    actions = np.array([1, 2])
    y = rng.normal(size=2)

    def loss():
        q = net.forward(x)
        err = q[np.arange(2), actions] - y
        return float(np.mean(err ** 2))

    q = net.forward(x, keep_cache=True)
    err = q[np.arange(2), actions] - y
    grad_out = np.zeros_like(q)
    grad_out[np.arange(2), actions] = 2.0 * err / 2
    grads = net.backward(grad_out)

    h = 1e-6
    for layer, (dw, db) in enumerate(grads):
        for arr, grad in ((net.weights[layer], dw), (net.biases[layer], db)):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                old = arr[idx]
                arr[idx] = old + h
                up = loss()
                arr[idx] = old - h
                down = loss()
                arr[idx] = old
                numeric = (up - down) / (2 * h)
                denom = max(abs(numeric), abs(grad[idx]), 1e-8)
                assert abs(numeric - grad[idx]) / denom < 1e-5


def test_backward_requires_cached_forward():
    net = QNet(2, 2, hidden_sizes=(3,), rng=np.random.default_rng(0))
    net.forward(np.zeros((1, 2)))
    with pytest.raises(RuntimeError):
        net.backward(np.zeros((1, 2)))


def test_rmsprop_follows_update_rule():
    net = QNet(1, 1, hidden_sizes=(), rng=np.random.default_rng(0))
    net.weights[0][:] = [[1.0]]
    opt = RMSProp(net, learning_rate=5e-4, decay=0.99, eps=1e-5)
    g = 2.0
    w0 = 1.0
    acc = 0.0
    for _ in range(3):
        opt.apply(net, [(np.array([[g]]), np.array([0.0]))])
        acc = 0.99 * acc + 0.01 * g ** 2
        w0 -= 5e-4 * g / (np.sqrt(acc) + 1e-5)
        assert net.weights[0][0, 0] == pytest.approx(w0, abs=1e-15)


def test_td_targets():
    got = td_targets(
        rewards=np.array([1.0, 1.0]),
        next_q_max=np.array([2.0, 2.0]),
        terminal=np.array([0.0, 1.0]),
        gamma=0.99,
    )
    assert got == pytest.approx([2.98, 1.0])


def test_train_step_reduces_loss_on_fixed_batch():
    rng = np.random.default_rng(5)
    net = QNet(4, 5, hidden_sizes=(16, 16), rng=rng)
    target = net.clone()
    opt = RMSProp(net, learning_rate=5e-3)
    obs = rng.normal(size=(32, 4))
    actions = rng.integers(0, 5, size=32)
    rewards = rng.normal(size=32)
    next_obs = rng.normal(size=(32, 4))
    terminal = np.ones(32)  # fixed targets: y = r
    first = train_step(net, target, opt, obs, actions, rewards, next_obs, terminal)
    last = first
    for _ in range(100):
        last = train_step(net, target, opt, obs, actions, rewards, next_obs, terminal)
    assert last < first * 0.5


def test_select_actions_greedy_and_tied():
    net = QNet(3, 4, hidden_sizes=(2,), rng=np.random.default_rng(0))
    for w in net.weights:
        w[:] = 0.0
    rng = np.random.default_rng(0)
    acts = select_actions(net, np.ones((5, 3)), epsilon=0.0, rng=rng)
    assert (acts == 0).all()  # all-equal q resolves to the lowest action
    net.biases[-1][:] = [0.0, 1.0, 0.0, 0.5]
    assert select_action(net, np.ones(3), 0.0, rng) == 1


def test_full_exploration_is_uniform():
    net = QNet(2, 21, hidden_sizes=(2,), rng=np.random.default_rng(0))
    rng = np.random.default_rng(123)
    draws = select_actions(net, np.zeros((100_000, 2)), epsilon=1.0, rng=rng)
    counts = np.bincount(draws, minlength=21)
    expected = 100_000 / 21
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < CHI2_CRIT_DF20


def test_epsilon_schedule_linear_anneal():
    sched = EpsilonSchedule(1.0, 0.05, 50_000)
    assert sched.value(0) == 1.0
    assert sched.value(25_000) == pytest.approx(0.525)
    assert sched.value(50_000) == pytest.approx(0.05)
    assert sched.value(10 ** 9) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        EpsilonSchedule(0.5, 0.9, 100)
    with pytest.raises(ValueError):
        EpsilonSchedule(1.0, 0.05, 0)


def _episode(i, rows=3, dim=2):
    return EpisodeBatch(
        obs=np.full((rows, dim), float(i)),
        actions=np.full(rows, i % 5, dtype=int),
        rewards=np.zeros(rows),
        next_obs=np.zeros((rows, dim)),
        terminal=np.zeros(rows),
    )


def test_replay_ring_capacity_and_eviction():
    buf = ReplayBuffer(capacity=4)
    for i in range(6):
        buf.add(_episode(i))
    assert len(buf) == 4
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(20):
        seen |= {int(e.obs[0, 0]) for e in buf.sample(4, rng)}
    assert seen == {2, 3, 4, 5}  # the two oldest episodes were evicted


def test_replay_sample_is_without_replacement():
    buf = ReplayBuffer()
    for i in range(10):
        buf.add(_episode(i))
    rng = np.random.default_rng(1)
    for _ in range(50):
        ids = [int(e.obs[0, 0]) for e in buf.sample(10, rng)]
        assert sorted(ids) == list(range(10))


def test_replay_underfull_not_ready():
    buf = ReplayBuffer()
    buf.add(_episode(0))
    assert not buf.ready(2)
    with pytest.raises(ValueError):
        buf.sample(2, np.random.default_rng(0))
    buf.add(_episode(1))
    assert buf.ready(2)
    assert len(buf.sample(2, np.random.default_rng(0))) == 2
    with pytest.raises(ValueError):
        ReplayBuffer().sample(4, np.random.default_rng(0))


def test_replay_sampling_is_uniform():
    buf = ReplayBuffer(capacity=200)
    for i in range(100):
        buf.add(_episode(i))
    rng = np.random.default_rng(99)
    counts = np.zeros(100)
    for _ in range(5000):
        for ep in buf.sample(10, rng):
            counts[int(ep.obs[0, 0])] += 1
    expected = 5000 * 10 / 100
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < CHI2_CRIT_DF99


def test_replay_stack_concatenates():
    stacked = ReplayBuffer.stack([_episode(0), _episode(1)])
    assert stacked.obs.shape == (6, 2)
    assert len(stacked) == 6


def test_observation_codec_layout():
    codec = ObservationCodec(2, 100, (50.0, 20.0))
    assert codec.obs_dim == 5
    obs = codec.encode(1, 10.0, 0.6, 30)
    assert obs == pytest.approx([0.5, 0.6, 0.3, 0.0, 1.0])
    both = codec.encode_all([25.0, 10.0], [0.1, 0.2], 50)
    assert both[0] == pytest.approx(codec.encode(0, 25.0, 0.1, 50))
    assert both[1] == pytest.approx(codec.encode(1, 10.0, 0.2, 50))


def test_observation_codec_zero_budget_denominator():
    codec = ObservationCodec(1, 10, (0.0,))
    assert codec.encode(0, 0.0, 1.0, 5)[0] == 0.0


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    net = QNet(5, 21, rng=rng)
    opt = RMSProp(net)
    target = net.clone()
    # push some state into the optimizer accumulators
    for _ in range(3):
        obs = rng.normal(size=(8, 5))
        train_step(net, target, opt, obs, rng.integers(0, 21, 8),
                   rng.normal(size=8), rng.normal(size=(8, 5)), np.ones(8))
    codec = ObservationCodec(2, 100, (48.0, 21.0))
    grid = ActionGrid()
    path = tmp_path / "ckpt.npz"
    save_checkpoint(str(path), net, opt, codec, grid, extra={"note": "x"})
    loaded = load_checkpoint(str(path))
    for a, b in zip(loaded["qnet"].weights, net.weights):
        assert (a == b).all()
    for a, b in zip(loaded["qnet"].biases, net.biases):
        assert (a == b).all()
    for a, b in zip(loaded["optimizer"].acc_w, opt.acc_w):
        assert (a == b).all()
    assert loaded["codec"] == codec
    assert loaded["action_grid"] == grid
    assert loaded["extra"] == {"note": "x"}
    obs = rng.normal(size=(4, 5))
    assert (loaded["qnet"].forward(obs) == net.forward(obs)).all()


def test_checkpoint_version_gate(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, meta=np.asarray(json.dumps({"version": 99})))
    with pytest.raises(ValueError):
        load_checkpoint(str(path))
