import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipp.physics_env import Action, EnvConfig, TickRecord, TrajectoryLog, random_policy, run_episode
from ipp.prior_model import (
    FLAT,
    CnnParams,
    TrainConfig,
    TrainingDivergedError,
    TrainingSet,
    WeightFileError,
    backward,
    build_dataset,
    forward,
    gradient_check,
    layer_shapes,
    load_params,
    loss,
    save_params,
    sgd_fit,
    window_counts,
)
from ipp.synthetic import bird_gap_task


@pytest.fixture(scope="module")
def kappa():
    return CnnParams.init(np.random.default_rng(0))


@pytest.fixture(scope="module")
def batch():
    return np.random.default_rng(1).random((3, 4, 80, 80)).astype(np.float32)


def test_shape_chain():
    assert layer_shapes() == [(4, 80, 80), (32, 19, 19), (64, 8, 8), (64, 7, 7), (3136,), (512,), (2,)]
    assert FLAT == 3136


def _naive_conv(x, w, b, stride):
    cout, cin, k, _ = w.shape
    o = (x.shape[-1] - k) // stride + 1
    out = np.empty((cout, o, o))
    for c in range(cout):
        for i in range(o):
            for j in range(o):
                patch = x[:, i * stride : i * stride + k, j * stride : j * stride + k]
                out[c, i, j] = np.sum(patch * w[c]) + b[c]
    return out


def test_forward_matches_naive_loops(kappa, batch):
    k64 = kappa.astype(np.float64)
    h = batch[0].astype(np.float64)
    for name, stride in (("conv1", 4), ("conv2", 2), ("conv3", 1)):
        h = np.maximum(_naive_conv(h, k64[f"{name}.weight"], k64[f"{name}.bias"], stride), 0)
    z1 = np.maximum(k64["fc1.weight"] @ h.reshape(-1) + k64["fc1.bias"], 0)
    z2 = k64["out.weight"] @ z1 + k64["out.bias"]
    expected = np.log1p(np.exp(z2)) + k64.alpha_floor
    assert np.allclose(forward(k64, batch[0]), expected, rtol=1e-10, atol=1e-12)


def test_output_is_positive_and_floored():
    zero = CnnParams.zeros()
    alpha = forward(zero, np.zeros((4, 80, 80), np.float32))
    assert alpha.shape == (2,)
    assert np.allclose(alpha, np.log(2.0) + 1e-2)
    k = CnnParams.zeros()
    k.tensors["out.bias"][:] = -1e4
    assert np.all(forward(k, np.zeros((4, 80, 80))) == np.float32(1e-2))


def test_batch_and_single_agree(kappa, batch):
    assert np.allclose(forward(kappa, batch)[1], forward(kappa, batch[1]), rtol=1e-6)


def test_rejects_bad_input(kappa):
    with pytest.raises(ValueError):
        forward(kappa, np.zeros((3, 80, 80)))


def test_loss_is_batch_mean_squared_error():
    k = CnnParams.zeros(dtype=np.float64)
    x = np.zeros((2, 4, 80, 80))
    a0 = np.log(2.0) + 1e-2
    targets = np.array([[a0 + 1, a0], [a0, a0 - 2]])
    assert loss(k, x, targets) == pytest.approx((1 + 4) / 2, rel=1e-12)


def test_gradients_match_finite_differences(kappa, batch):
    targets = np.array([[1.0, 9.0], [5.0, 5.0], [0.5, 2.0]])
    gc = gradient_check(kappa, batch, targets, n_params=100, rng=np.random.default_rng(3))
    assert gc.relative_error.max() < 1e-4
    assert len(gc.names) == 100


def test_zero_gradient_at_exact_fit():
    k = CnnParams.zeros(dtype=np.float64)
    x = np.zeros((1, 4, 80, 80))
    target = forward(k, x)
    grads = backward(k, x, target)
    assert all(np.all(g == 0) for g in grads.values())


class TestDataset:
    def test_window_follows_decision_tick(self):
        # actions from t=0: Flap, Noop, Noop, Flap, Noop; window of 3 at t=0
        acts = [0, 1, 1, 0, 1]
        assert window_counts(acts, 0, 3).tolist() == [1, 2]
        assert window_counts(acts, 2, 3).tolist() == [1, 2]

    def test_negative_windows_dropped(self):
        cfg = EnvConfig(first_obstacle_x=2000.0)
        log = run_episode(cfg, lambda s: Action.NOOP, 500, seed=0, record_frames=True)
        n = len(log)
        data = build_dataset([log], delta=5)
        # n - 4 windows fit; only the last one reaches the colliding tick
        assert len(data) == n - 5
        assert np.all(data.targets == [0, 5])

    def test_stack_padding_at_episode_start(self):
        log = run_episode(EnvConfig(), random_policy(0.1, np.random.default_rng(0)), 30, seed=0,
                          record_frames=True)
        data = build_dataset([log], delta=3)
        assert data.stacks[0].tolist() == [0, 0, 0, 0]
        assert data.stacks[2].tolist() == [0, 0, 1, 2]
        assert data.stacks[5].tolist() == [2, 3, 4, 5]

    def test_needs_frames(self):
        log = run_episode(EnvConfig(), lambda s: Action.NOOP, 10, seed=0)
        with pytest.raises(ValueError):
            build_dataset([log], 3)

    def test_rejects_bad_delta(self):
        with pytest.raises(ValueError):
            build_dataset([], 0)

    @settings(max_examples=30, deadline=None)
    @given(actions=st.lists(st.sampled_from([0, 1]), min_size=1, max_size=40), delta=st.integers(1, 12))
    def test_targets_sum_to_window_length(self, actions, delta):
        recs = [TickRecord(tick=t, y=100.0, vy=0.0, action=a, reward=0, collision=False, frame_idx=t)
                for t, a in enumerate(actions)]
        log = TrajectoryLog(records=recs, frames=np.zeros((len(actions), 80, 80), np.float32))
        data = build_dataset([log], delta)
        assert len(data) == max(len(actions) - delta + 1, 0)
        if len(data):
            assert np.all(data.targets.sum(axis=1) == delta)
            assert data.targets[0].tolist() == [actions[:delta].count(0), actions[:delta].count(1)]


class TestTraining:
    def test_deterministic_per_seed(self):
        x, y = bird_gap_task(n=16, seed=2)
        data = TrainingSet.from_arrays(x, y)
        cfg = TrainConfig(epochs=2, minibatch_size=8, learning_rate=1e-3)
        a = sgd_fit(CnnParams.init(np.random.default_rng(0)), data, cfg)
        b = sgd_fit(CnnParams.init(np.random.default_rng(0)), data, cfg)
        assert a.history == b.history
        assert a.params.equals(b.params)
        assert len(a.history) == 3

    def test_zero_learning_rate_changes_nothing(self):
        x, y = bird_gap_task(n=8, seed=1)
        start = CnnParams.init(np.random.default_rng(0))
        fit = sgd_fit(start, TrainingSet.from_arrays(x, y), TrainConfig(epochs=1, learning_rate=0.0))
        assert fit.params.equals(start)

    def test_divergence_is_reported(self):
        x, y = bird_gap_task(n=8, seed=1)
        with pytest.raises(TrainingDivergedError), np.errstate(over="ignore", invalid="ignore"):
            sgd_fit(CnnParams.init(np.random.default_rng(0)), TrainingSet.from_arrays(x, y * 1e30),
                    TrainConfig(epochs=3, learning_rate=10.0))

    def test_empty_set_rejected(self):
        empty = TrainingSet(np.zeros((0, 80, 80), np.float32), np.zeros((0, 4), int), np.zeros((0, 2)))
        with pytest.raises(ValueError):
            sgd_fit(CnnParams.zeros(), empty, TrainConfig())

    @pytest.mark.parametrize("kw", [dict(learning_rate=-1), dict(minibatch_size=0), dict(epochs=0),
                                    dict(delta_window=0), dict(alpha_floor=0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestWeightFile:
    def test_round_trip_is_byte_exact(self, kappa, tmp_path):
        p = tmp_path / "w.ippw"
        save_params(kappa, p)
        first = p.read_bytes()
        again = load_params(p)
        assert again.equals(kappa)
        save_params(again, p)
        assert p.read_bytes() == first

    def test_header_layout(self, kappa, tmp_path):
        p = tmp_path / "w.ippw"
        save_params(kappa, p)
        buf = p.read_bytes()
        assert buf[:5] == b"IPPW1"
        assert struct.unpack_from("<HH", buf, 5) == (1, 10)
        n_floats = sum(v.size for _, v in kappa.items())
        header = sum(1 + len(k) + 1 + 4 * v.ndim for k, v in kappa.items())
        assert len(buf) == 9 + header + 4 * n_floats

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "w.ippw"
        p.write_bytes(b"NOPE!" + b"\0" * 20)
        with pytest.raises(WeightFileError, match="magic"):
            load_params(p)

    def test_truncated(self, kappa, tmp_path):
        p = tmp_path / "w.ippw"
        save_params(kappa, p)
        p.write_bytes(p.read_bytes()[:-7])
        with pytest.raises(WeightFileError, match="truncated"):
            load_params(p)

    def test_trailing_bytes(self, kappa, tmp_path):
        p = tmp_path / "w.ippw"
        save_params(kappa, p)
        p.write_bytes(p.read_bytes() + b"\0")
        with pytest.raises(WeightFileError, match="trailing"):
            load_params(p)

    def test_action_count_mismatch(self, tmp_path):
        p = tmp_path / "w.ippw"
        save_params(CnnParams.zeros(n_actions=3), p)
        with pytest.raises(WeightFileError, match="2 actions"):
            load_params(p, n_actions=2)

    def test_version(self, kappa, tmp_path):
        p = tmp_path / "w.ippw"
        save_params(kappa, p)
        buf = bytearray(p.read_bytes())
        struct.pack_into("<H", buf, 5, 9)
        p.write_bytes(bytes(buf))
        with pytest.raises(WeightFileError, match="version"):
            load_params(p)
