import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from acg.checkpoint import Checkpoint
from acg.data import DemoDataset, Episode
from acg.flow_match import (
    ChunkIndex,
    batch_loss,
    TrainConfig,
    fm_loss,
    interpolate,
    sample_training_batch,
    target_vector,
    train,
)
from acg.policy_net import NULL_INSTRUCTION, NetConfig, PolicyNet, ShapeError


def _arr(x):
    return np.array(x, dtype=np.float64)


class TestInterpolate:
    def test_endpoints_bitwise(self, rng):
        clean, noise = rng.standard_normal((16, 2)), rng.standard_normal((16, 2))
        assert np.array_equal(interpolate(clean, noise, 1.0), clean)
        assert np.array_equal(interpolate(clean, noise, 0.0), noise)

    def test_midpoint(self):
        assert interpolate(_arr([[2.0]]), _arr([[0.0]]), 0.5).tolist() == [[1.0]]

    def test_rejects_tau_outside_unit_interval(self):
        with pytest.raises(ValueError):
            interpolate(_arr([[1.0]]), _arr([[0.0]]), 1.01)
        with pytest.raises(ValueError):
            interpolate(_arr([[1.0]]), _arr([[0.0]]), -0.01)

    def test_works_on_tensors(self, rng):
        c, n = torch.from_numpy(rng.standard_normal((4, 3))), torch.from_numpy(rng.standard_normal((4, 3)))
        assert torch.equal(interpolate(c, n, 1.0), c)


class TestTarget:
    def test_examples(self, rng):
        x = rng.standard_normal((3, 2))
        assert np.all(target_vector(x, x) == 0)
        assert target_vector(_arr([[1, 2]]), _arr([[0, 1]])).tolist() == [[1.0, 1.0]]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            target_vector(np.zeros((2, 2)), np.zeros((2, 3)))

    @pytest.mark.parametrize("tau", [0.3, 0.7])
    def test_is_time_derivative_of_interpolation(self, rng, tau):
        clean, noise = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
        h = 1e-6
        fd = (interpolate(clean, noise, tau + h) - interpolate(clean, noise, tau - h)) / (2 * h)
        np.testing.assert_allclose(fd, target_vector(clean, noise), rtol=0, atol=1e-8)


class TestLoss:
    def test_zero_at_target(self, rng):
        clean, noise = rng.standard_normal((16, 2)), rng.standard_normal((16, 2))
        assert fm_loss(clean - noise, clean, noise) == 0.0

    def test_constant_offset(self, rng):
        clean, noise = rng.standard_normal((16, 2)), rng.standard_normal((16, 2))
        assert fm_loss(clean - noise + 1.0, clean, noise) == pytest.approx(1.0, abs=1e-12)

    def test_hand_computed_2x2(self):
        v = _arr([[0.5, -1.0], [2.0, 0.0]])
        clean = _arr([[1.0, 0.0], [1.0, 1.0]])
        noise = _arr([[0.0, 1.0], [0.0, -1.0]])
        # targets [[1,-1],[1,2]]; errors -0.5, 0, 1, -2 -> (0.25 + 0 + 1 + 4) / 4
        assert fm_loss(v, clean, noise) == pytest.approx(1.3125, abs=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), k=st.integers(1, 8), m=st.integers(1, 4))
    def test_nonnegative(self, seed, k, m):
        r = np.random.default_rng(seed)
        a, b, c = (r.standard_normal((k, m)) for _ in range(3))
        assert fm_loss(a, b, c) >= 0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            fm_loss(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((3, 2)))


def _dataset(lengths, M=2, O=3, vocab=2, seed=0):
    r = np.random.default_rng(seed)
    eps = [
        Episode(np.full(T, i % vocab), r.standard_normal((T, O)), r.standard_normal((T, M)))
        for i, T in enumerate(lengths)
    ]
    return DemoDataset(eps, {"vocab": vocab})


class TestBatchSampler:
    def test_single_step_episode_is_repeated(self):
        ds = _dataset([1])
        b = sample_training_batch(ds, TrainConfig(batch_size=3, chunk_length=16), np.random.default_rng(0))
        assert b.clean.shape == (3, 16, 2)
        assert np.all(b.clean == ds.episodes[0].actions[0])

    def test_windows_stay_inside_their_episode(self):
        ds = _dataset([3, 7, 2, 20])
        index = ChunkIndex(ds, 5)
        bounds = np.cumsum([0] + [len(e) for e in ds.episodes])
        for row, win in enumerate(index.window):
            ep = np.searchsorted(bounds, row, side="right") - 1
            assert np.all((win >= bounds[ep]) & (win < bounds[ep + 1]))
            assert win[0] == row
            tail = win[win == bounds[ep + 1] - 1]
            assert np.all(np.diff(win) >= 0) and (len(tail) >= 1 or win[-1] < bounds[ep + 1] - 1)

    def test_padded_chunk_repeats_final_action_exactly(self):
        ds = _dataset([4])
        index = ChunkIndex(ds, 6)
        chunk = index.actions[index.window[2]]
        acts = ds.episodes[0].actions
        assert np.array_equal(chunk, np.stack([acts[2], acts[3], acts[3], acts[3], acts[3], acts[3]]))

    def test_actions_divided_by_scale(self):
        ds = _dataset([5])
        ds.metadata["action_scale"] = 0.5
        index = ChunkIndex(ds, 2)
        assert np.array_equal(index.actions, ds.episodes[0].actions / 0.5)

    def test_no_dropout(self):
        ds = _dataset([10, 10])
        b = sample_training_batch(ds, TrainConfig(batch_size=10000, condition_dropout_p=0.0), np.random.default_rng(1))
        assert not np.any(b.instruction == NULL_INSTRUCTION)

    def test_dropout_fraction(self):
        ds = _dataset([10, 10])
        b = sample_training_batch(ds, TrainConfig(batch_size=10000, condition_dropout_p=0.1), np.random.default_rng(2))
        assert 0.08 <= np.mean(b.instruction == NULL_INSTRUCTION) <= 0.12

    def test_tau_uniform_range(self):
        ds = _dataset([10])
        b = sample_training_batch(ds, TrainConfig(batch_size=5000), np.random.default_rng(3))
        assert b.tau.min() >= 0 and b.tau.max() < 1
        assert abs(b.tau.mean() - 0.5) < 0.02

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            sample_training_batch(DemoDataset([]), TrainConfig(), np.random.default_rng(0))


def _overfit_setup(steps, seed=0):
    cfg = NetConfig(action_dim=2, obs_dim=3, vocab=1, num_layers=2, hidden=32, heads=2, chunk=4, mlp_ratio=2, freq_dim=8)
    T = 12
    ep = Episode(np.zeros(T), np.tile([0.1, -0.2, 0.3], (T, 1)), np.tile([0.7, -0.4], (T, 1)))
    ds = DemoDataset([ep])
    tc = TrainConfig(batch_size=64, total_steps=steps, learning_rate=3e-3, warmup_steps=10, chunk_length=4, seed=seed)
    return ds, PolicyNet(cfg, seed=seed), tc


def _held_out_loss(ds, net):
    # fixed noise and tau so before/after losses are comparable without sampling noise
    batch = sample_training_batch(
        ds, TrainConfig(batch_size=256, chunk_length=4, condition_dropout_p=0.0), np.random.default_rng(99)
    )
    with torch.no_grad():
        return batch_loss(net, batch).item()


class TestTrain:
    def test_zero_steps_returns_initialization(self):
        ds, net, tc = _overfit_setup(0)
        init = Checkpoint.from_net(net)
        ckpt, losses = train(ds, net, tc)
        assert len(losses) == 0
        assert all(np.array_equal(a, ckpt.tensors[k]) for k, a in init.tensors.items())

    @pytest.mark.parametrize("seed", [0, 1])
    def test_overfit_constant_actions(self, seed):
        ds, net, tc = _overfit_setup(200, seed)
        before = _held_out_loss(ds, net)
        train(ds, net, tc)
        assert _held_out_loss(ds, net) < 0.1 * before

    def test_moving_average_trend(self):
        # The per-step loss is a random variable; its expectation is estimated by
        # averaging curves over seeds, and the 20-step moving average over the
        # final 100 steps must trend down (least-squares slope <= 0, end <= start).
        curves = [train(*_overfit_setup(200, seed))[1] for seed in range(4)]
        ma = np.convolve(np.mean(curves, axis=0), np.ones(20) / 20, mode="valid")[-100:]
        assert np.polyfit(np.arange(100), ma, 1)[0] <= 0
        assert ma[-1] <= ma[0]

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            ds, net, tc = _overfit_setup(30, seed=4)
            runs.append(train(ds, net, tc))
        assert runs[0][0].equals(runs[1][0])
        assert np.array_equal(runs[0][1], runs[1][1])

    def test_dimension_mismatch(self):
        ds, net, tc = _overfit_setup(1)
        bad = DemoDataset([Episode(np.zeros(3), np.zeros((3, 5)), np.zeros((3, 2)))])
        with pytest.raises(ShapeError):
            train(bad, net, tc)

    def test_warmup_schedule(self):
        tc = TrainConfig(learning_rate=1e-3, warmup_steps=100)
        assert tc.lr_at(0) == pytest.approx(1e-5)
        assert tc.lr_at(99) == pytest.approx(1e-3)
        assert tc.lr_at(5000) == 1e-3
