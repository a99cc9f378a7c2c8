import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acg.metrics import Trajectory, atv, jerk_rms, summarize


def _brute_jerk(states):
    s = [list(map(float, row)) for row in states]
    total = 0.0
    for t in range(len(s) - 3):
        for d in range(len(s[0])):
            j = s[t + 3][d] - 3 * s[t + 2][d] + 3 * s[t + 1][d] - s[t][d]
            total += j * j
    return math.sqrt(total / (len(s) - 3))


def _traj(actions, states=None, success=False, method="m"):
    actions = np.asarray(actions, dtype=np.float64).reshape(len(actions), -1)
    if states is None:
        states = np.vstack([np.zeros(actions.shape[1]), np.cumsum(actions, axis=0)])
    return Trajectory(states, actions, success, {"method": method, "seed": 0})


class TestATV:
    def test_constant(self):
        assert atv(np.full((10, 3), 0.7)) == 0.0

    def test_alternating(self):
        assert atv(np.array([[0.0], [1.0], [0.0], [1.0]])) == 1.0

    def test_two_dims(self):
        assert atv(np.array([[0.0, 0.0], [1.0, 2.0]])) == 1.5

    def test_too_short(self):
        with pytest.raises(ValueError):
            atv(np.zeros((1, 2)))

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31), c=st.floats(-10, 10), T=st.integers(2, 30), M=st.integers(1, 4))
    def test_scale_covariance_and_shift_invariance(self, seed, c, T, M):
        r = np.random.default_rng(seed)
        a = r.standard_normal((T, M))
        assert abs(atv(c * a) - abs(c) * atv(a)) <= 1e-12 * max(1.0, abs(c) * atv(a))
        shift = r.standard_normal(M)
        assert abs(atv(a + shift) - atv(a)) <= 1e-12

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31), T=st.integers(2, 20))
    def test_zero_iff_constant(self, seed, T):
        r = np.random.default_rng(seed)
        a = np.repeat(r.standard_normal((1, 2)), T, axis=0)
        assert atv(a) == 0.0
        a[r.integers(T)] += 1e-3
        assert atv(a) > 0.0


class TestJerk:
    def test_quadratic(self):
        t = np.arange(12.0)
        assert jerk_rms(np.stack([t**2, 3 * t**2 - 2 * t + 5], axis=1)) == 0.0

    def test_single_spike(self):
        assert jerk_rms(np.array([[0.0], [0.0], [1.0], [0.0]])) == 3.0

    def test_matches_brute_force(self):
        s = np.random.default_rng(8).standard_normal((8, 2))
        assert jerk_rms(s) == pytest.approx(_brute_jerk(s), rel=1e-14)

    def test_too_short(self):
        with pytest.raises(ValueError):
            jerk_rms(np.zeros((3, 2)))

    @settings(max_examples=60, deadline=None)
    @given(
        coeffs=st.lists(st.integers(-5, 5), min_size=3, max_size=3),
        T=st.integers(4, 25),
    )
    def test_polynomials_up_to_degree_two(self, coeffs, T):
        t = np.arange(T, dtype=np.float64)
        s = coeffs[0] + coeffs[1] * t + coeffs[2] * t**2
        assert jerk_rms(s[:, None]) == 0.0

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31), T=st.integers(4, 30))
    def test_shift_invariance_and_oracle(self, seed, T):
        r = np.random.default_rng(seed)
        s = r.standard_normal((T, 2))
        assert abs(jerk_rms(s + r.standard_normal(2)) - jerk_rms(s)) <= 1e-12
        assert jerk_rms(s) == pytest.approx(_brute_jerk(s), rel=1e-12)


class TestSummarize:
    def test_single_trajectory_std_zero(self):
        out = summarize([_traj(np.arange(10.0))], 64)["m"]
        assert out.episodes == 1 and out.atv_std == 0.0 and out.jerk_std == 0.0

    def test_identical_pair(self):
        tr = _traj(np.sin(np.arange(10.0)))
        out = summarize([tr, tr], 64)["m"]
        assert out.atv_mean == atv(tr.actions) and out.atv_std == 0.0
        assert out.jerk_mean == jerk_rms(tr.states)

    def test_hand_built_sample_statistics(self):
        # M=1 alternating sequences with step c have ATV exactly c
        trajs = [_traj([[0.0], [c], [0.0], [c], [0.0]], success=(c == 2)) for c in (1.0, 2.0, 3.0)]
        out = summarize(trajs, 64)["m"]
        assert out.atv_mean == 2.0 and out.atv_std == 1.0
        assert out.success_rate == pytest.approx(1 / 3)

    def test_window_truncates(self):
        acts = np.concatenate([np.zeros((10, 1)), np.tile([[0.0], [1.0]], (20, 1))])
        states = np.cumsum(np.concatenate([[[0.0]], acts]), axis=0)
        out = summarize([_traj(acts, states)], 10)["m"]
        assert out.atv_mean == 0.0 and out.jerk_mean == 0.0
        assert summarize([_traj(acts, states)], 64)["m"].atv_mean > 0

    def test_groups_by_method(self):
        trajs = [_traj(np.zeros(6), method="a"), _traj(np.arange(6.0), method="b"), _traj(np.zeros(6), method="a")]
        out = summarize(trajs)
        assert set(out) == {"a", "b"} and out["a"].episodes == 2

    def test_errors(self):
        with pytest.raises(ValueError):
            summarize([])
        with pytest.raises(ValueError):
            summarize([_traj(np.zeros(6))], approach_window=3)
