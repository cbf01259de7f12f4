import numpy as np
import pytest

from segrl.advantages import GAEConfig, estimate_batch
from segrl.batch import (TurnTable, advantage_arrays, batch_stats,
                         critic_batch_from_table, flat_batch_from_table,
                         returns_matrix, rollout_batch, segment_masks)
from segrl.core import returns_to_go, segment_boundaries
from segrl.critic import CriticBatch, FlatCriticBatch
from segrl.envs import FetchChain, OneStep
from segrl.oracle import random_tables, random_trajectory
from segrl.policy import PolicyParams, fetchchain_phased, rollout
from segrl.rng import CounterRng


@pytest.fixture(scope="module")
def env_and_params():
    env = FetchChain(3, 6)
    params = fetchchain_phased(env, np.random.default_rng(2))
    return env, params


class TestRolloutBatch:
    def test_matches_single_rollouts_bitwise(self, env_and_params):
        env, params = env_and_params
        tt = rollout_batch(env, params, 32, seed=13, c_keep=0.2)
        trajs = tt.to_trajectories()
        for ep in range(32):
            single = rollout(env, params, env.horizon, CounterRng(13, ep),
                             c_keep=0.2)
            assert len(single.turns) == len(trajs[ep].turns)
            for a, b in zip(single.turns, trajs[ep].turns):
                assert a.state == b.state and a.q == b.q
                assert a.subgoal == b.subgoal and a.action == b.action
                assert a.reward == b.reward and a.raw_reward == b.raw_reward
                assert (a.lp_action == b.lp_action
                        and a.lp_switch == b.lp_switch
                        and a.lp_subgoal == b.lp_subgoal)
            assert single.truncated == trajs[ep].truncated
            assert single.final_state == trajs[ep].final_state

    def test_greedy_batch_is_constant(self, env_and_params):
        env, params = env_and_params
        tt = rollout_batch(env, params, 8, seed=0, greedy=True)
        first = tt.state[0]
        for ep in range(1, 8):
            assert np.array_equal(tt.state[ep], first)

    def test_episode_offset_changes_draws(self, env_and_params):
        env, params = env_and_params
        a = rollout_batch(env, params, 4, seed=1, episode_offset=0)
        b = rollout_batch(env, params, 4, seed=1, episode_offset=4)
        assert not np.array_equal(a.action, b.action)


class TestTableConversions:
    def test_round_trip(self, rng):
        trajs = [random_trajectory(rng, 8, 3, 4) for _ in range(20)]
        tt = TurnTable.from_trajectories(trajs, weights=rng.uniform(0.5, 2, 20))
        back = tt.to_trajectories()
        for a, b in zip(trajs, back):
            assert a.truncated == b.truncated
            assert a.n_turns == b.n_turns
            for ua, ub in zip(a.turns, b.turns):
                assert ua.state == ub.state and ua.q == ub.q
                assert ua.subgoal == ub.subgoal and ua.reward == ub.reward

    def test_segment_masks_match_reference(self, rng):
        trajs = [random_trajectory(rng, 8, 3, 4) for _ in range(30)]
        tt = TurnTable.from_trajectories(trajs)
        sm = segment_masks(tt)
        for i, traj in enumerate(trajs):
            bounds = segment_boundaries(traj)
            t_total = traj.n_turns
            for t in range(t_total):
                end = min(b for b in bounds if b > t)
                assert sm.seg_end[i, t] == end
                assert sm.seg_final[i, t] == (t == end - 1)
            assert list(np.nonzero(sm.is_boundary[i, :t_total])[0]) == bounds[:-1]

    def test_returns_matrix_matches_reference(self, rng):
        trajs = [random_trajectory(rng, 8, 3, 4) for _ in range(20)]
        tt = TurnTable.from_trajectories(trajs)
        g = returns_matrix(tt, 0.9)
        for i, traj in enumerate(trajs):
            ref = returns_to_go(traj, 0.9)
            assert np.allclose(g[i, :traj.n_turns], ref, atol=1e-12)


class TestBatchAdvantages:
    def test_matches_per_trajectory_reference(self, env_and_params, rng):
        env, params = env_and_params
        tt = rollout_batch(env, params, 50, seed=21)
        tables = random_tables(rng, env.n_states, 2)
        v_flat = rng.standard_normal(env.n_states)
        cfg = GAEConfig(gamma=0.92, lambda_low=0.8, lambda_high=0.7,
                        lambda_flat=0.9)
        arr = advantage_arrays(tt, tables, cfg, v_flat=v_flat)
        ref = estimate_batch(tt.to_trajectories(), tables, cfg, v_flat=v_flat)
        for i, h in enumerate(ref):
            t_total = int(tt.length[i])
            assert np.allclose(arr.a_low[i, :t_total], h.a_low, atol=1e-11)
            bmask = arr.masks.is_boundary[i, :t_total]
            assert np.allclose(arr.a_high[i, :t_total][bmask], h.a_high, atol=1e-11)
            if t_total > 1:
                assert np.allclose(arr.a_switch[i, 1:t_total], h.a_switch,
                                   atol=1e-11)
            assert np.allclose(arr.a_flat[i, :t_total], h.a_flat, atol=1e-11)

    def test_whitened_moments(self, env_and_params):
        env, params = env_and_params
        tt = rollout_batch(env, params, 100, seed=3)
        tables = random_tables(np.random.default_rng(1), env.n_states, 2)
        cfg = GAEConfig(gamma=0.95, whiten="per-level")
        arr = advantage_arrays(tt, tables, cfg)
        low = arr.a_low[tt.mask]
        assert abs(low.mean()) < 1e-10 and low.var() == pytest.approx(1.0, abs=1e-6)
        high = arr.a_high[arr.masks.is_boundary]
        assert abs(high.mean()) < 1e-10


class TestCriticBatchesFromTable:
    def test_agree_with_trajectory_construction(self, env_and_params):
        env, params = env_and_params
        tt = rollout_batch(env, params, 40, seed=9, c_keep=0.1)
        trajs = tt.to_trajectories()
        a = critic_batch_from_table(tt, 0.9, env.n_states, 2)
        b = CriticBatch.from_trajectories(trajs, 0.9, env.n_states, 2)
        for f in ("low_w", "low_r", "low_mh", "low_ml", "high_w", "high_r",
                  "high_m"):
            assert np.allclose(getattr(a, f), getattr(b, f), atol=1e-10), f

    def test_flat_batches_agree(self, env_and_params):
        env, params = env_and_params
        tt = rollout_batch(env, params, 40, seed=9)
        a = flat_batch_from_table(tt, 0.9, env.n_states)
        b = FlatCriticBatch.from_trajectories(tt.to_trajectories(), 0.9,
                                              env.n_states)
        assert np.allclose(a.w, b.w) and np.allclose(a.g, b.g)


class TestBatchStats:
    def test_segment_length_identity(self, env_and_params):
        env, params = env_and_params
        tt = rollout_batch(env, params, 300, seed=4)
        st = batch_stats(tt, goal_state=env.goal_state)
        # total turns / total segments times segments per episode gives the
        # mean episode length exactly
        assert st.mean_segments * st.mean_seg_len == pytest.approx(
            st.mean_length, rel=1e-12)
        assert st.switch_rate * st.mean_seg_len == pytest.approx(1.0, rel=1e-12)
        assert 0.0 <= st.switch_rate <= 1.0

    def test_success_counts_goal_entries(self):
        env = OneStep(n_actions=2, reward=10.0)
        params = PolicyParams.uniform(env.n_states, 2, env.n_actions)
        tt = rollout_batch(env, params, 10, seed=0)
        st = batch_stats(tt, goal_state=env.goal_state)
        assert st.success_rate == 1.0 and st.mean_return == 10.0
