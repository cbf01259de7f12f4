import numpy as np
import pytest

from segrl.critic import (CriticBatch, FlatCriticBatch, ValueTables,
                          fit_critic, fit_flat_critic, high_targets,
                          low_targets, v_next)
from segrl.envs import FetchChain
from segrl.oracle import (enumerate_trajectories, exact_critic_batch,
                          oracle_values, random_tables, random_trajectory)
from segrl.policy import PolicyParams, fetchchain_phased

from conftest import traj_from


def sentinel_tables(n_states, n_options, high=1000.0, low=-7.0):
    return ValueTables(np.full(n_states, high), np.full((n_states, n_options), low))


class TestVNext:
    def test_interior_uses_low_head(self):
        tables = sentinel_tables(10, 3)
        traj = traj_from([1, 0, 0], [0.0] * 3, states=[4, 5, 6])
        assert v_next(traj, tables, 0) == -7.0
        assert v_next(traj, tables, 1) == -7.0

    def test_terminal_next_is_zero(self):
        tables = sentinel_tables(10, 3)
        traj = traj_from([1, 0], [0.0, 1.0])
        assert v_next(traj, tables, 1) == 0.0

    def test_segment_final_uses_high_head(self):
        tables = sentinel_tables(10, 3)
        traj = traj_from([1, 0, 1, 0], [0.0] * 4, states=[4, 5, 6, 7])
        assert v_next(traj, tables, 1) == 1000.0

    def test_truncated_bootstraps_table(self):
        tables = sentinel_tables(10, 3)
        traj = traj_from([1, 0], [0.0] * 2, done=False, final_state=9)
        assert v_next(traj, tables, 1) == 1000.0

    def test_truncated_requires_final_state(self):
        tables = sentinel_tables(10, 3)
        traj = traj_from([1, 0], [0.0] * 2, done=False)
        object.__setattr__(traj, "final_state", None)
        with pytest.raises(ValueError):
            v_next(traj, tables, 1)


class TestTargets:
    def test_high_target_hand_value(self):
        tables = ValueTables.zeros(10, 2)
        tables.v_high[6] = 4.0
        # one two-turn segment with macro reward 2 and duration discount 0.5
        traj = traj_from([1, 0, 1], [2.0, 0.0, 0.0], states=[4, 5, 6])
        y = high_targets(traj, tables, gamma=np.sqrt(0.5))
        assert y[0] == pytest.approx(2.0 + 0.5 * 4.0)

    def test_last_segment_terminal_zero_bootstrap(self):
        tables = sentinel_tables(10, 2)
        traj = traj_from([1, 0], [1.0, 2.0])
        y = high_targets(traj, tables, gamma=1.0)
        assert y[-1] == pytest.approx(3.0)

    def test_unit_segments_reduce_to_one_step(self):
        tables = ValueTables.zeros(10, 2)
        tables.v_high[:] = np.arange(10.0)
        traj = traj_from([1, 1, 1], [5.0, 6.0, 7.0], states=[1, 2, 3])
        y = high_targets(traj, tables, gamma=1.0)
        assert y.tolist() == pytest.approx([5.0 + 2.0, 6.0 + 3.0, 7.0])

    def test_low_targets_zero(self):
        tables = ValueTables.zeros(8, 2)
        traj = traj_from([1, 0, 0], [0.0] * 3)
        assert low_targets(traj, tables, 0.9).tolist() == [0.0, 0.0, 0.0]

    def test_low_target_terminal(self):
        tables = sentinel_tables(8, 2)
        traj = traj_from([1, 0], [0.0, 3.0])
        assert low_targets(traj, tables, 0.9)[-1] == pytest.approx(3.0)

    def test_low_target_interior_value(self):
        tables = ValueTables.zeros(8, 2)
        tables.v_low[:, :] = 2.0
        traj = traj_from([1, 0, 0], [1.0, 0.0, 0.0])
        assert low_targets(traj, tables, 0.9)[0] == pytest.approx(2.8)

    def test_coupling_final_turn_uses_high_never_low(self, rng):
        # with sentinel tables the branch taken is visible in the value
        tables = sentinel_tables(12, 3)
        for _ in range(50):
            traj = random_trajectory(rng, 12, 3, 4)
            y = low_targets(traj, tables, 1.0)
            from segrl.core import segment_boundaries
            bounds = segment_boundaries(traj)
            for k in range(len(bounds) - 1):
                t_final = bounds[k + 1] - 1
                r = traj.turns[t_final].reward
                if traj.turns[t_final].done:
                    assert y[t_final] == pytest.approx(r)
                else:
                    assert y[t_final] == pytest.approx(r + 1000.0)
                for t in range(bounds[k], t_final):
                    assert y[t] == pytest.approx(traj.turns[t].reward - 7.0)


class TestFitCritic:
    def test_fixed_point_untouched(self, rng):
        env = FetchChain(2, 4)
        p = PolicyParams.random(rng, env.n_states, 2, env.n_actions, scale=0.5)
        gamma = 0.9
        vals = oracle_values(env, p, gamma)
        batch = exact_critic_batch(env, p, gamma)
        fitted, rep = fit_critic(vals.tables, batch, gamma, lr=0.3, epochs=5)
        assert np.allclose(fitted.v_high, vals.v_high, atol=1e-12)
        assert np.allclose(fitted.v_low, vals.v_low, atol=1e-12)
        assert rep.mse_low[0] == pytest.approx(0.0, abs=1e-20)

    def test_scalar_recursion(self):
        # one cell, one target: v <- v - 2*lr*(v - y)
        traj = traj_from([1], [5.0], states=[0])
        tables = ValueTables.zeros(1, 1)
        fitted, _ = fit_critic(tables, [traj], gamma=1.0, lr=0.25, epochs=1)
        assert fitted.v_low[0, 0] == pytest.approx(0.0 - 2 * 0.25 * (0.0 - 5.0))
        fitted, _ = fit_critic(tables, [traj], gamma=1.0, lr=0.25, epochs=50)
        assert fitted.v_low[0, 0] == pytest.approx(5.0, abs=1e-9)

    def test_converges_to_oracle_values(self, rng):
        env = FetchChain(3, 6)
        p = fetchchain_phased(env, rng)
        gamma = 0.97
        vals = oracle_values(env, p, gamma)
        batch = exact_critic_batch(env, p, gamma)
        tables = ValueTables.zeros(env.n_states, 2)
        fitted, _ = fit_critic(tables, batch, gamma, lr=0.5, epochs=30)
        assert np.max(np.abs(fitted.v_high - vals.v_high)[vals.high_defined]) < 1e-10
        assert np.max(np.abs(fitted.v_low - vals.v_low)[vals.low_defined]) < 1e-10

    def test_monotone_mse_for_small_lr(self, rng):
        from segrl.batch import rollout_batch, critic_batch_from_table
        env = FetchChain(3, 6)
        p = fetchchain_phased(env, rng)
        tt = rollout_batch(env, p, 200, seed=5)
        cb = critic_batch_from_table(tt, 0.95, env.n_states, 2)
        tables = ValueTables.zeros(env.n_states, 2)
        # frozen targets: guaranteed strict decrease for per-cell lr < 0.5
        _, rep = fit_critic(tables, cb, 0.95, lr=0.1, epochs=40,
                            refresh_targets=False)
        total = np.array(rep.mse_low) + np.array(rep.mse_high)
        assert np.all(np.diff(total) <= 1e-12)

    def test_trajectory_and_exact_batches_agree(self, rng):
        env = FetchChain(2, 3)
        p = PolicyParams.random(rng, env.n_states, 2, env.n_actions, scale=0.6)
        gamma = 0.9
        dist = enumerate_trajectories(env, p)
        cb_t = CriticBatch.from_trajectories(
            [t for t, _ in dist], gamma, env.n_states, 2, [w for _, w in dist])
        cb_e = exact_critic_batch(env, p, gamma)
        for f in ("low_w", "low_r", "low_mh", "low_ml", "high_w", "high_r", "high_m"):
            assert np.allclose(getattr(cb_t, f), getattr(cb_e, f), atol=1e-12), f

    def test_gamma_mismatch_rejected(self, rng):
        env = FetchChain(2, 3)
        p = PolicyParams.uniform(env.n_states, 2, env.n_actions)
        batch = exact_critic_batch(env, p, 0.9)
        with pytest.raises(ValueError):
            fit_critic(ValueTables.zeros(env.n_states, 2), batch, 0.8, 0.1, 1)


class TestFlatCritic:
    def test_converges_to_per_state_mean_return(self, rng):
        trajs = [random_trajectory(rng, 6, 2, 3) for _ in range(100)]
        batch = FlatCriticBatch.from_trajectories(trajs, 0.9, 6)
        v, mses = fit_flat_critic(np.zeros(6), batch, lr=0.5, epochs=5)
        assert np.allclose(v[batch.w > 0], batch.mean_targets()[batch.w > 0])
        assert mses[0] >= mses[-1]

    def test_flat_fixed_point_matches_oracle(self, rng):
        env = FetchChain(2, 3)
        p = PolicyParams.random(rng, env.n_states, 2, env.n_actions, scale=0.6)
        gamma = 0.9
        dist = enumerate_trajectories(env, p)
        batch = FlatCriticBatch.from_trajectories(
            [t for t, _ in dist], gamma, env.n_states, [w for _, w in dist])
        v, _ = fit_flat_critic(np.zeros(env.n_states), batch, lr=0.5, epochs=5)
        vals = oracle_values(env, p, gamma)
        assert np.max(np.abs(v - vals.v_flat)[vals.flat_defined]) < 1e-12
