import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segrl.core import (KEEP, SWITCH, MalformedTrajectory, apply_keep_penalty,
                        episode_return, read_trajectories, return_to_go,
                        returns_to_go, segment_boundaries, segment_views,
                        validate_trajectory, write_trajectories)
from segrl.oracle import random_trajectory

from conftest import traj_from


class TestSegmentBoundaries:
    def test_single_turn(self):
        assert segment_boundaries(traj_from([1], [0.0])) == [0, 1]

    def test_interior_switches(self):
        traj = traj_from([1, 0, 0, 1, 0], [0.0] * 5)
        assert segment_boundaries(traj) == [0, 3, 5]

    def test_every_turn_switches(self):
        assert segment_boundaries(traj_from([1, 1, 1], [0.0] * 3)) == [0, 1, 2, 3]

    def test_rejects_missing_first_switch(self):
        bad = traj_from([1, 0], [0.0, 0.0])
        bad = bad.__class__(turns=(bad.turns[0]._replace(q=KEEP),) + bad.turns[1:])
        with pytest.raises(MalformedTrajectory):
            segment_boundaries(bad)


class TestSegmentViews:
    def test_zero_rewards(self):
        (seg,) = segment_views(traj_from([1, 0, 0], [0, 0, 0]), gamma=1.0)
        assert seg.reward == 0.0 and seg.discount == 1.0

    def test_hand_evaluated_sum(self):
        (seg,) = segment_views(traj_from([1, 0, 0], [1, 2, 4]), gamma=0.5)
        assert seg.reward == pytest.approx(3.0, abs=1e-15)
        assert seg.discount == pytest.approx(0.125, abs=1e-15)

    def test_single_terminal_turn(self):
        (seg,) = segment_views(traj_from([1], [10.0]), gamma=0.9)
        assert seg.reward == 10.0 and seg.discount == pytest.approx(0.9)

    def test_gamma_range(self):
        with pytest.raises(ValueError):
            segment_views(traj_from([1], [0.0]), gamma=0.0)


class TestReturnToGo:
    def test_zero_discount(self):
        traj = traj_from([1, 0, 0], [3.0, 5.0, 7.0])
        for t in range(3):
            assert return_to_go(traj, 0.0, t) == traj.turns[t].reward

    def test_undiscounted_sum(self):
        assert return_to_go(traj_from([1, 0, 0], [1, 1, 1]), 1.0, 0) == 3.0

    def test_discounted_tail(self):
        assert return_to_go(traj_from([1, 0, 0], [0, 0, 10]), 0.5, 0) == 2.5

    def test_index_error(self):
        with pytest.raises(IndexError):
            return_to_go(traj_from([1], [0.0]), 1.0, 1)

    def test_matches_batch_helper(self, rng):
        traj = random_trajectory(rng, 6, 2, 3)
        g = returns_to_go(traj, 0.9)
        for t in range(traj.n_turns):
            assert g[t] == pytest.approx(return_to_go(traj, 0.9, t), abs=1e-12)


class TestKeepPenalty:
    def test_zero_penalty_identity(self):
        traj = traj_from([1, 0, 0], [0, 0, 10])
        assert apply_keep_penalty(traj, 0.0) is traj

    def test_per_definition_subtraction(self):
        shaped = apply_keep_penalty(traj_from([1, 0, 0], [0, 0, 10]), 0.3)
        assert [u.reward for u in shaped.turns] == pytest.approx([0.0, -0.3, 9.7])
        assert [u.raw_reward for u in shaped.turns] == [0.0, 0.0, 10.0]

    def test_idempotent_only_at_zero(self):
        traj = traj_from([1, 0], [1.0, 1.0])
        once = apply_keep_penalty(traj, 0.3)
        twice = apply_keep_penalty(once, 0.3)
        assert once.turns[1].reward != twice.turns[1].reward

    def test_shaped_minus_raw(self, rng):
        for _ in range(20):
            traj = random_trajectory(rng, 5, 2, 3)
            shaped = apply_keep_penalty(traj, 0.25)
            keeps = sum(1 for u in traj.turns if u.q == KEEP)
            diff = sum(u.reward for u in shaped.turns) - sum(u.reward for u in traj.turns)
            assert diff == pytest.approx(-0.25 * keeps, abs=1e-12)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            apply_keep_penalty(traj_from([1], [0.0]), -0.1)


class TestPartitionProperties:
    def test_segments_partition_and_reconstruct(self, rng):
        for _ in range(100):
            traj = random_trajectory(rng, 8, 3, 4)
            gamma = float(rng.uniform(0.3, 1.0))
            views = segment_views(traj, gamma)
            covered = []
            for seg in views:
                covered.extend(range(seg.start, seg.stop))
            assert covered == list(range(traj.n_turns))
            # discounted reward reconstruction from segment offsets
            total = sum(gamma ** seg.start * seg.reward for seg in views)
            assert total == pytest.approx(episode_return(traj, gamma), abs=1e-12)

    def test_boundary_return_recursion(self, rng):
        for _ in range(100):
            traj = random_trajectory(rng, 8, 3, 4)
            gamma = float(rng.uniform(0.3, 1.0))
            bounds = segment_boundaries(traj)
            g = returns_to_go(traj, gamma)
            views = segment_views(traj, gamma)
            for seg in views:
                g_next = g[seg.stop] if seg.stop < traj.n_turns else 0.0
                assert g[seg.start] == pytest.approx(
                    seg.reward + seg.discount * g_next, abs=1e-12)
            assert bounds[0] == 0 and bounds[-1] == traj.n_turns

    @given(st.lists(st.integers(0, 1), min_size=0, max_size=12))
    @settings(max_examples=200, deadline=None)
    def test_boundaries_strictly_increasing(self, tail):
        qs = [1] + tail
        traj = traj_from(qs, [0.0] * len(qs))
        bounds = segment_boundaries(traj)
        assert bounds == sorted(set(bounds))
        assert bounds[0] == 0 and bounds[-1] == len(qs)
        interior = [t for t in range(1, len(qs)) if qs[t] == 1]
        assert bounds[1:-1] == [b for b in interior if b != len(qs)]


class TestValidation:
    def test_valid_random(self, rng):
        for _ in range(50):
            validate_trajectory(random_trajectory(rng, 6, 2, 3))

    def test_keep_must_retain_subgoal(self):
        traj = traj_from([1, 0], [0, 0], subgoals=[0, 1])
        with pytest.raises(MalformedTrajectory):
            validate_trajectory(traj)

    def test_done_only_last(self):
        traj = traj_from([1, 0], [0, 0])
        bad = traj.__class__(
            turns=(traj.turns[0]._replace(done=True), traj.turns[1]))
        with pytest.raises(MalformedTrajectory):
            validate_trajectory(bad)


class TestJsonl:
    def test_round_trip(self, rng):
        trajs = [random_trajectory(rng, 6, 2, 3) for _ in range(10)]
        buf = io.StringIO()
        write_trajectories(buf, trajs)
        buf.seek(0)
        back = list(read_trajectories(buf))
        assert len(back) == len(trajs)
        for a, b in zip(trajs, back):
            assert a.truncated == b.truncated
            assert len(a.turns) == len(b.turns)
            for ua, ub in zip(a.turns, b.turns):
                assert (ua.t, ua.state, ua.prev_subgoal, ua.q, ua.subgoal,
                        ua.action, ua.reward, ua.raw_reward, ua.done) == \
                       (ub.t, ub.state, ub.prev_subgoal, ub.q, ub.subgoal,
                        ub.action, ub.reward, ub.raw_reward, ub.done)
        # serialization is stable
        buf2 = io.StringIO()
        write_trajectories(buf2, back)
        buf_nofinal = io.StringIO()
        write_trajectories(buf_nofinal, trajs)
        assert buf2.getvalue() == buf_nofinal.getvalue()

    def test_dangling_turns_rejected(self):
        buf = io.StringIO('{"t":0,"state":0,"prev_subgoal":null,"q":1,'
                          '"subgoal":0,"subgoal_text":null,"action":0,'
                          '"reward":0.0,"raw_reward":0.0,"done":false}\n')
        with pytest.raises(MalformedTrajectory):
            list(read_trajectories(buf))
