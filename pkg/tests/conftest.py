from __future__ import annotations

import numpy as np
import pytest

from segrl.core import KEEP, SWITCH, Trajectory, TurnRecord


def traj_from(qs, rewards, done=True, states=None, subgoals=None, actions=None,
              final_state=0, lp_switch=None):
    """Build a structurally valid trajectory from compact per-turn lists.

    Subgoals default to a fresh id on every switch; states/actions default
    to the turn index / zero.
    """
    turns = []
    prev = None
    fresh = 0
    for t, (q, r) in enumerate(zip(qs, rewards)):
        if subgoals is not None:
            o = subgoals[t]
        elif q == SWITCH:
            o = fresh
            fresh += 1
        else:
            o = prev
        turns.append(TurnRecord(
            t=t,
            state=states[t] if states is not None else t,
            prev_subgoal=prev,
            q=q,
            subgoal=o,
            action=actions[t] if actions is not None else 0,
            reward=float(r),
            raw_reward=float(r),
            done=done and t == len(qs) - 1,
            lp_switch=None if (t == 0 or lp_switch is None) else lp_switch[t],
        ))
        prev = o
    return Trajectory(tuple(turns), truncated=not done,
                      final_state=None if done else final_state)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
