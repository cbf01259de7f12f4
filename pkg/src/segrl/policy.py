"""Tabular softmax policy with three heads: switch, subgoal, action.

The switch head decides whether to terminate the active subgoal, the
subgoal head proposes a fresh subgoal on switch turns, and the action head
picks a primitive action conditioned on (state, subgoal).  All heads have
exact log-probabilities and analytic score-function gradients, which is
what makes the brute-force verification suites possible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import KEEP, SWITCH, Trajectory, TurnRecord, apply_keep_penalty
from .envs import EnvModel, FetchChain, DROP, LEFT, PICKUP, RIGHT
from .rng import HEAD_ACTION, HEAD_SUBGOAL, HEAD_SWITCH, CounterRng

CHECKPOINT_MAGIC = "segrl-policy v1"


@dataclass
class PolicyParams:
    """Logit tables: switch[s, o_prev, 2], subgoal[s, |O|], action[s, o, |A|]."""

    switch: np.ndarray
    subgoal: np.ndarray
    action: np.ndarray

    def __post_init__(self):
        self.switch = np.asarray(self.switch, dtype=np.float64)
        self.subgoal = np.asarray(self.subgoal, dtype=np.float64)
        self.action = np.asarray(self.action, dtype=np.float64)
        s, o = self.subgoal.shape
        if self.switch.shape != (s, o, 2):
            raise ValueError(f"switch table shape {self.switch.shape} != {(s, o, 2)}")
        if self.action.shape[:2] != (s, o):
            raise ValueError("action table must be indexed by (state, subgoal)")
        for name, table in (("switch", self.switch), ("subgoal", self.subgoal),
                            ("action", self.action)):
            if not np.all(np.isfinite(table)):
                raise ValueError(f"non-finite entries in {name} logits")

    @property
    def n_states(self) -> int:
        return self.subgoal.shape[0]

    @property
    def n_options(self) -> int:
        return self.subgoal.shape[1]

    @property
    def n_actions(self) -> int:
        return self.action.shape[2]

    @classmethod
    def uniform(cls, n_states: int, n_options: int, n_actions: int) -> "PolicyParams":
        return cls(
            switch=np.zeros((n_states, n_options, 2)),
            subgoal=np.zeros((n_states, n_options)),
            action=np.zeros((n_states, n_options, n_actions)),
        )

    @classmethod
    def random(cls, rng: np.random.Generator, n_states: int, n_options: int,
               n_actions: int, scale: float = 1.0) -> "PolicyParams":
        return cls(
            switch=scale * rng.standard_normal((n_states, n_options, 2)),
            subgoal=scale * rng.standard_normal((n_states, n_options)),
            action=scale * rng.standard_normal((n_states, n_options, n_actions)),
        )

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.switch.copy(), self.subgoal.copy(), self.action.copy())


@dataclass
class GradTables:
    """Gradient accumulator with the same shapes as PolicyParams."""

    switch: np.ndarray
    subgoal: np.ndarray
    action: np.ndarray

    @classmethod
    def zeros_like(cls, params: PolicyParams) -> "GradTables":
        return cls(np.zeros_like(params.switch), np.zeros_like(params.subgoal),
                   np.zeros_like(params.action))

    def add(self, other: "GradTables", weight: float = 1.0) -> "GradTables":
        self.switch += weight * other.switch
        self.subgoal += weight * other.subgoal
        self.action += weight * other.action
        return self

    def scale(self, c: float) -> "GradTables":
        self.switch *= c
        self.subgoal *= c
        self.action *= c
        return self

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.switch.ravel(), self.subgoal.ravel(),
                               self.action.ravel()])

    def max_abs(self) -> float:
        return max(np.max(np.abs(self.switch), initial=0.0),
                   np.max(np.abs(self.subgoal), initial=0.0),
                   np.max(np.abs(self.action), initial=0.0))


def params_as_vector(params: PolicyParams) -> np.ndarray:
    return np.concatenate([params.switch.ravel(), params.subgoal.ravel(),
                           params.action.ravel()])


def params_from_vector(vec: np.ndarray, like: PolicyParams) -> PolicyParams:
    sizes = [like.switch.size, like.subgoal.size, like.action.size]
    parts = np.split(np.asarray(vec, dtype=np.float64), np.cumsum(sizes)[:-1])
    return PolicyParams(parts[0].reshape(like.switch.shape),
                        parts[1].reshape(like.subgoal.shape),
                        parts[2].reshape(like.action.shape))


# -- softmax helpers --------------------------------------------------------

def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def switch_prob(params: PolicyParams, state: int, prev_subgoal: int) -> float:
    """Probability of SWITCH at (state, previous subgoal)."""
    return float(softmax(params.switch[state, prev_subgoal])[SWITCH])


def _sample_row(logits: np.ndarray, u: float) -> int:
    """Inverse-CDF draw over an explicitly normalized softmax row."""
    probs = softmax(logits)
    cdf = np.cumsum(probs)
    cdf /= cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


# -- per-turn log-density and score ----------------------------------------

def log_prob(params: PolicyParams, turn: TurnRecord
             ) -> tuple[float | None, float | None, float]:
    """(lp_switch, lp_subgoal, lp_action) for one turn under `params`.

    lp_switch is None at t = 0 (the first switch is forced, not sampled);
    lp_subgoal is present iff the turn switched.
    """
    lp_sw = None
    if turn.t > 0:
        if turn.prev_subgoal is None:
            raise ValueError(f"turn {turn.t}: missing prev_subgoal")
        if turn.q == KEEP and turn.subgoal != turn.prev_subgoal:
            raise ValueError(f"turn {turn.t}: KEEP with a changed subgoal")
        lp_sw = float(log_softmax(params.switch[turn.state, turn.prev_subgoal])[turn.q])
    lp_hi = None
    if turn.q == SWITCH:
        lp_hi = float(log_softmax(params.subgoal[turn.state])[turn.subgoal])
    lp_lo = float(log_softmax(params.action[turn.state, turn.subgoal])[turn.action])
    return lp_sw, lp_hi, lp_lo


def grad_log_prob(params: PolicyParams, turn: TurnRecord,
                  out: GradTables | None = None) -> GradTables:
    """Score-function gradient of the turn's log-density.

    For a chosen index i in a softmax row with probabilities p, the row
    gradient is e_i - p; heads absent from the turn contribute zero.
    """
    if out is None:
        out = GradTables.zeros_like(params)
    if turn.t > 0:
        if turn.q == KEEP and turn.subgoal != turn.prev_subgoal:
            raise ValueError(f"turn {turn.t}: KEEP with a changed subgoal")
        row = softmax(params.switch[turn.state, turn.prev_subgoal])
        out.switch[turn.state, turn.prev_subgoal] -= row
        out.switch[turn.state, turn.prev_subgoal, turn.q] += 1.0
    if turn.q == SWITCH:
        row = softmax(params.subgoal[turn.state])
        out.subgoal[turn.state] -= row
        out.subgoal[turn.state, turn.subgoal] += 1.0
    row = softmax(params.action[turn.state, turn.subgoal])
    out.action[turn.state, turn.subgoal] -= row
    out.action[turn.state, turn.subgoal, turn.action] += 1.0
    return out


# -- sampling and rollout ---------------------------------------------------

def sample_turn(params: PolicyParams, state: int, prev_subgoal: int | None,
                rng: CounterRng, t: int
                ) -> tuple[int, int, int, float | None, float | None, float]:
    """Draw (q, subgoal, action) plus the behavior log-probs for one turn.

    At t = 0 the switch is forced (q = 1) and carries no log-probability.
    """
    if t == 0 or prev_subgoal is None:
        q, lp_sw = SWITCH, None
    else:
        q = _sample_row(params.switch[state, prev_subgoal],
                        rng.uniform(t, HEAD_SWITCH))
        lp_sw = float(log_softmax(params.switch[state, prev_subgoal])[q])
    if q == SWITCH:
        o = _sample_row(params.subgoal[state], rng.uniform(t, HEAD_SUBGOAL))
        lp_hi = float(log_softmax(params.subgoal[state])[o])
    else:
        o, lp_hi = prev_subgoal, None
    a = _sample_row(params.action[state, o], rng.uniform(t, HEAD_ACTION))
    lp_lo = float(log_softmax(params.action[state, o])[a])
    return q, o, a, lp_sw, lp_hi, lp_lo


def greedy_turn(params: PolicyParams, state: int, prev_subgoal: int | None, t: int
                ) -> tuple[int, int, int]:
    """Argmax decisions; ties break toward the lowest index."""
    if t == 0 or prev_subgoal is None:
        q = SWITCH
    else:
        q = int(np.argmax(params.switch[state, prev_subgoal]))
    o = int(np.argmax(params.subgoal[state])) if q == SWITCH else prev_subgoal
    a = int(np.argmax(params.action[state, o]))
    return q, o, a


def rollout(env: EnvModel, params: PolicyParams, horizon: int, rng: CounterRng,
            c_keep: float = 0.0, greedy: bool = False) -> Trajectory:
    """Collect one episode, ending on env `done` or truncation at `horizon`.

    Behavior log-probs are stored on every turn; the KEEP penalty is folded
    into the shaped rewards while raw rewards are preserved.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    turns: list[TurnRecord] = []
    state_items = env.initial_states()
    if len(state_items) == 1:
        state = state_items[0][0]
    else:
        u = rng.uniform(0, 3)  # head 3 reserved for the initial draw
        cdf = np.cumsum([p for _, p in state_items])
        state = state_items[int(np.searchsorted(cdf / cdf[-1], u, side="right"))][0]
    prev: int | None = None
    truncated = False
    final_state: int | None = None
    for t in range(horizon):
        if greedy:
            q, o, a = greedy_turn(params, state, prev, t)
            lp_sw = lp_hi = None
            lp_lo = None
        else:
            q, o, a, lp_sw, lp_hi, lp_lo = sample_turn(params, state, prev, rng, t)
        nxt, r, done = env.transition(state, a)
        turns.append(TurnRecord(
            t=t, state=state, prev_subgoal=prev, q=q, subgoal=o, action=a,
            reward=r, raw_reward=r, done=done,
            lp_switch=lp_sw, lp_subgoal=lp_hi, lp_action=lp_lo,
        ))
        if done:
            final_state = nxt
            break
        state, prev = nxt, o
    else:
        truncated = True
        final_state = state
    traj = Trajectory(tuple(turns), truncated=truncated, final_state=final_state,
                      seed=rng.seed)
    return apply_keep_penalty(traj, c_keep)


def fetchchain_expert(env: FetchChain, n_options: int = 2,
                      sharpness: float = 20.0) -> PolicyParams:
    """Hand-coded near-deterministic params that solve FetchChain optimally.

    Subgoal 0 is used while fetching, subgoal 1 (when available) while
    returning; the switch head flips exactly when carrying status changes.
    """
    params = PolicyParams.uniform(env.n_states, n_options, env.n_actions)
    fetch, deliver = 0, min(1, n_options - 1)
    for s in range(env.n_states):
        if env.is_terminal(s):
            continue
        pos, carrying, _ = env.decode(s)
        want = deliver if carrying else fetch
        params.subgoal[s, want] = sharpness
        for o_prev in range(n_options):
            q = SWITCH if o_prev != want else KEEP
            params.switch[s, o_prev, q] = sharpness
        if carrying:
            best = DROP if pos == 0 else LEFT
        else:
            best = PICKUP if pos == env.length - 1 else RIGHT
        params.action[s, :, best] = sharpness
    return params


def with_behavior_logprobs(traj: Trajectory, params: PolicyParams) -> Trajectory:
    """Return a copy whose behavior log-probs come from `params`.

    Useful for turning ingested or synthetic trajectories into valid
    optimizer input (ratios need the collection-time log-probabilities).
    """
    turns = []
    for u in traj.turns:
        lp_sw, lp_hi, lp_lo = log_prob(params, u)
        turns.append(u._replace(lp_switch=lp_sw, lp_subgoal=lp_hi, lp_action=lp_lo))
    from dataclasses import replace as _replace
    return _replace(traj, turns=tuple(turns))


def fetchchain_phased(env: FetchChain, rng: np.random.Generator,
                      n_options: int = 2, base: float = 2.5,
                      noise: float = 0.3) -> PolicyParams:
    """Random params structured like a partially trained FetchChain policy.

    Under the phase-matching subgoal the position-correct action gets a
    logit bonus of `base` (a soft expert); under any other subgoal actions
    stay near uniform, so subgoals carry real return information.  The
    subgoal head prefers the phase-appropriate subgoal and the switch head
    prefers keeping a matching one.  Gaussian noise of size `noise` is added
    everywhere.  Every decision keeps probability bounded away from zero, so
    sampled statistics at every reachable context stay well behaved.
    """
    params = PolicyParams.random(rng, env.n_states, n_options, env.n_actions,
                                 scale=noise)
    fetch, deliver = 0, min(1, n_options - 1)
    for s in range(env.n_states):
        if env.is_terminal(s):
            continue
        pos, carrying, _ = env.decode(s)
        phase = deliver if carrying else fetch
        if carrying:
            best = DROP if pos == 0 else LEFT
        else:
            best = PICKUP if pos == env.length - 1 else RIGHT
        params.action[s, phase, best] += base
        params.subgoal[s, phase] += 0.5
        for o_prev in range(n_options):
            good = SWITCH if o_prev != phase else KEEP
            params.switch[s, o_prev, good] += 0.3
    return params


# -- checkpoint format ------------------------------------------------------
#
# Text file, stable across versions:
#   line 1: "segrl-policy v1"
#   line 2: "<n_states> <n_options> <n_actions>"
#   then, for each of the tables switch / subgoal / action:
#     a line "table <name> <count>" followed by <count> lines, one value
#     each (repr round-trips float64 exactly), in row-major order.

def save_policy(path, params: PolicyParams) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        fp.write(CHECKPOINT_MAGIC + "\n")
        fp.write(f"{params.n_states} {params.n_options} {params.n_actions}\n")
        for name in ("switch", "subgoal", "action"):
            table = getattr(params, name)
            fp.write(f"table {name} {table.size}\n")
            for v in table.ravel():
                fp.write(repr(float(v)) + "\n")


def load_policy(path) -> PolicyParams:
    with open(path, "r", encoding="utf-8") as fp:
        magic = fp.readline().strip()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a policy checkpoint: {magic!r}")
        n_s, n_o, n_a = (int(x) for x in fp.readline().split())
        shapes = {"switch": (n_s, n_o, 2), "subgoal": (n_s, n_o),
                  "action": (n_s, n_o, n_a)}
        tables = {}
        for _ in range(3):
            tag, name, count = fp.readline().split()
            if tag != "table" or name not in shapes:
                raise ValueError(f"corrupt checkpoint near table {name!r}")
            vals = np.array([float(fp.readline()) for _ in range(int(count))])
            tables[name] = vals.reshape(shapes[name])
        return PolicyParams(**tables)
