"""Columnar episode buffers and vectorized rollout / advantage kernels.

TurnTable stores a batch of episodes as padded (n_episodes, max_turns)
arrays.  The kernels here mirror the per-trajectory reference functions in
`core`, `critic` and `advantages` exactly (the tests assert agreement) but
run as a handful of numpy passes, which is what makes the Monte-Carlo
verification suites and the trainer fast.  Because every random draw is
keyed by (seed, episode, turn, head), a vectorized batch reproduces the
one-episode `policy.rollout` bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .advantages import GAEConfig, whiten
from .core import KEEP, SWITCH, Trajectory, TurnRecord
from .critic import CriticBatch, FlatCriticBatch, ValueTables, _BOOT_HIGH, _BOOT_LOW, _TERMINAL
from .envs import EnvModel, transition_tables
from .policy import PolicyParams, log_softmax, softmax
from .rng import HEAD_ACTION, HEAD_SUBGOAL, HEAD_SWITCH, counter_uniform


@dataclass
class TurnTable:
    """Padded columnar batch of episodes; `mask` marks real turns."""

    state: np.ndarray          # (n, T) int64
    prev_subgoal: np.ndarray   # (n, T) int64, -1 where absent
    q: np.ndarray              # (n, T) int64
    subgoal: np.ndarray        # (n, T) int64
    action: np.ndarray         # (n, T) int64
    reward: np.ndarray         # (n, T) float64 (shaped)
    raw_reward: np.ndarray     # (n, T) float64
    lp_switch: np.ndarray      # (n, T) float64, NaN where absent
    lp_subgoal: np.ndarray     # (n, T) float64, NaN where absent
    lp_action: np.ndarray      # (n, T) float64, NaN where absent
    format_ok: np.ndarray      # (n, T) bool
    mask: np.ndarray           # (n, T) bool
    length: np.ndarray         # (n,) int64
    terminated: np.ndarray     # (n,) bool
    final_state: np.ndarray    # (n,) int64, -1 when unknown
    weight: np.ndarray         # (n,) float64

    @property
    def n_episodes(self) -> int:
        return self.state.shape[0]

    @property
    def max_turns(self) -> int:
        return self.state.shape[1]

    @property
    def total_turns(self) -> int:
        return int(self.length.sum())

    @classmethod
    def from_trajectories(cls, trajectories, weights=None) -> "TurnTable":
        trajs = list(trajectories)
        n = len(trajs)
        t_max = max(tr.n_turns for tr in trajs)
        tt = _empty_table(n, t_max)
        for i, tr in enumerate(trajs):
            tt.length[i] = tr.n_turns
            tt.terminated[i] = tr.terminated
            tt.final_state[i] = -1 if tr.final_state is None else tr.final_state
            tt.weight[i] = 1.0 if weights is None else float(weights[i])
            for t, u in enumerate(tr.turns):
                tt.state[i, t] = u.state
                tt.prev_subgoal[i, t] = -1 if u.prev_subgoal is None else u.prev_subgoal
                tt.q[i, t] = u.q
                tt.subgoal[i, t] = u.subgoal
                tt.action[i, t] = u.action
                tt.reward[i, t] = u.reward
                tt.raw_reward[i, t] = u.raw_reward
                if u.lp_switch is not None:
                    tt.lp_switch[i, t] = u.lp_switch
                if u.lp_subgoal is not None:
                    tt.lp_subgoal[i, t] = u.lp_subgoal
                if u.lp_action is not None:
                    tt.lp_action[i, t] = u.lp_action
                tt.format_ok[i, t] = u.format_valid
                tt.mask[i, t] = True
        return tt

    def to_trajectories(self) -> list[Trajectory]:
        out = []
        for i in range(self.n_episodes):
            turns = []
            for t in range(int(self.length[i])):
                done = self.terminated[i] and t == self.length[i] - 1
                turns.append(TurnRecord(
                    t=t,
                    state=int(self.state[i, t]),
                    prev_subgoal=None if self.prev_subgoal[i, t] < 0 else int(self.prev_subgoal[i, t]),
                    q=int(self.q[i, t]),
                    subgoal=int(self.subgoal[i, t]),
                    action=int(self.action[i, t]),
                    reward=float(self.reward[i, t]),
                    raw_reward=float(self.raw_reward[i, t]),
                    done=bool(done),
                    lp_switch=_none_if_nan(self.lp_switch[i, t]),
                    lp_subgoal=_none_if_nan(self.lp_subgoal[i, t]),
                    lp_action=_none_if_nan(self.lp_action[i, t]),
                    format_valid=bool(self.format_ok[i, t]),
                ))
            fs = int(self.final_state[i])
            out.append(Trajectory(tuple(turns), truncated=not bool(self.terminated[i]),
                                  final_state=None if fs < 0 else fs))
        return out


def _none_if_nan(x: float):
    return None if np.isnan(x) else float(x)


def _empty_table(n: int, t_max: int) -> TurnTable:
    shape = (n, t_max)
    return TurnTable(
        state=np.zeros(shape, dtype=np.int64),
        prev_subgoal=np.full(shape, -1, dtype=np.int64),
        q=np.zeros(shape, dtype=np.int64),
        subgoal=np.zeros(shape, dtype=np.int64),
        action=np.zeros(shape, dtype=np.int64),
        reward=np.zeros(shape, dtype=np.float64),
        raw_reward=np.zeros(shape, dtype=np.float64),
        lp_switch=np.full(shape, np.nan),
        lp_subgoal=np.full(shape, np.nan),
        lp_action=np.full(shape, np.nan),
        format_ok=np.ones(shape, dtype=bool),
        mask=np.zeros(shape, dtype=bool),
        length=np.zeros(n, dtype=np.int64),
        terminated=np.zeros(n, dtype=bool),
        final_state=np.full(n, -1, dtype=np.int64),
        weight=np.ones(n, dtype=np.float64),
    )


def _sample_rows(logits: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorized inverse-CDF over normalized softmax rows.

    Matches policy._sample_row exactly (same normalization and the same
    searchsorted 'right' tie behavior).
    """
    probs = softmax(logits, axis=1)
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    idx = np.sum(cdf <= u[:, None], axis=1)
    return np.minimum(idx, logits.shape[1] - 1).astype(np.int64)


def rollout_batch(env: EnvModel, params: PolicyParams, n_episodes: int, seed: int,
                  horizon: int | None = None, c_keep: float = 0.0,
                  episode_offset: int = 0, greedy: bool = False) -> TurnTable:
    """Collect a batch of episodes in lockstep across vectorized turns."""
    horizon = env.horizon if horizon is None else horizon
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    nxt_tab, rew_tab, done_tab = transition_tables(env)
    n = int(n_episodes)
    tt = _empty_table(n, horizon)
    ep_ids = episode_offset + np.arange(n, dtype=np.int64)

    starts = env.initial_states()
    if len(starts) == 1:
        state = np.full(n, starts[0][0], dtype=np.int64)
    else:
        u0 = counter_uniform(seed, ep_ids, 0, 3)
        cdf = np.cumsum([p for _, p in starts])
        cdf = cdf / cdf[-1]
        pick = np.searchsorted(cdf, u0, side="right")
        state = np.array([starts[int(min(k, len(starts) - 1))][0] for k in pick],
                         dtype=np.int64)

    prev = np.full(n, -1, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for t in range(horizon):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        s = state[idx]
        p = prev[idx]
        if t == 0:
            q = np.ones(idx.size, dtype=np.int64)
            lp_sw = np.full(idx.size, np.nan)
        else:
            logits = params.switch[s, p]
            if greedy:
                q = np.argmax(logits, axis=1).astype(np.int64)
            else:
                q = _sample_rows(logits, counter_uniform(seed, ep_ids[idx], t, HEAD_SWITCH))
            lp_sw = log_softmax(logits, axis=1)[np.arange(idx.size), q]
        switching = q == SWITCH
        o = p.copy()
        if switching.any():
            sw = np.flatnonzero(switching)
            logits = params.subgoal[s[sw]]
            if greedy:
                o_new = np.argmax(logits, axis=1).astype(np.int64)
            else:
                o_new = _sample_rows(logits, counter_uniform(seed, ep_ids[idx][sw], t, HEAD_SUBGOAL))
            o[sw] = o_new
        lp_hi = np.full(idx.size, np.nan)
        if switching.any():
            sw = np.flatnonzero(switching)
            lp_hi[sw] = log_softmax(params.subgoal[s[sw]], axis=1)[np.arange(sw.size), o[sw]]
        logits = params.action[s, o]
        if greedy:
            a = np.argmax(logits, axis=1).astype(np.int64)
        else:
            a = _sample_rows(logits, counter_uniform(seed, ep_ids[idx], t, HEAD_ACTION))
        lp_lo = log_softmax(logits, axis=1)[np.arange(idx.size), a]

        s2 = nxt_tab[s, a]
        r = rew_tab[s, a]
        d = done_tab[s, a]

        tt.state[idx, t] = s
        tt.prev_subgoal[idx, t] = p
        tt.q[idx, t] = q
        tt.subgoal[idx, t] = o
        tt.action[idx, t] = a
        tt.reward[idx, t] = r
        tt.raw_reward[idx, t] = r
        tt.lp_switch[idx, t] = lp_sw if not greedy else np.nan
        tt.lp_subgoal[idx, t] = lp_hi if not greedy else np.nan
        tt.lp_action[idx, t] = lp_lo if not greedy else np.nan
        tt.mask[idx, t] = True
        tt.length[idx] += 1

        fin = idx[d]
        tt.terminated[fin] = True
        tt.final_state[fin] = s2[d]
        cont = idx[~d]
        state[cont] = s2[~d]
        prev[cont] = o[~d]
        alive[fin] = False

    still = np.flatnonzero(alive)
    tt.final_state[still] = state[still]  # truncated at the horizon
    if c_keep > 0.0:
        keeps = tt.mask & (tt.q == KEEP)
        tt.reward[keeps] -= c_keep
    return tt


# ---------------------------------------------------------------------------
# Segment structure and advantage kernels
# ---------------------------------------------------------------------------

@dataclass
class SegmentMasks:
    is_boundary: np.ndarray    # (n, T) q==1 on valid turns
    seg_final: np.ndarray      # (n, T) last turn of its segment
    seg_end: np.ndarray        # (n, T) index of the next boundary (or length)
    is_last: np.ndarray        # (n, T) last turn of the episode


def segment_masks(tt: TurnTable) -> SegmentMasks:
    n, t_max = tt.mask.shape
    cols = np.arange(t_max)
    is_last = tt.mask & (cols[None, :] == (tt.length - 1)[:, None])
    is_boundary = tt.mask & (tt.q == SWITCH)
    next_boundary = np.zeros((n, t_max), dtype=bool)
    if t_max > 1:
        next_boundary[:, :-1] = is_boundary[:, 1:]
    seg_final = tt.mask & (is_last | next_boundary)
    seg_end = np.zeros((n, t_max), dtype=np.int64)
    carry = tt.length.copy()
    for t in range(t_max - 1, -1, -1):
        seg_end[:, t] = carry
        carry = np.where(is_boundary[:, t], t, carry)
    return SegmentMasks(is_boundary, seg_final, seg_end, is_last)


def returns_matrix(tt: TurnTable, gamma: float, raw: bool = False) -> np.ndarray:
    """Per-turn return-to-go, zero beyond episode length."""
    r = np.where(tt.mask, tt.raw_reward if raw else tt.reward, 0.0)
    out = np.zeros_like(r)
    carry = np.zeros(tt.n_episodes)
    for t in range(tt.max_turns - 1, -1, -1):
        carry = r[:, t] + gamma * carry
        out[:, t] = np.where(tt.mask[:, t], carry, 0.0)
        carry = np.where(tt.mask[:, t], carry, 0.0)
    return out


def _bootstrap_next(tt: TurnTable, tables: ValueTables, sm: SegmentMasks) -> np.ndarray:
    """v_next per turn: low head inside a segment, high head at boundaries,
    zero past terminal states, table value at truncation."""
    n, t_max = tt.mask.shape
    out = np.zeros((n, t_max))
    nxt_state = np.zeros((n, t_max), dtype=np.int64)
    if t_max > 1:
        nxt_state[:, :-1] = tt.state[:, 1:]
    interior = tt.mask & ~sm.seg_final
    out[interior] = tables.v_low[nxt_state[interior], tt.subgoal[interior]]
    mid_boundary = sm.seg_final & ~sm.is_last
    out[mid_boundary] = tables.v_high[nxt_state[mid_boundary]]
    trunc_last = sm.is_last & ~tt.terminated[:, None]
    if trunc_last.any():
        rows = np.flatnonzero(trunc_last.any(axis=1))
        if (tt.final_state[rows] < 0).any():
            raise ValueError("truncated episode without final_state")
        out[trunc_last] = tables.v_high[tt.final_state[rows]]
    # terminal last turns keep 0
    return out


@dataclass
class BatchAdvantages:
    """Padded advantage arrays; entries outside their mask are zero/NaN."""

    a_low: np.ndarray        # (n, T)
    a_high: np.ndarray       # (n, T), nonzero only at boundary turns
    a_switch: np.ndarray     # (n, T), NaN at t = 0 and outside mask
    a_flat: np.ndarray | None
    masks: SegmentMasks


def advantage_arrays(tt: TurnTable, tables: ValueTables, cfg: GAEConfig,
                     params: PolicyParams | None = None,
                     v_flat: np.ndarray | None = None) -> BatchAdvantages:
    """Vectorized counterpart of advantages.estimate_batch on a TurnTable."""
    sm = segment_masks(tt)
    n, t_max = tt.mask.shape
    gamma = cfg.gamma
    cols = np.arange(t_max)

    # low level
    boot = _bootstrap_next(tt, tables, sm)
    d_low = np.where(tt.mask,
                     tt.reward + gamma * boot - tables.v_low[tt.state, tt.subgoal],
                     0.0)
    a_low = np.zeros_like(d_low)
    carry = np.zeros(n)
    decay = gamma * cfg.lambda_low
    for t in range(t_max - 1, -1, -1):
        carry = np.where(sm.seg_final[:, t], d_low[:, t], d_low[:, t] + decay * carry)
        a_low[:, t] = np.where(tt.mask[:, t], carry, 0.0)
        carry = np.where(tt.mask[:, t], carry, 0.0)

    # high level (per boundary turn)
    g = returns_matrix(tt, gamma)
    seg_len = np.where(sm.is_boundary, sm.seg_end - cols[None, :], 0)
    gtilde = np.where(sm.is_boundary, gamma ** seg_len.astype(np.float64), 0.0)
    g_at_end = np.zeros((n, t_max))
    in_range = sm.is_boundary & (sm.seg_end < tt.length[:, None])
    rows, ts = np.nonzero(in_range)
    g_at_end[rows, ts] = g[rows, sm.seg_end[rows, ts]]
    rtilde = np.where(sm.is_boundary, g - gtilde * g_at_end, 0.0)
    boot_high = np.zeros((n, t_max))
    rows, ts = np.nonzero(in_range)
    boot_high[rows, ts] = tables.v_high[tt.state[rows, sm.seg_end[rows, ts]]]
    closing = sm.is_boundary & (sm.seg_end >= tt.length[:, None]) & ~tt.terminated[:, None]
    if closing.any():
        rows = np.nonzero(closing)[0]
        if (tt.final_state[rows] < 0).any():
            raise ValueError("truncated episode without final_state")
        boot_high[closing] = tables.v_high[tt.final_state[rows]]
    d_high = np.where(sm.is_boundary,
                      rtilde + gtilde * boot_high - tables.v_high[tt.state], 0.0)
    a_high = np.zeros_like(d_high)
    carry = np.zeros(n)
    for t in range(t_max - 1, -1, -1):
        fresh = d_high[:, t] + gtilde[:, t] * cfg.lambda_high * carry
        a_high[:, t] = np.where(sm.is_boundary[:, t], fresh, 0.0)
        carry = np.where(sm.is_boundary[:, t], fresh, carry)

    # switching level
    beta = _behavior_beta(tt, params)
    gain = tables.v_high[tt.state] - _v_low_prev(tt, tables)
    a_switch = np.where(tt.mask & (cols[None, :] > 0),
                        (tt.q - beta) * gain, np.nan)

    # flat comparator
    a_flat = None
    if v_flat is not None:
        v_flat = np.asarray(v_flat, dtype=np.float64)
        nxt_state = np.zeros((n, t_max), dtype=np.int64)
        if t_max > 1:
            nxt_state[:, :-1] = tt.state[:, 1:]
        boot_f = np.zeros((n, t_max))
        inner = tt.mask & ~sm.is_last
        boot_f[inner] = v_flat[nxt_state[inner]]
        trunc_last = sm.is_last & ~tt.terminated[:, None]
        if trunc_last.any():
            rows = np.flatnonzero(trunc_last.any(axis=1))
            boot_f[trunc_last] = v_flat[tt.final_state[rows]]
        d_flat = np.where(tt.mask, tt.reward + gamma * boot_f - v_flat[tt.state], 0.0)
        a_flat = np.zeros_like(d_flat)
        carry = np.zeros(n)
        decay = gamma * cfg.lambda_flat
        for t in range(t_max - 1, -1, -1):
            carry = d_flat[:, t] + decay * carry
            a_flat[:, t] = np.where(tt.mask[:, t], carry, 0.0)
            carry = np.where(tt.mask[:, t], carry, 0.0)

    if cfg.whiten == "per-level":
        a_low[tt.mask] = whiten(a_low[tt.mask])
        a_high[sm.is_boundary] = whiten(a_high[sm.is_boundary])
        sw_mask = tt.mask & (cols[None, :] > 0)
        a_switch[sw_mask] = whiten(a_switch[sw_mask])
        if a_flat is not None:
            a_flat[tt.mask] = whiten(a_flat[tt.mask])

    return BatchAdvantages(a_low, a_high, a_switch, a_flat, sm)


def _behavior_beta(tt: TurnTable, params: PolicyParams | None) -> np.ndarray:
    """Switch probability of the behavior policy, per turn (NaN at t=0)."""
    beta = np.full(tt.mask.shape, np.nan)
    has_lp = tt.mask & ~np.isnan(tt.lp_switch)
    p = np.exp(tt.lp_switch[has_lp])
    beta[has_lp] = np.where(tt.q[has_lp] == SWITCH, p, 1.0 - p)
    cols = np.arange(tt.max_turns)
    need = tt.mask & (cols[None, :] > 0) & np.isnan(beta)
    if need.any():
        if params is None:
            raise ValueError("turns lack behavior log-probs and no params were given")
        probs = softmax(params.switch[tt.state[need], tt.prev_subgoal[need]], axis=1)
        beta[need] = probs[:, SWITCH]
    return beta


def _v_low_prev(tt: TurnTable, tables: ValueTables) -> np.ndarray:
    """v_low at (state, previous subgoal); zero where no previous subgoal."""
    out = np.zeros(tt.mask.shape)
    ok = tt.mask & (tt.prev_subgoal >= 0)
    out[ok] = tables.v_low[tt.state[ok], tt.prev_subgoal[ok]]
    return out


# ---------------------------------------------------------------------------
# Critic batch construction from a TurnTable (vectorized)
# ---------------------------------------------------------------------------

def critic_batch_from_table(tt: TurnTable, gamma: float, n_states: int,
                            n_options: int) -> CriticBatch:
    sm = segment_masks(tt)
    n, t_max = tt.mask.shape
    rows_i, ts = np.nonzero(tt.mask)
    cell = tt.state[rows_i, ts] * n_options + tt.subgoal[rows_i, ts]
    r = tt.reward[rows_i, ts]
    w = tt.weight[rows_i]
    terminal = tt.terminated[rows_i] & sm.is_last[rows_i, ts]
    final_here = sm.is_last[rows_i, ts] & ~tt.terminated[rows_i]
    segf = sm.seg_final[rows_i, ts]
    nxt_state = np.zeros((n, t_max), dtype=np.int64)
    if t_max > 1:
        nxt_state[:, :-1] = tt.state[:, 1:]
    kind = np.full(rows_i.shape, _BOOT_LOW, dtype=np.int64)
    boot = nxt_state[rows_i, ts] * n_options + tt.subgoal[rows_i, ts]
    hi = segf & ~terminal
    kind[hi] = _BOOT_HIGH
    boot[hi] = np.where(final_here[hi], tt.final_state[rows_i[hi]],
                        nxt_state[rows_i[hi], ts[hi]])
    kind[terminal] = _TERMINAL
    boot[terminal] = 0
    if (boot < 0).any():
        raise ValueError("truncated episode without final_state")

    b_rows, b_ts = np.nonzero(sm.is_boundary)
    g = returns_matrix(tt, gamma)
    seg_len = sm.seg_end[b_rows, b_ts] - b_ts
    gtilde = gamma ** seg_len.astype(np.float64)
    ends = sm.seg_end[b_rows, b_ts]
    open_end = ends < tt.length[b_rows]
    g_end = np.where(open_end, g[b_rows, np.minimum(ends, t_max - 1)], 0.0)
    rtilde = g[b_rows, b_ts] - gtilde * g_end
    hi_cell = tt.state[b_rows, b_ts]
    hi_kind = np.full(b_rows.shape, _BOOT_HIGH, dtype=np.int64)
    hi_boot = np.zeros(b_rows.shape, dtype=np.int64)
    hi_boot[open_end] = tt.state[b_rows[open_end], ends[open_end]]
    closed_term = ~open_end & tt.terminated[b_rows]
    hi_kind[closed_term] = _TERMINAL
    closed_trunc = ~open_end & ~tt.terminated[b_rows]
    hi_boot[closed_trunc] = tt.final_state[b_rows[closed_trunc]]
    if (hi_boot < 0).any():
        raise ValueError("truncated episode without final_state")

    rows = {
        "lo_cell": cell, "lo_r": r, "lo_kind": kind, "lo_boot": boot, "lo_w": w,
        "hi_cell": hi_cell, "hi_r": rtilde, "hi_disc": gtilde,
        "hi_kind": hi_kind, "hi_boot": hi_boot, "hi_w": tt.weight[b_rows],
    }
    return CriticBatch.from_rows(rows, gamma, n_states, n_options)


def flat_batch_from_table(tt: TurnTable, gamma: float, n_states: int) -> FlatCriticBatch:
    g = returns_matrix(tt, gamma)
    rows_i, ts = np.nonzero(tt.mask)
    rows = {"state": tt.state[rows_i, ts], "g": g[rows_i, ts], "w": tt.weight[rows_i]}
    batch = FlatCriticBatch(n_states, np.zeros(n_states), np.zeros(n_states), rows=rows)
    np.add.at(batch.w, rows["state"], rows["w"])
    np.add.at(batch.g, rows["state"], rows["w"] * rows["g"])
    return batch


# ---------------------------------------------------------------------------
# Episode statistics used by the trainer's metrics
# ---------------------------------------------------------------------------

@dataclass
class BatchStats:
    mean_return: float        # undiscounted raw return per episode
    mean_shaped_return: float
    success_rate: float
    mean_segments: float
    mean_seg_len: float       # total turns / total segments
    switch_rate: float
    mean_length: float


def batch_stats(tt: TurnTable, goal_state: int | None = None) -> BatchStats:
    raw = np.where(tt.mask, tt.raw_reward, 0.0).sum(axis=1)
    shaped = np.where(tt.mask, tt.reward, 0.0).sum(axis=1)
    switches = (tt.mask & (tt.q == SWITCH)).sum(axis=1)
    total_turns = int(tt.length.sum())
    total_segments = int(switches.sum())
    if goal_state is None:
        success = tt.terminated & (raw > 0)
    else:
        success = tt.terminated & (tt.final_state == goal_state)
    return BatchStats(
        mean_return=float(raw.mean()),
        mean_shaped_return=float(shaped.mean()),
        success_rate=float(success.mean()),
        mean_segments=float(switches.mean()),
        mean_seg_len=float(total_turns / total_segments) if total_segments else 0.0,
        switch_rate=float(total_segments / total_turns) if total_turns else 0.0,
        mean_length=float(tt.length.mean()),
    )
