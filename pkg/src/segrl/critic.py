"""Two-head value baselines and their coupled bootstrapped regression targets.

The high head values states at switch decision points; the low head values
(state, subgoal) pairs during subgoal commitment.  The two heads are coupled:
the final turn of every segment bootstraps to the high-head value at the next
boundary, so low-level estimates stay consistent with boundary-to-boundary
progress.  Fitting is full-batch tabular regression: every visited cell takes
a gradient step on the mean squared error of its own visits, with targets
recomputed from the updated tables each epoch (fitted value iteration).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import SWITCH, Trajectory, segment_views

_TERMINAL, _BOOT_HIGH, _BOOT_LOW = 0, 1, 2


@dataclass
class ValueTables:
    """v_high[s] and v_low[s, o].  Terminal states are never written and
    stay at zero, matching the terminal-bootstrap rule."""

    v_high: np.ndarray
    v_low: np.ndarray

    def __post_init__(self):
        self.v_high = np.asarray(self.v_high, dtype=np.float64)
        self.v_low = np.asarray(self.v_low, dtype=np.float64)
        if self.v_low.ndim != 2 or self.v_high.shape != (self.v_low.shape[0],):
            raise ValueError("v_high must be (S,) and v_low (S, O)")

    @property
    def n_states(self) -> int:
        return self.v_high.shape[0]

    @property
    def n_options(self) -> int:
        return self.v_low.shape[1]

    @classmethod
    def zeros(cls, n_states: int, n_options: int) -> "ValueTables":
        return cls(np.zeros(n_states), np.zeros((n_states, n_options)))

    def copy(self) -> "ValueTables":
        return ValueTables(self.v_high.copy(), self.v_low.copy())


def v_next(traj: Trajectory, tables: ValueTables, t: int) -> float:
    """Bootstrap value for turn t.

    Interior turns look up the low head at (s_{t+1}, current subgoal);
    segment-final turns look up the high head at the boundary state.
    A terminal next state bootstraps 0; a truncated episode bootstraps the
    table value at the recorded final state.
    """
    if not 0 <= t < traj.n_turns:
        raise IndexError(f"turn {t} out of range")
    turn = traj.turns[t]
    if turn.done:
        return 0.0
    if t == traj.n_turns - 1:
        # truncated: the (implicit) final boundary closes the segment here
        if traj.final_state is None:
            raise ValueError("truncated trajectory without final_state")
        return float(tables.v_high[traj.final_state])
    nxt = traj.turns[t + 1]
    if nxt.q == SWITCH:
        return float(tables.v_high[nxt.state])
    return float(tables.v_low[nxt.state, turn.subgoal])


def high_targets(traj: Trajectory, tables: ValueTables, gamma: float) -> np.ndarray:
    """Segment-level bootstrapped targets, one per segment."""
    views = segment_views(traj, gamma)
    t_total = traj.n_turns
    out = np.empty(len(views), dtype=np.float64)
    for seg in views:
        if seg.stop < t_total:
            boot = float(tables.v_high[traj.turns[seg.stop].state])
        elif traj.terminated:
            boot = 0.0
        else:
            if traj.final_state is None:
                raise ValueError("truncated trajectory without final_state")
            boot = float(tables.v_high[traj.final_state])
        out[seg.k] = seg.reward + seg.discount * boot
    return out


def low_targets(traj: Trajectory, tables: ValueTables, gamma: float) -> np.ndarray:
    """Turn-level bootstrapped targets y_t = r_t + gamma * v_next(t)."""
    out = np.empty(traj.n_turns, dtype=np.float64)
    for t, turn in enumerate(traj.turns):
        out[t] = turn.reward + gamma * v_next(traj, tables, t)
    return out


# ---------------------------------------------------------------------------
# Batch aggregation
#
# Per-cell mean targets are affine in the value tables, so a batch can be
# digested once into (weights, constant part, bootstrap coefficient
# matrices); the per-epoch refit is then a couple of small mat-vecs.
# ---------------------------------------------------------------------------

@dataclass
class CriticBatch:
    """Digested regression problem for both heads.

    Mean low target:  ybar_low  = (low_r + gamma*(low_mh @ v_high
                                   + low_ml @ v_low.ravel())) / low_w
    Mean high target: ybar_high = (high_r + high_m @ v_high) / high_w
    (the duration discounts are folded into high_m / high_r weights).
    Row-level arrays are kept when built from trajectories so that exact
    batch MSE can be reported; purely aggregated batches report the
    reducible (per-cell) error instead.
    """

    n_states: int
    n_options: int
    gamma: float
    low_w: np.ndarray
    low_r: np.ndarray
    low_mh: np.ndarray
    low_ml: np.ndarray
    high_w: np.ndarray
    high_r: np.ndarray
    high_m: np.ndarray
    rows: dict | None = field(default=None, repr=False)

    @classmethod
    def empty(cls, n_states: int, n_options: int, gamma: float) -> "CriticBatch":
        c = n_states * n_options
        return cls(
            n_states=n_states, n_options=n_options, gamma=gamma,
            low_w=np.zeros(c), low_r=np.zeros(c),
            low_mh=np.zeros((c, n_states)), low_ml=np.zeros((c, c)),
            high_w=np.zeros(n_states), high_r=np.zeros(n_states),
            high_m=np.zeros((n_states, n_states)),
        )

    @classmethod
    def from_trajectories(cls, trajectories, gamma: float, n_states: int,
                          n_options: int, weights=None) -> "CriticBatch":
        batch = cls.empty(n_states, n_options, gamma)
        lo_cell, lo_r, lo_kind, lo_boot, lo_w = [], [], [], [], []
        hi_cell, hi_r, hi_disc, hi_kind, hi_boot, hi_w = [], [], [], [], [], []
        for i, traj in enumerate(trajectories):
            w = 1.0 if weights is None else float(weights[i])
            t_total = traj.n_turns
            for t, turn in enumerate(traj.turns):
                cell = turn.state * n_options + turn.subgoal
                if turn.done:
                    kind, boot = _TERMINAL, 0
                elif t == t_total - 1:
                    if traj.final_state is None:
                        raise ValueError("truncated trajectory without final_state")
                    kind, boot = _BOOT_HIGH, traj.final_state
                elif traj.turns[t + 1].q == SWITCH:
                    kind, boot = _BOOT_HIGH, traj.turns[t + 1].state
                else:
                    kind, boot = _BOOT_LOW, traj.turns[t + 1].state * n_options + turn.subgoal
                lo_cell.append(cell)
                lo_r.append(turn.reward)
                lo_kind.append(kind)
                lo_boot.append(boot)
                lo_w.append(w)
            for seg in segment_views(traj, gamma):
                s_b = traj.turns[seg.start].state
                if seg.stop < t_total:
                    kind, boot = _BOOT_HIGH, traj.turns[seg.stop].state
                elif traj.terminated:
                    kind, boot = _TERMINAL, 0
                else:
                    kind, boot = _BOOT_HIGH, traj.final_state
                hi_cell.append(s_b)
                hi_r.append(seg.reward)
                hi_disc.append(seg.discount)
                hi_kind.append(kind)
                hi_boot.append(boot)
                hi_w.append(w)
        rows = {
            "lo_cell": np.array(lo_cell, dtype=np.int64),
            "lo_r": np.array(lo_r, dtype=np.float64),
            "lo_kind": np.array(lo_kind, dtype=np.int64),
            "lo_boot": np.array(lo_boot, dtype=np.int64),
            "lo_w": np.array(lo_w, dtype=np.float64),
            "hi_cell": np.array(hi_cell, dtype=np.int64),
            "hi_r": np.array(hi_r, dtype=np.float64),
            "hi_disc": np.array(hi_disc, dtype=np.float64),
            "hi_kind": np.array(hi_kind, dtype=np.int64),
            "hi_boot": np.array(hi_boot, dtype=np.int64),
            "hi_w": np.array(hi_w, dtype=np.float64),
        }
        return cls.from_rows(rows, gamma, n_states, n_options)

    @classmethod
    def from_rows(cls, rows: dict, gamma: float, n_states: int,
                  n_options: int) -> "CriticBatch":
        batch = cls.empty(n_states, n_options, gamma)
        batch.rows = rows
        r = rows
        np.add.at(batch.low_w, r["lo_cell"], r["lo_w"])
        np.add.at(batch.low_r, r["lo_cell"], r["lo_w"] * r["lo_r"])
        m_hi = r["lo_kind"] == _BOOT_HIGH
        m_lo = r["lo_kind"] == _BOOT_LOW
        np.add.at(batch.low_mh, (r["lo_cell"][m_hi], r["lo_boot"][m_hi]), r["lo_w"][m_hi])
        np.add.at(batch.low_ml, (r["lo_cell"][m_lo], r["lo_boot"][m_lo]), r["lo_w"][m_lo])
        np.add.at(batch.high_w, r["hi_cell"], r["hi_w"])
        np.add.at(batch.high_r, r["hi_cell"], r["hi_w"] * r["hi_r"])
        m = r["hi_kind"] == _BOOT_HIGH
        np.add.at(batch.high_m, (r["hi_cell"][m], r["hi_boot"][m]),
                  r["hi_w"][m] * r["hi_disc"][m])
        return batch

    # -- target evaluation ---------------------------------------------------

    def mean_low_targets(self, tables: ValueTables) -> np.ndarray:
        num = self.low_r + self.gamma * (self.low_mh @ tables.v_high
                                         + self.low_ml @ tables.v_low.ravel())
        return np.divide(num, self.low_w, out=np.zeros_like(num),
                         where=self.low_w > 0)

    def mean_high_targets(self, tables: ValueTables) -> np.ndarray:
        num = self.high_r + self.high_m @ tables.v_high
        return np.divide(num, self.high_w, out=np.zeros_like(num),
                         where=self.high_w > 0)

    def batch_mse(self, tables: ValueTables,
                  target_tables: ValueTables | None = None) -> tuple[float, float]:
        """Exact weighted MSE per head (row-level when rows are available).

        Predictions come from `tables`; bootstrap targets from
        `target_tables` (default: the same tables).
        """
        tgt = tables if target_tables is None else target_tables
        if self.rows is not None:
            r = self.rows
            boot = np.zeros_like(r["lo_r"])
            m = r["lo_kind"] == _BOOT_HIGH
            boot[m] = tgt.v_high[r["lo_boot"][m]]
            m = r["lo_kind"] == _BOOT_LOW
            boot[m] = tgt.v_low.ravel()[r["lo_boot"][m]]
            y = r["lo_r"] + self.gamma * boot
            pred = tables.v_low.ravel()[r["lo_cell"]]
            lo = float(np.average((pred - y) ** 2, weights=r["lo_w"])) if len(y) else 0.0
            boot = np.zeros_like(r["hi_r"])
            m = r["hi_kind"] == _BOOT_HIGH
            boot[m] = tgt.v_high[r["hi_boot"][m]]
            y = r["hi_r"] + r["hi_disc"] * boot
            pred = tables.v_high[r["hi_cell"]]
            hi = float(np.average((pred - y) ** 2, weights=r["hi_w"])) if len(y) else 0.0
            return lo, hi
        # aggregate-only batch: report the reducible (per-cell mean) error
        ybar = self.mean_low_targets(tgt)
        vis = self.low_w > 0
        lo = float(np.average((tables.v_low.ravel()[vis] - ybar[vis]) ** 2,
                              weights=self.low_w[vis])) if vis.any() else 0.0
        ybar = self.mean_high_targets(tgt)
        vis = self.high_w > 0
        hi = float(np.average((tables.v_high[vis] - ybar[vis]) ** 2,
                              weights=self.high_w[vis])) if vis.any() else 0.0
        return lo, hi


@dataclass
class CriticFitReport:
    mse_low: list[float]
    mse_high: list[float]

    @property
    def final_mse(self) -> float:
        return (self.mse_low[-1] if self.mse_low else 0.0) + \
               (self.mse_high[-1] if self.mse_high else 0.0)


def _as_critic_batch(batch, gamma: float, n_states: int, n_options: int) -> CriticBatch:
    if isinstance(batch, CriticBatch):
        if abs(batch.gamma - gamma) > 1e-12:
            raise ValueError("batch was digested with a different gamma")
        return batch
    items = list(batch)
    if items and isinstance(items[0], tuple):
        trajs = [t for t, _ in items]
        weights = [w for _, w in items]
    else:
        trajs, weights = items, None
    return CriticBatch.from_trajectories(trajs, gamma, n_states, n_options, weights)


def fit_critic(tables: ValueTables, batch, gamma: float, lr: float, epochs: int,
               refresh_targets: bool = True) -> tuple[ValueTables, CriticFitReport]:
    """Regress both heads toward their bootstrapped targets.

    By default the targets are recomputed from the updated tables at the
    start of every epoch (fitted value iteration, converging to the
    bootstrapped fixed point); with refresh_targets=False they are frozen
    once for the whole fit, which makes the batch squared error strictly
    decrease for per-cell steps lr < 0.5.  Within an epoch targets are
    constants either way.  Each visited cell moves by
    v <- v - 2*lr*(v - mean target); unvisited cells are untouched.
    """
    if lr <= 0:
        raise ValueError("lr must be > 0")
    cb = _as_critic_batch(batch, gamma, tables.n_states, tables.n_options)
    out = tables.copy()
    report = CriticFitReport([], [])
    lo_vis = cb.low_w > 0
    hi_vis = cb.high_w > 0
    frozen = out.copy() if not refresh_targets else None
    for _ in range(epochs):
        target_tables = out if refresh_targets else frozen
        mse_lo, mse_hi = cb.batch_mse(out, target_tables)
        report.mse_low.append(mse_lo)
        report.mse_high.append(mse_hi)
        ybar_lo = cb.mean_low_targets(target_tables)
        ybar_hi = cb.mean_high_targets(target_tables)
        flat = out.v_low.ravel()
        flat[lo_vis] -= 2.0 * lr * (flat[lo_vis] - ybar_lo[lo_vis])
        out.v_high[hi_vis] -= 2.0 * lr * (out.v_high[hi_vis] - ybar_hi[hi_vis])
    return out, report


# ---------------------------------------------------------------------------
# Flat (state-only) critic, fitted by Monte-Carlo return regression
# ---------------------------------------------------------------------------

@dataclass
class FlatCriticBatch:
    """Per-state regression of observed returns-to-go.

    Monte-Carlo targets match the definition of the flat baseline (the
    state-conditional expected return): under the hierarchical policy the
    state alone is not Markov, so a bootstrapped flat fixed point would
    systematically miss that conditional mean.
    """

    n_states: int
    w: np.ndarray
    g: np.ndarray
    rows: dict | None = field(default=None, repr=False)

    @classmethod
    def from_trajectories(cls, trajectories, gamma: float, n_states: int,
                          weights=None) -> "FlatCriticBatch":
        from .core import returns_to_go
        states, gs, ws = [], [], []
        for i, traj in enumerate(trajectories):
            w = 1.0 if weights is None else float(weights[i])
            g = returns_to_go(traj, gamma)
            for t, turn in enumerate(traj.turns):
                states.append(turn.state)
                gs.append(g[t])
                ws.append(w)
        batch = cls(n_states, np.zeros(n_states), np.zeros(n_states),
                    rows={"state": np.array(states, dtype=np.int64),
                          "g": np.array(gs, dtype=np.float64),
                          "w": np.array(ws, dtype=np.float64)})
        np.add.at(batch.w, batch.rows["state"], batch.rows["w"])
        np.add.at(batch.g, batch.rows["state"], batch.rows["w"] * batch.rows["g"])
        return batch

    def mean_targets(self) -> np.ndarray:
        return np.divide(self.g, self.w, out=np.zeros_like(self.g),
                         where=self.w > 0)


def fit_flat_critic(v_flat: np.ndarray, batch: FlatCriticBatch, lr: float,
                    epochs: int) -> tuple[np.ndarray, list[float]]:
    """Fit a state-only table toward per-state mean observed returns."""
    if lr <= 0:
        raise ValueError("lr must be > 0")
    out = np.asarray(v_flat, dtype=np.float64).copy()
    vis = batch.w > 0
    ybar = batch.mean_targets()
    mses = []
    for _ in range(epochs):
        if batch.rows is not None:
            pred = out[batch.rows["state"]]
            mses.append(float(np.average((pred - batch.rows["g"]) ** 2,
                                         weights=batch.rows["w"])))
        else:
            mses.append(float(np.average((out[vis] - ybar[vis]) ** 2,
                                         weights=batch.w[vis])))
        out[vis] -= 2.0 * lr * (out[vis] - ybar[vis])
    return out, mses
