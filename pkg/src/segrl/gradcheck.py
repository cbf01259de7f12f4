"""Central finite-difference checks for every analytic gradient.

The per-turn score gradients, the clipped-surrogate actor gradient, the
exact-KL gradient and the critic gradient are all verified against central
differences on randomized configurations.  A configuration passes when
|analytic - numeric| <= tol * max(|analytic|, |numeric|, 1), the usual
relative comparison with a unit floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .batch import TurnTable, advantage_arrays
from .critic import ValueTables
from .oracle import random_tables, random_trajectory
from .policy import (GradTables, PolicyParams, grad_log_prob, log_prob,
                     params_as_vector, params_from_vector,
                     with_behavior_logprobs)
from .training import PPOConfig, total_loss

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-6


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / scale))


def fd_params_grad(fn, params: PolicyParams, h: float = DEFAULT_H) -> GradTables:
    """Central differences of a scalar function of the policy logits."""
    base = params_as_vector(params)
    out = np.empty_like(base)
    for i in range(base.size):
        bump = base.copy()
        bump[i] = base[i] + h
        hi = fn(params_from_vector(bump, params))
        bump[i] = base[i] - h
        lo = fn(params_from_vector(bump, params))
        out[i] = (hi - lo) / (2 * h)
    sizes = [params.switch.size, params.subgoal.size, params.action.size]
    parts = np.split(out, np.cumsum(sizes)[:-1])
    return GradTables(parts[0].reshape(params.switch.shape),
                      parts[1].reshape(params.subgoal.shape),
                      parts[2].reshape(params.action.shape))


def fd_tables_grad(fn, tables: ValueTables, h: float = DEFAULT_H) -> ValueTables:
    """Central differences of a scalar function of the value tables."""
    out = ValueTables.zeros(tables.n_states, tables.n_options)
    for arr, g in ((tables.v_high, out.v_high), (tables.v_low, out.v_low)):
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = fn(tables)
            flat[i] = orig - h
            lo = fn(tables)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * h)
    return out


@dataclass
class GradCheckCase:
    params: PolicyParams
    params_old: PolicyParams
    ref: PolicyParams
    tables: ValueTables
    table: TurnTable
    cfg: PPOConfig


def random_case(rng: np.random.Generator) -> GradCheckCase:
    n_s = int(rng.integers(3, 6))
    n_o = int(rng.integers(1, 4))
    n_a = int(rng.integers(2, 5))
    params_old = PolicyParams.random(rng, n_s, n_o, n_a, scale=0.8)
    # live params perturbed off the behavior point so the surrogate ratio
    # sits away from its clipping kinks almost surely
    params = PolicyParams(
        params_old.switch + 0.3 * rng.standard_normal(params_old.switch.shape),
        params_old.subgoal + 0.3 * rng.standard_normal(params_old.subgoal.shape),
        params_old.action + 0.3 * rng.standard_normal(params_old.action.shape))
    ref = PolicyParams.random(rng, n_s, n_o, n_a, scale=0.5)
    trajs = [with_behavior_logprobs(
                 random_trajectory(rng, n_s, n_o, n_a, max_turns=6), params_old)
             for _ in range(int(rng.integers(2, 5)))]
    table = TurnTable.from_trajectories(trajs)
    tables = random_tables(rng, n_s, n_o)
    cfg = PPOConfig(gamma=float(rng.uniform(0.5, 1.0)), clip_eps=0.2,
                    c_v=float(rng.uniform(0.2, 2.0)),
                    kl_beta=float(rng.uniform(0.0, 0.1)))
    return GradCheckCase(params, params_old, ref, tables, table, cfg)


def check_log_prob_grads(rng: np.random.Generator, n_turns: int = 20,
                         h: float = DEFAULT_H) -> float:
    """Max relative error of grad_log_prob vs central differences."""
    worst = 0.0
    n_s, n_o, n_a = 4, 3, 3
    params = PolicyParams.random(rng, n_s, n_o, n_a)
    traj = random_trajectory(rng, n_s, n_o, n_a, max_turns=n_turns)
    for u in traj.turns:
        analytic = grad_log_prob(params, u)

        def density(p, turn=u):
            lp_sw, lp_hi, lp_lo = log_prob(p, turn)
            return (lp_sw or 0.0) + (lp_hi or 0.0) + lp_lo

        numeric = fd_params_grad(density, params, h)
        worst = max(worst, rel_err(analytic.as_vector(), numeric.as_vector()))
    return worst


def check_total_loss_grads(case: GradCheckCase, h: float = DEFAULT_H) -> float:
    """Max relative error of the combined-loss gradients (policy and critic)."""
    adv = advantage_arrays(case.table, case.tables, case.cfg.gae(whiten=False))
    frozen = case.tables.copy()
    value, g_theta, g_tab = total_loss(case.params, case.ref, case.tables,
                                       case.table, adv, case.cfg,
                                       target_tables=frozen)

    def f_theta(p):
        v, _, _ = total_loss(p, case.ref, case.tables, case.table, adv,
                             case.cfg, target_tables=frozen)
        return v

    def f_tables(tb):
        v, _, _ = total_loss(case.params, case.ref, tb, case.table, adv,
                             case.cfg, target_tables=frozen)
        return v

    num_theta = fd_params_grad(f_theta, case.params, h)
    num_tab = fd_tables_grad(f_tables, case.tables, h)
    worst = rel_err(g_theta.as_vector(), num_theta.as_vector())
    worst = max(worst, rel_err(g_tab.v_high, num_tab.v_high))
    worst = max(worst, rel_err(g_tab.v_low, num_tab.v_low))
    return worst


def gradcheck_report(n_configs: int = 100, seed: int = 0,
                     h: float = DEFAULT_H, tol: float = DEFAULT_TOL) -> dict:
    """Run `n_configs` randomized cases; half score checks, half full-loss."""
    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for i in range(n_configs):
        if i % 2 == 0:
            worst = max(worst, check_log_prob_grads(rng, h=h))
        else:
            worst = max(worst, check_total_loss_grads(random_case(rng), h=h))
    return {"configs": n_configs, "max_rel_err": worst, "tol": tol}
