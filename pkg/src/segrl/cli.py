"""Command-line entry point: training, rollouts, parsing, verification.

Exit codes: 0 on success, 1 when a verification gate fails, 2 on usage or
configuration errors.  All outputs land under the --out directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .advantages import GAEConfig, estimate_all
from .config import ConfigError, RunConfig, load_config
from .core import load_trajectories, save_trajectories
from .critic import ValueTables, fit_critic
from .envs import FetchChain, make_env
from .oracle import (exact_critic_batch, oracle_values,
                     switching_exactness_report, telescope_check,
                     unbiasedness_report, variance_report)
from .parsing import ingest_transcript_file
from .policy import (PolicyParams, fetchchain_phased, load_policy, rollout,
                     save_policy)
from .rng import CounterRng
from .training import evaluate, train, train_flat_baseline

CHECKPOINT_EVERY = 50
VALUES_MAGIC = "segrl-values v1"


def save_values(path, tables: ValueTables) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        fp.write(VALUES_MAGIC + "\n")
        fp.write(f"{tables.n_states} {tables.n_options}\n")
        fp.write(f"table v_high {tables.v_high.size}\n")
        for v in tables.v_high:
            fp.write(repr(float(v)) + "\n")
        fp.write(f"table v_low {tables.v_low.size}\n")
        for v in tables.v_low.ravel():
            fp.write(repr(float(v)) + "\n")


def load_values(path) -> ValueTables:
    with open(path, "r", encoding="utf-8") as fp:
        if fp.readline().strip() != VALUES_MAGIC:
            raise ValueError("not a value-table checkpoint")
        n_s, n_o = (int(x) for x in fp.readline().split())
        _, _, count = fp.readline().split()
        v_high = np.array([float(fp.readline()) for _ in range(int(count))])
        _, _, count = fp.readline().split()
        v_low = np.array([float(fp.readline()) for _ in range(int(count))])
        return ValueTables(v_high, v_low.reshape(n_s, n_o))


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.ppo.seed = args.seed
    return cfg


def _out_dir(args, default: str) -> Path:
    out = Path(args.out) if args.out else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_metrics(path: Path, result) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        fp.write(result.metrics_csv())


def cmd_train(args, flat: bool) -> int:
    cfg = _load_run_config(args)
    env = cfg.make_env()
    out = _out_dir(args, "runs/train-flat" if flat else "runs/train")
    driver = train_flat_baseline if flat else train

    def on_iteration(state, row):
        if (state.iteration + 1) % CHECKPOINT_EVERY == 0:
            save_policy(out / f"policy-{state.iteration + 1:04d}.txt", state.params)

    result = driver(cfg.ppo, env, n_options=cfg.n_options, on_iteration=on_iteration)
    _write_metrics(out / "metrics.csv", result)
    save_policy(out / "policy-final.txt", result.params)
    save_values(out / "values-final.txt", result.tables)
    final = result.metrics[-1]
    print(f"finished {cfg.ppo.iterations} iterations: "
          f"greedy success {final.success:.3f}, mean return {final.mean_return:.3f}")
    print(f"outputs in {out}")
    return 0


def cmd_rollout(args) -> int:
    cfg = _load_run_config(args)
    env = cfg.make_env()
    params = (load_policy(args.policy) if args.policy else
              PolicyParams.uniform(env.n_states, cfg.n_options, env.n_actions))
    out = _out_dir(args, "runs/rollout")
    trajs = [rollout(env, params, env.horizon, CounterRng(cfg.ppo.seed, ep),
                     c_keep=cfg.ppo.c_keep)
             for ep in range(args.episodes)]
    path = out / "trajectories.jsonl"
    save_trajectories(path, trajs)
    print(f"wrote {len(trajs)} episodes to {path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    env = cfg.make_env()
    params = load_policy(args.policy)
    report = evaluate(params, env, args.episodes, mode=args.mode, seed=cfg.ppo.seed)
    print(f"success {report.success_rate:.3f}  mean return {report.mean_return:.3f}  "
          f"switch rate {report.switch_rate:.3f}  "
          f"segments {report.mean_segments:.2f} x {report.mean_seg_len:.2f}")
    return 0


def cmd_parse(args) -> int:
    result = ingest_transcript_file(args.input)
    out = _out_dir(args, "runs/parse")
    path = out / "trajectory.jsonl"
    save_trajectories(path, [result.trajectory])
    bad = sum(1 for v in result.verdicts if not v.valid)
    print(f"parsed {result.trajectory.n_turns} turns, {bad} malformed, "
          f"total penalty {result.total_penalty:.1f}; wrote {path}")
    return 0


def cmd_advantages(args) -> int:
    trajs = load_trajectories(args.input)
    tables = load_values(args.values)
    params = load_policy(args.policy) if args.policy else None
    cfg = GAEConfig(gamma=args.gamma, lambda_low=args.lambda_low,
                    lambda_high=args.lambda_high, lambda_flat=args.lambda_flat)
    out = _out_dir(args, "runs/advantages")
    path = out / "advantages.jsonl"
    with open(path, "w", encoding="utf-8") as fp:
        for traj in trajs:
            est = estimate_all(traj, tables, cfg, params=params)
            k = 0
            for t in range(traj.n_turns):
                rec = {"t": t, "A_low": est.a_low[t],
                       "A_switch": None if t == 0 else est.a_switch[t - 1],
                       "A_high": None, "A_flat": None}
                if t in est.boundaries[:-1]:
                    rec["A_high"] = est.a_high[k]
                    k += 1
                fp.write(json.dumps(rec) + "\n")
    print(f"wrote per-turn advantages for {len(trajs)} episodes to {path}")
    return 0


def _report(out: Path, name: str, payload: dict, passed: bool) -> int:
    payload = dict(payload, passed=bool(passed))
    path = out / f"{name}.json"
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(payload, fp, indent=2)
    status = "PASS" if passed else "FAIL"
    print(f"[{status}] {name}: " + ", ".join(
        f"{k}={v:.3g}" if isinstance(v, float) else f"{k}={v}"
        for k, v in payload.items() if k != "passed"))
    print(f"report: {path}")
    return 0 if passed else 1


def _verify_env_policy(cfg: RunConfig, seed: int):
    env = FetchChain(3, 6)
    params = fetchchain_phased(env, np.random.default_rng(seed))
    return env, params


def cmd_verify(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args, "runs/verify")
    seed = cfg.ppo.seed
    mode = args.mode
    if mode == "telescope":
        rep = telescope_check(trials=args.trials, seed=seed)
        env, params = _verify_env_policy(cfg, 12345)
        sw = switching_exactness_report(env, params, gamma=1.0)
        return _report(out, "telescope", {
            "trials": rep.trials, "max_dev_low": rep.max_dev_low,
            "max_dev_high": rep.max_dev_high,
            "switching_max_dev": sw.max_abs_dev,
            "switching_contexts": sw.n_contexts, "tol": rep.tol,
        }, rep.passed and sw.passed)
    if mode == "unbiased":
        env, params = _verify_env_policy(cfg, 12345)
        rep = unbiasedness_report(env, params, n=args.samples, seed=seed)
        # bootstrapped estimator (mixing weight 0.95): bias recorded only
        from .advantages import GAEConfig as _GAEConfig
        from .oracle import mc_gradient_hae, oracle_gradient
        import numpy as _np
        mixed = mc_gradient_hae(
            env, params, oracle_values(env, params, 1.0).tables,
            _GAEConfig(gamma=1.0, lambda_low=0.95, lambda_high=0.95,
                       lambda_flat=0.95),
            n=min(args.samples, 20000), seed=seed)
        exact = oracle_gradient(env, params, 1.0)
        bias95 = float(_np.max(_np.abs(mixed.mean.as_vector()
                                       - exact.as_vector())))
        return _report(out, "unbiased", {
            "n": rep.n, "max_z": rep.max_z, "n_failed": rep.n_failed,
            "n_coords": rep.n_coords, "max_abs_dev": rep.max_abs_dev,
            "gate": rep.gate, "recorded_bias_lambda_095": bias95,
        }, rep.passed)
    if mode == "variance":
        env, params = _verify_env_policy(cfg, 12345)
        values = oracle_values(env, params, 1.0)
        rows = []
        ok = True
        for t in range(env.horizon):
            rep = variance_report(env, params, values, t=t, n=args.samples, seed=seed)
            rows.append({"t": t, "var_low": rep.var_low, "var_flat": rep.var_flat,
                         "ci_diff_upper": rep.ci_diff[1],
                         "reduced": rep.reduction_confirmed})
            ok = ok and rep.reduction_confirmed
        path = out / "variance.json"
        with open(path, "w", encoding="utf-8") as fp:
            json.dump({"rows": rows, "passed": ok}, fp, indent=2)
        for r in rows:
            print(f"[{'PASS' if r['reduced'] else 'FAIL'}] t={r['t']}: "
                  f"var_low={r['var_low']:.4f} var_flat={r['var_flat']:.4f} "
                  f"ci_upper={r['ci_diff_upper']:+.4f}")
        print(f"report: {path}")
        return 0 if ok else 1
    if mode == "gradcheck":
        from .gradcheck import gradcheck_report
        rep = gradcheck_report(n_configs=args.trials, seed=seed)
        return _report(out, "gradcheck", {
            "configs": rep["configs"], "max_rel_err": rep["max_rel_err"],
            "tol": rep["tol"],
        }, rep["max_rel_err"] <= rep["tol"])
    if mode == "critic-fixpoint":
        env, params = _verify_env_policy(cfg, 12345)
        gamma = cfg.ppo.gamma
        values = oracle_values(env, params, gamma)
        batch = exact_critic_batch(env, params, gamma)
        tables = ValueTables.zeros(env.n_states, params.n_options)
        fitted, _ = fit_critic(tables, batch, gamma, lr=0.5, epochs=args.trials)
        dev_hi = float(np.max(np.abs(fitted.v_high - values.v_high)[values.high_defined]))
        dev_lo = float(np.max(np.abs(fitted.v_low - values.v_low)[values.low_defined]))
        return _report(out, "critic-fixpoint", {
            "epochs": args.trials, "dev_high": dev_hi, "dev_low": dev_lo,
            "tol": 1e-3,
        }, max(dev_hi, dev_lo) <= 1e-3)
    raise AssertionError(f"unhandled verify mode {mode}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segrl",
        description="Tabular subgoal-switching RL with verification oracles")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="run the hierarchical trainer")
    common(p)
    p = sub.add_parser("train-flat", help="run the flat-baseline trainer")
    common(p)

    p = sub.add_parser("rollout", help="collect episodes to JSON-Lines")
    common(p)
    p.add_argument("--policy", help="policy checkpoint (default: uniform)")
    p.add_argument("--episodes", type=int, default=16)

    p = sub.add_parser("eval", help="evaluate a policy checkpoint")
    common(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--episodes", type=int, default=64)
    p.add_argument("--mode", choices=["greedy", "sample"], default="greedy")

    p = sub.add_parser("parse", help="parse a transcript file to JSON-Lines")
    common(p)
    p.add_argument("--input", required=True, help="transcript file")

    p = sub.add_parser("advantages", help="compute per-turn advantages")
    common(p)
    p.add_argument("--input", required=True, help="trajectory JSON-Lines file")
    p.add_argument("--values", required=True, help="value-table checkpoint")
    p.add_argument("--policy", help="policy checkpoint for switch probabilities")
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--lambda-low", dest="lambda_low", type=float, default=0.95)
    p.add_argument("--lambda-high", dest="lambda_high", type=float, default=0.95)
    p.add_argument("--lambda-flat", dest="lambda_flat", type=float, default=0.95)

    p = sub.add_parser("verify", help="run a verification gate")
    common(p)
    p.add_argument("mode", choices=["telescope", "unbiased", "variance",
                                    "gradcheck", "critic-fixpoint"])
    p.add_argument("--trials", type=int, default=10000,
                   help="trials / configs / fit epochs, depending on the mode")
    p.add_argument("--samples", type=int, default=10000,
                   help="Monte-Carlo sample count for unbiased / variance")
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        if args.command == "train":
            return cmd_train(args, flat=False)
        if args.command == "train-flat":
            return cmd_train(args, flat=True)
        if args.command == "rollout":
            return cmd_rollout(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "parse":
            return cmd_parse(args)
        if args.command == "advantages":
            return cmd_advantages(args)
        if args.command == "verify":
            return cmd_verify(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError(f"unhandled command {args.command}")


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
