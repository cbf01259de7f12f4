"""Train the two-timescale policy on the fetch-and-deliver chain.

Runs the hierarchical trainer and the flat comparison under identical
hyperparameters, prints the learning curves side by side, and writes both
metrics files next to this script.
"""

from pathlib import Path

from segrl import FetchChain, PPOConfig, train, train_flat_baseline

env = FetchChain(length=5, horizon=20)
cfg = PPOConfig(seed=0, iterations=60, episodes_per_iter=64)

print(f"{env}: sparse +10 on delivery, KEEP penalty {cfg.c_keep}")
hier = train(cfg, env)
flat = train_flat_baseline(cfg, env)

print("\niter |   hier return  success  seg-len | flat return  success")
for h, f in zip(hier.metrics[::5], flat.metrics[::5]):
    print(f"{h.iteration:4d} | {h.mean_return:+12.3f}  {h.success:7.2f}  "
          f"{h.mean_seg_len:7.2f} | {f.mean_return:+11.3f}  {f.success:7.2f}")

first = next((r.iteration for r in hier.metrics if r.success >= 0.9), None)
first_flat = next((r.iteration for r in flat.metrics if r.success >= 0.9), None)
print(f"\nhierarchical reaches greedy success >= 0.9 at iteration {first}; "
      f"flat: {first_flat}")

out = Path(__file__).parent
(out / "metrics_hierarchical.csv").write_text(hier.metrics_csv())
(out / "metrics_flat.csv").write_text(flat.metrics_csv())
print(f"wrote metrics_hierarchical.csv and metrics_flat.csv to {out}/")
