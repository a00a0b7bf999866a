"""Compare the three strategies over seeded synthetic traces.

Writes one csv row per (seed, strategy) and prints per-strategy means and
the ratio of each baseline to the elastic strategy.

    python3 scripts/compare_strategies.py --seeds 20 --prompts 64 --G 5 --out results/compare.csv
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from rlhf_gensim import (STRATEGIES, ClusterTopology, LatencyProfile, PlannerConfig, SimConfig, SynthConfig,
                         generate_synthetic, run_training)

METRICS = ("mean_step_time", "mean_cost", "mean_gpu_seconds", "mean_actors", "total_cuts", "total_migrations",
           "total_redundant_prefill_tokens")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--prompts", type=int, default=64)
    ap.add_argument("--G", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--nodes", type=int, default=2)
    ap.add_argument("--gpus-per-node", type=int, default=8)
    ap.add_argument("--out", default="results/compare.csv")
    args = ap.parse_args()

    profile = LatencyProfile.analytic()
    topo = ClusterTopology.uniform(args.nodes, args.gpus_per_node)
    rows = []
    for seed in range(args.seeds):
        trace = generate_synthetic(SynthConfig(num_prompts=args.prompts, num_steps=args.epochs,
                                               responses_per_prompt=args.G, paper_calibration=True), seed)
        for strategy in STRATEGIES:
            agg = run_training(trace, strategy, PlannerConfig(), SimConfig(), profile, topo).aggregates()
            rows.append({"seed": seed, "strategy": strategy, **{m: agg[m] for m in METRICS}})

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["seed", "strategy", *METRICS])
        w.writeheader()
        w.writerows(rows)

    means = {s: {m: np.mean([r[m] for r in rows if r["strategy"] == s]) for m in METRICS} for s in STRATEGIES}
    print(f"{'strategy':<22}" + "".join(f"{m:>20}" for m in METRICS[:4]))
    for s in STRATEGIES:
        print(f"{s:<22}" + "".join(f"{means[s][m]:>20.4f}" for m in METRICS[:4]))
    for s in STRATEGIES[1:]:
        cost = means[s]["mean_cost"] / means["elastic"]["mean_cost"]
        speed = means[s]["mean_step_time"] / means["elastic"]["mean_step_time"]
        print(f"{s}: {cost:.3f}x the elastic cost, {speed:.3f}x its step time")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
