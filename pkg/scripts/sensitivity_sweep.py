"""Sweep the cut threshold and the scaling weight on one synthetic trace.

Produces ``sweep_tau.csv``, ``sweep_lambda.csv`` and their diagnostics under
``--out``. ``--no-migration`` makes cut responses stay on their actor, which
isolates the effect of the threshold on busy time.
"""

import argparse
import math

from rlhf_gensim.cli import RunConfig, cmd_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--values", default="0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    ap.add_argument("--prompts", type=int, default=128)
    ap.add_argument("--steps", type=int, default=6)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-migration", action="store_true")
    ap.add_argument("--out", default="results/sweeps")
    args = ap.parse_args()

    values = [float(v) for v in args.values.split(",")]
    cfg = RunConfig(synth={"num_prompts": args.prompts, "num_steps": args.steps, "paper_calibration": True},
                    seed=args.seed, output_dir=args.out,
                    migration_bytes_per_token=math.inf if args.no_migration else None)
    for param in ("tau", "lambda"):
        print(f"== {param}")
        cmd_sweep(cfg, param, values)


if __name__ == "__main__":
    main()
