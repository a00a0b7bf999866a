"""Planning latency across batch sizes and cluster sizes.

Each cell is the median of ``--repeats`` timed runs after a warmup run.
"""

import argparse
import contextlib
import io

import numpy as np

from rlhf_gensim.cli import RunConfig, cmd_plan_bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batches", default="64,128,256,512,1024")
    ap.add_argument("--nodes", default="2,5,10,20")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    batches = [int(x) for x in args.batches.split(",")]
    nodes = [int(x) for x in args.nodes.split(",")]
    cfg = RunConfig()
    print(f"{'batch':>6}" + "".join(f"{f'{n}x8 (ms)':>14}" for n in nodes))
    for b in batches:
        cells = []
        for n in nodes:
            with contextlib.redirect_stdout(io.StringIO()):
                times = cmd_plan_bench(cfg, b, n, repeats=args.repeats)
            cells.append(float(np.median(times)))
        print(f"{b:>6}" + "".join(f"{c:>14.2f}" for c in cells))


if __name__ == "__main__":
    main()
