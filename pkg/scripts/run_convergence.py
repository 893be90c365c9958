"""Decoder convergence: steps to the best validation point, gen-only vs joint loss.

    python3 scripts/run_convergence.py --seeds 0,1,2 --out runs/gpt_convergence
"""

import argparse
import time

from rankdistill.experiments import GPT_CONVERGENCE_VARIANTS, ablation_harness, set_threads


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default="runs/gpt_convergence")
    args = ap.parse_args()
    set_threads(1)
    t0 = time.perf_counter()
    table = ablation_harness(GPT_CONVERGENCE_VARIANTS, [int(s) for s in args.seeds.split(",")], log=print)
    print(table.format())
    table.write(args.out)
    print(f"wrote {args.out} in {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
