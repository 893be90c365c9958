"""Encoder ablation over seeds: BM25, missing signal, token selection + TCL.

    python3 scripts/run_ablation.py --seeds 0,1,2 --out runs/bert_ablation
"""

import argparse
import time

from rankdistill.experiments import BERT_VARIANTS, ExperimentConfig, ablation_harness, set_threads


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--n-queries", type=int, default=200)
    ap.add_argument("--out", default="runs/bert_ablation")
    args = ap.parse_args()
    set_threads(1)
    t0 = time.perf_counter()
    table = ablation_harness(BERT_VARIANTS, [int(s) for s in args.seeds.split(",")],
                             ExperimentConfig(n_queries=args.n_queries), log=print)
    print(table.format())
    table.write(args.out)
    print(f"wrote {args.out} in {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
