"""Decoder task-flag grid (task set x reasoning x ranking-layer input), one seed by default.

Slow: ten decoder trainings per seed.

    python3 scripts/run_gpt_grid.py --seeds 0 --out runs/gpt_grid
"""

import argparse

from rankdistill.experiments import ablation_harness, gpt_grid, set_threads


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--out", default="runs/gpt_grid")
    args = ap.parse_args()
    set_threads(1)
    table = ablation_harness(gpt_grid(), [int(s) for s in args.seeds.split(",")], log=print)
    print(table.format())
    table.write(args.out)


if __name__ == "__main__":
    main()
