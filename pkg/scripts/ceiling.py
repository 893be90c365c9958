"""Headroom check: BM25 and a topic-aware ideal ranker against the held-out teacher qrels.

    python3 scripts/ceiling.py --seeds 0,1,2
"""

import argparse

import numpy as np

from rankdistill.evaluation import evaluate_run
from rankdistill.experiments import ExperimentConfig, bm25_run, prepare_experiment, ranker_run
from rankdistill.text import topic_relevance


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()
    rows = []
    for seed in (int(s) for s in args.seeds.split(",")):
        exp = prepare_experiment(ExperimentConfig(seed=seed))
        ideal = ranker_run(lambda cs: sorted(((d.id, topic_relevance(cs.query.topics, d.topics))
                                              for d in cs.documents), key=lambda x: (-x[1], x[0])),
                           exp.test_sets)
        bm = evaluate_run(bm25_run(exp.test_sets), exp.qrels, (5,)).mean[5]
        top = evaluate_run(ideal, exp.qrels, (5,)).mean[5]
        rows.append((bm, top))
        print(f"seed {seed}: BM25 {bm:.3f}  topic ceiling {top:.3f}")
    bm, top = np.mean(rows, axis=0)
    print(f"mean: BM25 {bm:.3f}  topic ceiling {top:.3f}")


if __name__ == "__main__":
    main()
