"""Seeded end-to-end experiments and the ablation comparison harness.

One top-level seed is fanned out into named sub-seeds (corpus, labels, split,
init) so variants trained on the same seed see identical data.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .bert import BertConfig, RRABert
from .evaluation import EvalResult, Qrels, Run, bm25_rank, evaluate_run
from .gpt import GptConfig, RRAGpt
from .labelgen import (Labeler, RankingLabel, SyntheticOracleLabeler, build_dataset, sub_seed)
from .nn import ModelConfig
from .text import CandidateSet, Vocabulary, corpus_vocabulary, generate_synthetic_corpus
from .training import (BERT_VALIDATE_EVERY, GPT_VALIDATE_EVERY, TrainConfig, TrainReport, fit,
                       make_bert, make_gpt, split_dataset)


class AblationError(RuntimeError):
    pass


def bert_train_config() -> TrainConfig:
    return TrainConfig(learning_rate=3e-4, validate_every=BERT_VALIDATE_EVERY, patience=5, max_steps=3000)


def gpt_train_config() -> TrainConfig:
    return TrainConfig(learning_rate=3e-4, validate_every=GPT_VALIDATE_EVERY, scale=0.5, patience=5,
                       max_steps=8000)


@dataclass
class ExperimentConfig:
    """Desk-scale defaults for the synthetic distillation experiments."""
    seed: int = 0
    n_queries: int = 200
    docs_per_query: int = 50
    vocab_size: int = 200
    n_topics: int = 6
    test_ratio: float = 0.1
    hidden_size: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 96
    bert_train: TrainConfig = field(default_factory=bert_train_config)
    gpt_train: TrainConfig = field(default_factory=gpt_train_config)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, hidden_size=self.hidden_size, n_layers=self.n_layers,
                           n_heads=self.n_heads, max_seq_len=self.max_seq_len)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Experiment:
    config: ExperimentConfig
    corpus: list[CandidateSet]
    vocab: Vocabulary
    labels: list[RankingLabel]
    train: list[RankingLabel]
    valid: list[RankingLabel]
    test: list[RankingLabel]
    test_sets: list[CandidateSet]
    qrels: Qrels

    def seed_for(self, name: str) -> int:
        return sub_seed(self.config.seed, name)


def bin_relevance(ranked: Sequence[str], excluded: Iterable[str] = ()) -> dict[str, int]:
    """Integer grades: top half of ``ranked`` -> 3, bottom half -> 2, excluded -> 0."""
    half = (len(ranked) + 1) // 2
    grades = {d: (3 if i < half else 2) for i, d in enumerate(ranked)}
    grades.update({d: 0 for d in excluded})
    return grades


def qrels_from_labels(labels: Sequence[RankingLabel]) -> Qrels:
    """Binned qrels over each label's pre-ranked window (negatives are left unjudged)."""
    return {(lab.query_id, d): float(g) for lab in labels
            for d, g in bin_relevance(lab.ranked, lab.excluded).items()}


def teacher_qrels(sets: Sequence[CandidateSet], labeler: Labeler) -> Qrels:
    """Binned teacher judgments over every retrieved document of each query.

    The labeler sees the whole list in one call, so held-out judgments are not
    restricted to the window chosen by the pre-ranker.
    """
    qrels: Qrels = {}
    for cs in sets:
        ranked = list(labeler(cs.query, cs.documents))
        excluded = [d for d in cs.doc_ids if d not in set(ranked)]
        qrels.update({(cs.query.id, d): float(g) for d, g in bin_relevance(ranked, excluded).items()})
    return qrels


def prepare_experiment(config: ExperimentConfig | None = None, labeler: Labeler | None = None) -> Experiment:
    """Corpus, labels and a query-level train/valid/test split for one seed."""
    config = config or ExperimentConfig()
    labeler = labeler or SyntheticOracleLabeler()
    corpus = generate_synthetic_corpus(sub_seed(config.seed, "corpus"), config.n_queries,
                                       config.docs_per_query, vocab_size=config.vocab_size,
                                       n_topics=config.n_topics)
    labels = build_dataset(corpus, labeler, seed=sub_seed(config.seed, "labels")).labels
    rest, test = split_dataset(labels, 1.0 - config.test_ratio, sub_seed(config.seed, "test-split"))
    train, valid = split_dataset(rest, config.bert_train.split_ratio, sub_seed(config.seed, "split"))
    by_id = {cs.query.id: cs for cs in corpus}
    test_sets = [by_id[lab.query_id] for lab in sorted(test, key=lambda lab: lab.query_id)]
    return Experiment(config, corpus, corpus_vocabulary(corpus, 5000), labels, train, valid, test,
                      test_sets, teacher_qrels(test_sets, labeler))


# --- runs ---------------------------------------------------------------------------

def ranker_run(rank_fn: Callable[[CandidateSet], list[tuple[str, float]]],
               sets: Sequence[CandidateSet]) -> Run:
    return {cs.query.id: list(rank_fn(cs)) for cs in sets}


def bm25_run(sets: Sequence[CandidateSet]) -> Run:
    return ranker_run(lambda cs: bm25_rank(cs.query, cs.documents), sets)


def model_run(model: RRABert | RRAGpt, sets: Sequence[CandidateSet], use_tcl: bool | None = None) -> Run:
    model.eval()

    def rank(cs: CandidateSet):
        docs = [(d.id, d.text) for d in cs.documents]
        if isinstance(model, RRABert):
            return model.rank(cs.query.text, docs, use_tcl=use_tcl)
        return model.rank(cs.query.text, docs)

    return ranker_run(rank, sets)


def timed_run(model: RRABert | RRAGpt, sets: Sequence[CandidateSet], use_tcl: bool | None = None,
              repeats: int = 3) -> tuple[Run, float]:
    """Run plus the best-of-``repeats`` wall-clock scoring time in seconds."""
    best, run = math.inf, {}
    for _ in range(repeats):
        t0 = time.perf_counter()
        run = model_run(model, sets, use_tcl)
        best = min(best, time.perf_counter() - t0)
    return run, best


# --- variants -------------------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    """A named config delta. ``reuse`` evaluates another variant's trained model."""
    name: str
    kind: str = "bert"
    train: dict = field(default_factory=dict)
    bert: dict = field(default_factory=dict)
    gpt: dict = field(default_factory=dict)
    infer_tcl: bool | None = None
    reuse: str | None = None


BERT_VARIANTS = (
    Variant("w/o missing", train={"use_excluded": False}, bert={"use_tcl": True}, infer_tcl=True),
    Variant("w/o TS+TCL", bert={"use_tcl": False}, infer_tcl=False),
    Variant("w/ TS+TCL", bert={"use_tcl": True}, infer_tcl=True),
    Variant("infer w/o", reuse="w/ TS+TCL", infer_tcl=False),
)

GPT_TASK_SETS = {"gen": ("gen",), "+clf": ("gen", "clf"), "+rank": ("gen", "rank"),
                 "+rank+clf": ("gen", "clf", "rank")}


def gpt_grid() -> list[Variant]:
    """Task set x reasoning x ranking-layer input.

    Task sets without the rank term score with ``p_rel - p_irrel``; with it a
    ranking layer reads either the response or the reason position.
    """
    out = []
    for tname, tasks in GPT_TASK_SETS.items():
        for reasoning in (True, False):
            inputs = ("response", "reason") if "rank" in tasks else (None,)
            for inp in inputs:
                if inp == "reason" and not reasoning:
                    continue
                cfg = {"tasks": tasks, "reasoning": reasoning, "ranking_layer": inp is not None}
                if inp is not None:
                    cfg["ranking_layer_input"] = inp
                name = f"{tname} | reasoning={'on' if reasoning else 'off'} | input={inp or 'none'}"
                out.append(Variant(name, kind="gpt", gpt=cfg))
    return out


GPT_CONVERGENCE_VARIANTS = (
    Variant("gen only", kind="gpt", gpt={"tasks": ("gen",), "ranking_layer": False}),
    Variant("gen+clf+rank", kind="gpt", gpt={"tasks": ("gen", "clf", "rank"), "ranking_layer": True,
                                               "ranking_layer_input": "response", "reasoning": True}),
)


@dataclass
class VariantResult:
    variant: str
    seed: int
    ndcg5: float
    ndcg10: float
    steps_to_best: int
    best_valid: float
    score_seconds: float

    def to_dict(self) -> dict:
        return asdict(self)


def train_variant(exp: Experiment, variant: Variant) -> tuple[RRABert | RRAGpt, TrainReport]:
    cfg = exp.config
    mc = cfg.model_config(len(exp.vocab))
    init = exp.seed_for("init")
    if variant.kind == "bert":
        model = make_bert(exp.vocab, mc, BertConfig(**variant.bert), seed=init)
        tc = replace(cfg.bert_train, seed=exp.seed_for("train"), **variant.train)
    elif variant.kind == "gpt":
        model = make_gpt(exp.vocab, mc, GptConfig(**variant.gpt), seed=init)
        tc = replace(cfg.gpt_train, seed=exp.seed_for("train"), **variant.train)
    else:
        raise AblationError(f"unknown variant kind {variant.kind!r}")
    return model, fit(model, exp.train, exp.valid, tc)


def evaluate_model(exp: Experiment, model, use_tcl: bool | None = None) -> tuple[EvalResult, float]:
    run, seconds = timed_run(model, exp.test_sets, use_tcl)
    return evaluate_run(run, exp.qrels, (5, 10)), seconds


@dataclass
class AblationTable:
    rows: list[VariantResult]
    baselines: dict[int, dict[str, float]] = field(default_factory=dict)

    def summary(self) -> list[dict]:
        out = []
        for name in dict.fromkeys(r.variant for r in self.rows):
            rs = [r for r in self.rows if r.variant == name]
            entry: dict = {"variant": name, "n_seeds": len(rs)}
            for key in ("ndcg5", "ndcg10", "steps_to_best", "score_seconds"):
                vals = np.array([getattr(r, key) for r in rs], dtype=float)
                entry[f"{key}_mean"] = float(vals.mean())
                entry[f"{key}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            out.append(entry)
        return out

    def mean(self, variant: str, key: str = "ndcg5") -> float:
        vals = [getattr(r, key) for r in self.rows if r.variant == variant]
        if not vals:
            raise KeyError(variant)
        return float(np.mean(vals))

    def format(self) -> str:
        lines = [f"{'variant':<44} {'nDCG@5':>16} {'nDCG@10':>16} {'steps':>10}"]
        for e in self.summary():
            lines.append(f"{e['variant']:<44} {e['ndcg5_mean']:.3f} (+/- {e['ndcg5_std']:.3f}) "
                         f"{e['ndcg10_mean']:.3f} (+/- {e['ndcg10_std']:.3f}) {e['steps_to_best_mean']:>10.1f}")
        return "\n".join(lines)

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        js, cs = out / "ablation.json", out / "ablation.csv"
        js.write_text(json.dumps({"rows": [r.to_dict() for r in self.rows], "summary": self.summary(),
                                  "baselines": {str(k): v for k, v in self.baselines.items()}},
                                 indent=2, sort_keys=True) + "\n", encoding="utf-8")
        summary = self.summary()
        with open(cs, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(summary[0]) if summary else ["variant"])
            writer.writeheader()
            writer.writerows(summary)
        return js, cs


def ablation_harness(variants: Sequence[Variant] = BERT_VARIANTS, seeds: Sequence[int] = (0, 1, 2),
                     config: ExperimentConfig | None = None, labeler: Labeler | None = None,
                     log: Callable[[str], None] | None = None) -> AblationTable:
    """Train every variant on identical per-seed data and collect held-out metrics.

    A BM25 row is added per seed as the lexical reference.
    """
    base = config or ExperimentConfig()
    names = {v.name for v in variants}
    for v in variants:
        if v.reuse is not None and v.reuse not in names:
            raise AblationError(f"variant {v.name!r} reuses unknown variant {v.reuse!r}")
    rows, baselines = [], {}
    for seed in seeds:
        exp = prepare_experiment(replace(base, seed=seed), labeler)
        bm = evaluate_run(bm25_run(exp.test_sets), exp.qrels, (5, 10))
        baselines[seed] = {"ndcg5": bm.mean[5], "ndcg10": bm.mean[10]}
        rows.append(VariantResult("BM25", seed, bm.mean[5], bm.mean[10], 0, math.nan, 0.0))
        trained: dict[str, tuple] = {}
        for v in sorted(variants, key=lambda v: v.reuse is not None):
            try:
                if v.reuse is not None:
                    model, report = trained[v.reuse]
                else:
                    model, report = train_variant(exp, v)
                    trained[v.name] = (model, report)
                res, seconds = evaluate_model(exp, model, v.infer_tcl)
            except Exception as exc:
                raise AblationError(f"variant {v.name!r} failed on seed {seed}: {exc}") from exc
            rows.append(VariantResult(v.name, seed, res.mean[5], res.mean[10], report.steps_to_best,
                                      report.best_metric, seconds))
            if log:
                log(f"seed {seed} {v.name}: ndcg@5 {res.mean[5]:.4f} steps_to_best {report.steps_to_best}")
    order = ["BM25"] + [v.name for v in variants]
    rows.sort(key=lambda r: (order.index(r.variant), r.seed))
    return AblationTable(rows, baselines)


def set_threads(n: int = 1) -> None:
    """Pin intra-op threads so timings and float reductions are repeatable."""
    torch.set_num_threads(n)
