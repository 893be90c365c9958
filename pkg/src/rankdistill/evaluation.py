"""nDCG, TREC qrels/run IO, run evaluation and the baseline rankers."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import torch

from .text import Document, Query, split_words, tokenize

Qrels = dict[tuple[str, str], float]
Run = dict[str, list[tuple[str, float]]]


def dcg_at_k(rels: Sequence[float], k: int) -> float:
    return sum((2.0 ** r - 1.0) / math.log2(i + 2) for i, r in enumerate(rels[:k]))


def ndcg_at_k(rels: Sequence[float], k: int, ideal: Sequence[float] | None = None) -> float:
    """nDCG@k of graded relevances listed in ranked order.

    The ideal ordering is taken from ``ideal`` when given (e.g. every judged
    document of the query), otherwise from ``rels`` itself. Returns 0 when no
    relevance is positive.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pool = rels if ideal is None else ideal
    idcg = dcg_at_k(sorted(pool, reverse=True), k)
    if idcg <= 0:
        return 0.0
    return dcg_at_k(list(rels), k) / idcg


@dataclass
class EvalResult:
    per_query: dict[str, dict[int, float]]
    mean: dict[int, float]
    n_queries: int
    skipped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "mean": {f"ndcg@{k}": v for k, v in self.mean.items()},
            "per_query": {q: {f"ndcg@{k}": v for k, v in d.items()} for q, d in self.per_query.items()},
            "skipped": self.skipped,
        }


def evaluate_run(run: Mapping[str, Sequence[tuple[str, float]]], qrels: Mapping[tuple[str, str], float],
                 ks: Sequence[int] = (5, 10)) -> EvalResult:
    judged: dict[str, dict[str, float]] = {}
    for (qid, did), rel in qrels.items():
        judged.setdefault(qid, {})[did] = float(rel)
    per_query, skipped = {}, []
    for qid in sorted(run):
        if qid not in judged:
            skipped.append(qid)
            continue
        rels = [judged[qid].get(did, 0.0) for did, _ in run[qid]]
        ideal = list(judged[qid].values())
        per_query[qid] = {k: ndcg_at_k(rels, k, ideal=ideal) for k in ks}
    n = len(per_query)
    mean = {k: (math.fsum(v[k] for v in per_query.values()) / n if n else 0.0) for k in ks}
    return EvalResult(per_query, mean, n, skipped)


# --- TREC formats -----------------------------------------------------------

def write_qrels(qrels: Mapping[tuple[str, str], float], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for (qid, did), rel in sorted(qrels.items()):
            rel_s = str(int(rel)) if float(rel).is_integer() else repr(float(rel))
            fh.write(f"{qid} 0 {did} {rel_s}\n")


def read_qrels(path: str | Path) -> Qrels:
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 'qid 0 docid rel'")
            key = (parts[0], parts[2])
            if key in qrels:
                raise ValueError(f"{path}:{lineno}: duplicate judgement {key}")
            qrels[key] = float(parts[3])
    return qrels


def format_run_lines(qid: str, ranked: Sequence[tuple[str, float]], tag: str = "rankdistill") -> list[str]:
    return [f"{qid} Q0 {did} {rank} {score:.6f} {tag}" for rank, (did, score) in enumerate(ranked, 1)]


def write_run(run: Mapping[str, Sequence[tuple[str, float]]], path: str | Path, tag: str = "rankdistill") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in sorted(run):
            for line in format_run_lines(qid, run[qid], tag):
                fh.write(line + "\n")


def read_run(path: str | Path) -> Run:
    rows: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 'qid Q0 docid rank score tag'")
            rows.setdefault(parts[0], []).append((int(parts[3]), parts[2], float(parts[4])))
    return {q: [(d, s) for _, d, s in sorted(r)] for q, r in rows.items()}


def sort_scored(scored: Iterable[tuple[str, float]]) -> list[tuple[str, float]]:
    """Descending score, ascending id on ties."""
    return sorted(scored, key=lambda ds: (-ds[1], ds[0]))


# --- BM25 ---------------------------------------------------------------------

class BM25:
    """Okapi BM25 over a fixed document pool.

    Repeated query terms contribute once per occurrence.
    """

    def __init__(self, docs: Sequence[Document | str], k1: float = 1.2, b: float = 0.75):
        self.k1, self.b = k1, b
        texts = [d if isinstance(d, str) else d.text for d in docs]
        self.tf = [Counter(split_words(t)) for t in texts]
        self.doc_len = [sum(c.values()) for c in self.tf]
        self.n = len(texts)
        self.avgdl = sum(self.doc_len) / self.n if self.n else 0.0
        self.df = Counter()
        for c in self.tf:
            self.df.update(c.keys())

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log((self.n - df + 0.5) / (df + 0.5) + 1.0)

    def score_terms(self, terms: Sequence[str], text: str) -> float:
        tf = Counter(split_words(text))
        dl = sum(tf.values())
        norm = self.k1 * (1.0 - self.b + self.b * dl / self.avgdl) if self.avgdl > 0 else self.k1
        total = 0.0
        for term in terms:
            f = tf.get(term, 0)
            if f:
                total += self.idf(term) * f * (self.k1 + 1.0) / (f + norm)
        return total

    def score(self, query: Query | str, doc: Document | str) -> float:
        q = query if isinstance(query, str) else query.text
        d = doc if isinstance(doc, str) else doc.text
        return self.score_terms(split_words(q), d)


def bm25_score(query: Query | str, doc: Document | str, stats: BM25) -> float:
    return stats.score(query, doc)


def bm25_rank(query: Query, docs: Sequence[Document], k1: float = 1.2,
              b: float = 0.75) -> list[tuple[str, float]]:
    """Rank ``docs`` with statistics computed over the candidate pool itself."""
    index = BM25(docs, k1=k1, b=b)
    return sort_scored((d.id, index.score(query, d)) for d in docs)


def bm25_scorer(docs: Sequence[Document], k1: float = 1.2, b: float = 0.75):
    """Pre-ranker adapter: returns ``(query, doc) -> score`` bound to the pool."""
    index = BM25(docs, k1=k1, b=b)
    return lambda query, doc: index.score(query, doc)


# --- neural baselines ------------------------------------------------------------

def mean_pooled(model, text: str) -> torch.Tensor:
    """Mean of the encoder's last hidden states over the tokens of ``text`` alone."""
    ids = tokenize(text, model.vocab)[:model.config.max_seq_len]
    if not ids:
        return torch.zeros(model.config.hidden_size)
    with torch.no_grad():
        return model.encoder(torch.tensor(ids)).last[0].mean(0)


def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    na, nb = float(a.norm()), float(b.norm())
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def naive_cosine_rank(query_text: str, docs: Sequence[tuple[str, str]], encoder) -> list[tuple[str, float]]:
    """Untuned-encoder baseline: cosine between separately pooled query and document."""
    q = mean_pooled(encoder, query_text)
    return sort_scored((did, cosine(q, mean_pooled(encoder, text))) for did, text in docs)


def vanilla_decoder_rank(query_text: str, docs: Sequence[tuple[str, str]], decoder) -> list[tuple[str, float]]:
    """``p_rel - p_irrel`` from the plain words "relevant" / "irrelevant" at the response slot."""
    from .gpt import build_prompt, word_markers

    if not docs:
        return []
    markers = word_markers(decoder.vocab)
    examples = [build_prompt(decoder.vocab, query_text, text, markers, max_len=decoder.config.max_seq_len)
                for _, text in docs]
    with torch.no_grad():
        _, _, last = decoder.forward_examples(examples)
        idx = torch.tensor([e.response_index for e in examples])
        logits = decoder.lm_head(last[torch.arange(len(examples)), idx])[:, [markers.relevant, markers.irrelevant]]
        p = torch.softmax(logits, dim=-1)
    return sort_scored(zip([d for d, _ in docs], (p[:, 0] - p[:, 1]).tolist()))
