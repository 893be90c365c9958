"""LLM ranking-label generation: pre-rank, list-wise labeling with missing
documents as hard negatives, graded scores, negatives and reasoning."""

from __future__ import annotations

import json
import logging
import os
import re
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .evaluation import BM25
from .text import CandidateSet, Document, Query, split_words

log = logging.getLogger(__name__)

Scorer = Callable[[Query, Document], float]
ReasoningGenerator = Callable[[Query, Document, int], str]


class LabelerContractError(RuntimeError):
    pass


class PipelineError(RuntimeError):
    pass


def sub_rng(seed: int, *keys: str | int) -> np.random.Generator:
    """Independent generator for (seed, key...) so results do not depend on call order."""
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(str(k).encode("utf-8")))
    return np.random.default_rng(words)


def sub_seed(seed: int, name: str) -> int:
    """Named integer sub-seed fanned out from one top-level seed."""
    return int(sub_rng(seed, "sub-seed", name).integers(0, 2**31 - 1))


@dataclass(frozen=True)
class PreRankedSet:
    query: Query
    ordered_docs: tuple[Document, ...]
    top10: tuple[Document, ...]
    bottom10: tuple[Document, ...]
    pre: tuple[Document, ...]


def pre_rank(cands: CandidateSet, ranker: Scorer | None = None, window: int = 10) -> PreRankedSet:
    """Order the retrieved list and keep its head and tail ``window`` documents.

    ``ranker`` defaults to BM25 with statistics over the candidate pool.
    """
    docs = list(cands.documents)
    if not docs:
        raise ValueError(f"empty candidate set for query {cands.query.id}")
    if ranker is None:
        index = BM25(docs)
        ranker = index.score
    scored = [(float(ranker(cands.query, d)), d) for d in docs]
    ordered = tuple(d for _, d in sorted(scored, key=lambda sd: (-sd[0], sd[1].id)))
    top, bottom = ordered[:window], ordered[-window:]
    seen, pre = set(), []
    for d in top + bottom:
        if d.id not in seen:
            seen.add(d.id)
            pre.append(d)
    return PreRankedSet(cands.query, ordered, top, bottom, tuple(pre))


# --- labelers -----------------------------------------------------------------

class Labeler(Protocol):
    def __call__(self, query: Query, docs: Sequence[Document]) -> list[str]: ...


@dataclass
class SyntheticOracleLabeler:
    """Stand-in for the list-wise LLM: keeps documents above ``threshold``.

    Documents within ``band`` of the threshold switch sides with probability
    ``miss_noise``.
    """
    threshold: float = 0.5
    miss_noise: float = 0.0
    seed: int = 0
    band: float = 0.05

    def __call__(self, query: Query, docs: Sequence[Document]) -> list[str]:
        return synthetic_oracle_label(query, docs, self.threshold, self.miss_noise,
                                      self.seed, band=self.band)


def synthetic_oracle_label(query: Query, docs: Sequence[Document], threshold: float = 0.5,
                           miss_noise: float = 0.0, seed: int = 0, band: float = 0.05) -> list[str]:
    rng = sub_rng(seed, "oracle", query.id)
    kept = []
    for d in docs:
        if d.hidden_relevance is None:
            raise ValueError(f"document {d.id} has no hidden_relevance")
        keep = d.hidden_relevance >= threshold
        flip = rng.random() < miss_noise
        if flip and abs(d.hidden_relevance - threshold) <= band:
            keep = not keep
        if keep:
            kept.append(d)
    kept.sort(key=lambda d: (-d.hidden_relevance, d.id))
    return [d.id for d in kept]


def _check_labeler_output(ids: Sequence[str], allowed: Sequence[str]) -> list[str]:
    ids = list(ids)
    allowed_set = set(allowed)
    unknown = [i for i in ids if i not in allowed_set]
    if unknown:
        raise LabelerContractError(f"labeler returned unknown ids {unknown}")
    if len(set(ids)) != len(ids):
        raise LabelerContractError("labeler returned duplicate ids")
    return ids


def label_with_missing(query: Query, pre: PreRankedSet, labeler: Labeler) -> tuple[list[str], list[str]]:
    """Return (ranked, excluded); excluded keeps pre-rank order."""
    pre_ids = [d.id for d in pre.pre]
    ranked = _check_labeler_output(labeler(query, list(pre.pre)), pre_ids)
    ranked_set = set(ranked)
    return ranked, [i for i in pre_ids if i not in ranked_set]


_PERMUTATION = re.compile(r"^\s*\[?\s*(\d+)\s*\]?(?:\s*>\s*\[?\s*\d+\s*\]?)*\s*$")
_ID = re.compile(r"\d+")


def parse_permutation(text: str, n: int) -> list[int]:
    """Parse ``"[3] > [1] > [2]"`` (brackets optional) into 0-based indices."""
    line = text.strip().splitlines()[0] if text.strip() else ""
    if not _PERMUTATION.match(line):
        raise LabelerContractError(f"unparseable labeler output: {text!r}")
    idx = [int(m) - 1 for m in _ID.findall(line)]
    if any(i < 0 or i >= n for i in idx):
        raise LabelerContractError(f"identifier out of range in {text!r}")
    if len(set(idx)) != len(idx):
        raise LabelerContractError(f"duplicate identifier in {text!r}")
    return idx


def listwise_prompt(query: Query, docs: Sequence[Document]) -> list[dict]:
    passages = "\n".join(f"[{i}] {d.text}" for i, d in enumerate(docs, 1))
    return [
        {"role": "system",
         "content": "You rank passages by relevance to a search query."},
        {"role": "user",
         "content": (f"I will provide you with {len(docs)} passages, each indicated by a numerical "
                     f"identifier []. Rank the passages based on their relevance to the query.\n\n"
                     f"{passages}\n\nQuery: {query.text}\n\n"
                     "Answer only with identifiers in descending relevance, e.g. [2] > [1]. "
                     "Leave out passages that are not relevant.")},
    ]


@dataclass
class HttpLabeler:
    """Chat-completion client speaking the OpenAI-style JSON protocol."""
    endpoint: str
    model: str = "default"
    token_env: str = "RANKDISTILL_HTTP_TOKEN"
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0

    def _post(self, payload: dict) -> dict:
        import requests

        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = requests.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
                if resp.status_code >= 500:
                    raise PipelineError(f"labeler endpoint returned {resp.status_code}")
                resp.raise_for_status()
                return resp.json()
            except (requests.RequestException, PipelineError) as exc:
                last = exc
                if attempt < self.max_retries:
                    time.sleep(self.backoff * 2 ** attempt)
        raise PipelineError(f"labeler request failed after {self.max_retries + 1} attempts: {last}")

    def __call__(self, query: Query, docs: Sequence[Document]) -> list[str]:
        payload = {"model": self.model, "temperature": 0.0, "messages": listwise_prompt(query, docs)}
        body = self._post(payload)
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise LabelerContractError(f"malformed completion body: {body!r}") from exc
        return [docs[i].id for i in parse_permutation(content, len(docs))]


# --- negatives, scores, reasoning ----------------------------------------------

class NegativePool:
    """All corpus documents in id order, with topic mixtures stacked for fast filtering."""

    def __init__(self, corpus: Sequence[CandidateSet]):
        docs = {}
        for cs in corpus:
            for d in cs.documents:
                docs.setdefault(d.id, d)
        self.docs = [docs[k] for k in sorted(docs)]
        has_topics = self.docs and all(d.topics is not None for d in self.docs)
        self.topics = np.array([d.topics for d in self.docs]) if has_topics else None


def sample_negatives(corpus: Sequence[CandidateSet], cands: CandidateSet, size: int = 3,
                     seed: int = 0, max_relevance: float = 0.05,
                     pool: NegativePool | None = None) -> list[Document]:
    """Uniformly sample documents from outside the query's candidate set.

    When topic mixtures are available, only documents whose topic relevance
    to the query is below ``max_relevance`` are eligible.
    """
    pool = pool or NegativePool(corpus)
    own = set(cands.doc_ids)
    eligible = np.array([d.id not in own for d in pool.docs], dtype=bool)
    if pool.topics is not None and cands.query.topics is not None and len(pool.docs):
        rel = 1.0 - 0.5 * np.abs(pool.topics - np.asarray(cands.query.topics)).sum(axis=1)
        eligible &= rel < max_relevance
    idx = np.flatnonzero(eligible)
    if len(idx) < size:
        raise ValueError(f"only {len(idx)} eligible negatives for query {cands.query.id}, need {size}")
    picks = sub_rng(seed, "negatives", cands.query.id).choice(len(idx), size=size, replace=False)
    return [pool.docs[idx[i]] for i in sorted(int(p) for p in picks)]


RANKED_FLOOR = 0.21


def assign_graded_scores(ranked: Sequence[str], excluded: Sequence[str], negatives: Sequence[str],
                         seed: int = 0, key: str = "") -> dict[str, float]:
    """2 - 0.1*i for the i-th ranked doc (1-based, floored at 0.21), a random
    permutation of 0.2 - 0.01*(j+1) for excluded docs, 0 for negatives."""
    groups = [set(ranked), set(excluded), set(negatives)]
    if sum(len(g) for g in groups) != len(set().union(*groups)):
        raise ValueError("ranked, excluded and negative ids must be disjoint")
    scores = {}
    for i, did in enumerate(ranked, 1):
        scores[did] = max(round(2.0 - i * 0.1, 10), RANKED_FLOOR)
    perm = sub_rng(seed, "excluded", key).permutation(len(excluded))
    for did, j in zip(excluded, perm):
        scores[did] = round(0.2 - (int(j) + 1) * 0.01, 10)
    for did in negatives:
        scores[did] = 0.0
    return scores


def mock_reasoning(query: Query, doc: Document, label: int) -> str:
    doc_words = set(split_words(doc.text))
    shared = [w for w in dict.fromkeys(split_words(query.text)) if w in doc_words]
    head = "relevant" if label == 1 else "irrelevant"
    if shared:
        return f"{head}: shares terms [{', '.join(shared)}]"
    return f"{head}: no shared terms"


def generate_reasoning(query: Query, doc: Document, label: int,
                       generator: ReasoningGenerator = mock_reasoning) -> str:
    text = generator(query, doc, label)
    if not text:
        raise LabelerContractError(f"empty reasoning for ({query.id}, {doc.id})")
    return text


# --- sliding window (RankGPT-style baseline labeling) ---------------------------

def sliding_window_label(query: Query, docs: Sequence[Document], labeler: Labeler,
                         window: int = 20, step: int = 10) -> list[str]:
    """Back-to-front sliding-window re-ranking over the whole list.

    Inside each window, ids the labeler leaves out follow its ranked ids in
    their previous relative order.
    """
    if not (window > step > 0):
        raise ValueError("need window > step > 0")
    order = list(docs)
    n = len(order)
    end = n
    start = max(0, n - window)
    while True:
        chunk = order[start:end]
        ranked = _check_labeler_output(labeler(query, chunk), [d.id for d in chunk])
        by_id = {d.id: d for d in chunk}
        rset = set(ranked)
        order[start:end] = [by_id[i] for i in ranked] + [d for d in chunk if d.id not in rset]
        if start == 0:
            break
        end -= step
        start = max(0, start - step)
    return [d.id for d in order]


# --- dataset -------------------------------------------------------------------

@dataclass
class RankingLabel:
    query_id: str
    query: str
    ranked: list[str]
    excluded: list[str]
    negatives: list[str]
    graded: dict[str, float]
    binary: dict[str, int]
    reasoning: dict[str, str]
    seed: int
    documents: dict[str, str] = field(default_factory=dict)

    @property
    def doc_ids(self) -> list[str]:
        return self.ranked + self.excluded + self.negatives

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id, "query": self.query,
            "ranked": self.ranked, "excluded": self.excluded, "negatives": self.negatives,
            "graded": self.graded, "binary": self.binary, "reasoning": self.reasoning,
            "seed": self.seed, "documents": self.documents,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RankingLabel":
        return cls(obj["query_id"], obj["query"], list(obj["ranked"]), list(obj["excluded"]),
                   list(obj["negatives"]), {k: float(v) for k, v in obj["graded"].items()},
                   {k: int(v) for k, v in obj["binary"].items()}, dict(obj["reasoning"]),
                   int(obj["seed"]), dict(obj.get("documents", {})))


def check_label(label: RankingLabel, pre_ids: Sequence[str] | None = None,
                candidate_ids: Sequence[str] | None = None) -> None:
    """Raise AssertionError if ``label`` violates a RankingLabel invariant."""
    ranked, excluded = set(label.ranked), set(label.excluded)
    assert not ranked & excluded, "ranked and excluded overlap"
    if pre_ids is not None:
        assert ranked | excluded == set(pre_ids), "ranked + excluded must equal the pre-ranked window"
    if candidate_ids is not None:
        assert not set(label.negatives) & set(candidate_ids), "negative drawn from candidate set"
    g = label.graded
    if len(label.ranked) <= 18 and label.ranked:
        assert min(g[i] for i in label.ranked) > max([g[i] for i in label.excluded], default=0.0)
    if label.excluded:
        assert min(g[i] for i in label.excluded) > 0.0
    assert all(g[i] == 0.0 for i in label.negatives)
    for did in label.ranked + label.excluded:
        assert label.binary[did] == (1 if did in ranked else 0)


def _label_one(cs: CandidateSet, pool: NegativePool, pre_ranker: Scorer | None,
               labeler: Labeler, reasoner: ReasoningGenerator | None, seed: int,
               n_negatives: int, sliding_window: bool) -> RankingLabel | tuple[str, str]:
    q = cs.query
    try:
        if sliding_window:
            ranked = sliding_window_label(q, cs.documents, labeler)
            excluded: list[str] = []
        else:
            pre = pre_rank(cs, pre_ranker)
            ranked, excluded = label_with_missing(q, pre, labeler)
    except LabelerContractError as exc:
        return (q.id, f"labeler contract: {exc}")
    if not ranked:
        return (q.id, "empty labeler output")
    negs = sample_negatives((), cs, n_negatives, seed, pool=pool)
    graded = assign_graded_scores(ranked, excluded, [d.id for d in negs], seed, key=q.id)
    binary = {i: 1 for i in ranked} | {i: 0 for i in excluded} | {d.id: 0 for d in negs}
    by_id = {d.id: d for d in cs.documents} | {d.id: d for d in negs}
    reasoning = {}
    if reasoner is not None:
        for did in ranked + excluded + [d.id for d in negs]:
            reasoning[did] = generate_reasoning(q, by_id[did], binary[did], reasoner)
    texts = {did: by_id[did].text for did in ranked + excluded + [d.id for d in negs]}
    return RankingLabel(q.id, q.text, list(ranked), list(excluded), [d.id for d in negs],
                        graded, binary, reasoning, seed, texts)


@dataclass
class DatasetResult:
    labels: list[RankingLabel]
    skipped: list[tuple[str, str]]


def build_dataset(corpus: Sequence[CandidateSet], labeler: Labeler, pre_ranker: Scorer | None = None,
                  reasoner: ReasoningGenerator | None = mock_reasoning, seed: int = 0,
                  n_negatives: int = 3, sliding_window: bool = False, workers: int = 1,
                  out: str | Path | None = None) -> DatasetResult:
    """Label every query; output order follows the corpus regardless of ``workers``."""
    pool = NegativePool(corpus)

    def job(cs: CandidateSet):
        try:
            return _label_one(cs, pool, pre_ranker, labeler, reasoner, seed, n_negatives, sliding_window)
        except PipelineError as exc:
            raise PipelineError(f"query {cs.query.id}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(job, corpus))
    else:
        results = [job(cs) for cs in corpus]
    labels = [r for r in results if isinstance(r, RankingLabel)]
    skipped = [r for r in results if not isinstance(r, RankingLabel)]
    for qid, reason in skipped:
        log.info("skipped %s: %s", qid, reason)
    if out is not None:
        try:
            write_dataset(labels, out)
        except OSError as exc:
            raise PipelineError(f"writing {out}: {exc}") from exc
    return DatasetResult(labels, skipped)


def write_dataset(labels: Sequence[RankingLabel], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for lab in labels:
            fh.write(json.dumps(lab.to_json(), ensure_ascii=False) + "\n")


def read_dataset(path: str | Path) -> list[RankingLabel]:
    with open(path, encoding="utf-8") as fh:
        return [RankingLabel.from_json(json.loads(line)) for line in fh if line.strip()]
