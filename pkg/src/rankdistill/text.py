"""Tokenization, vocabulary, corpus containers and the synthetic corpus generator."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, CLS, SEP, UNK = "[PAD]", "[CLS]", "[SEP]", "<unk>"
BASE_SPECIALS = (PAD, CLS, SEP, UNK)

# Words the prompt template and the mock reasoning generator rely on.
RESERVED_WORDS = (
    "query", "document", "relevant", "irrelevant", "response", "reason",
    "shares", "terms", "no", "shared",
)

_TOKEN = re.compile(r"[^\W_]+", re.UNICODE)


class ConfigurationError(ValueError):
    pass


def split_words(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]
    id_to_token: list[str]
    special_ids: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def unk_id(self) -> int:
        return self.special_ids[UNK]

    @property
    def pad_id(self) -> int:
        return self.special_ids[PAD]

    @property
    def cls_id(self) -> int:
        return self.special_ids[CLS]

    @property
    def sep_id(self) -> int:
        return self.special_ids[SEP]

    def add_special(self, token: str) -> int:
        """Append a special token; returns its id. Re-adding is a no-op."""
        if token in self.token_to_id:
            self.special_ids[token] = self.token_to_id[token]
            return self.token_to_id[token]
        idx = len(self.id_to_token)
        self.id_to_token.append(token)
        self.token_to_id[token] = idx
        self.special_ids[token] = idx
        return idx

    def to_dict(self) -> dict:
        return {"tokens": list(self.id_to_token), "special": dict(self.special_ids)}

    @classmethod
    def from_dict(cls, data: dict) -> "Vocabulary":
        tokens = list(data["tokens"])
        return cls({t: i for i, t in enumerate(tokens)}, tokens, dict(data["special"]))


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    unk = vocab.unk_id
    return [vocab.token_to_id.get(w, unk) for w in split_words(text)]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.id_to_token[i] for i in ids)


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    token_ids: tuple[int, ...] = ()
    topics: tuple[float, ...] | None = None


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    token_ids: tuple[int, ...] = ()
    hidden_relevance: float | None = None
    topics: tuple[float, ...] | None = None


@dataclass(frozen=True)
class CandidateSet:
    query: Query
    documents: tuple[Document, ...]

    def __post_init__(self):
        ids = [d.id for d in self.documents]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate document ids in candidate set {self.query.id}")

    @property
    def doc_ids(self) -> list[str]:
        return [d.id for d in self.documents]


def _texts(items: Iterable) -> Iterable[str]:
    for item in items:
        if isinstance(item, str):
            yield item
        elif isinstance(item, CandidateSet):
            yield item.query.text
            for d in item.documents:
                yield d.text
        else:
            yield item.text


def build_vocabulary(corpus: Iterable, max_size: int,
                     extra_tokens: Sequence[str] = ()) -> Vocabulary:
    """Keep the ``max_size`` most frequent words (specials and extras always kept).

    ``corpus`` may mix strings, Query/Document objects and CandidateSets.
    Frequency ties are broken lexicographically.
    """
    extras = [t for t in dict.fromkeys(extra_tokens) if t not in BASE_SPECIALS]
    if max_size < len(BASE_SPECIALS) + len(extras) + 1:
        raise ConfigurationError(
            f"max_size={max_size} cannot hold {len(BASE_SPECIALS)} specials, "
            f"{len(extras)} reserved words and at least one corpus token")
    counts = Counter()
    for text in _texts(corpus):
        counts.update(split_words(text))
    for t in extras:
        counts.pop(t, None)
    room = max_size - len(BASE_SPECIALS) - len(extras)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:room]
    tokens = list(BASE_SPECIALS) + extras + [w for w, _ in ranked]
    specials = {t: i for i, t in enumerate(BASE_SPECIALS)}
    return Vocabulary({t: i for i, t in enumerate(tokens)}, tokens, specials)


def tokenize_corpus(sets: Sequence[CandidateSet], vocab: Vocabulary) -> list[CandidateSet]:
    out = []
    for cs in sets:
        q = replace(cs.query, token_ids=tuple(tokenize(cs.query.text, vocab)))
        docs = tuple(replace(d, token_ids=tuple(tokenize(d.text, vocab))) for d in cs.documents)
        out.append(CandidateSet(q, docs))
    return out


# --- synthetic corpus -------------------------------------------------------

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z")
_VOWELS = ("a", "e", "i", "o", "u")


def _pseudo_word(index: int) -> str:
    syll = [o + v for o in _ONSETS for v in _VOWELS]
    parts = []
    n = index
    for _ in range(3):
        parts.append(syll[n % len(syll)])
        n //= len(syll)
    return "".join(parts)


def topic_relevance(q_topics: Sequence[float], d_topics: Sequence[float]) -> float:
    """1 minus the total-variation distance between two topic mixtures."""
    return 1.0 - 0.5 * float(np.abs(np.asarray(q_topics) - np.asarray(d_topics)).sum())


def generate_synthetic_corpus(seed: int, n_queries: int = 200, docs_per_query: int = 50,
                              vocab_size: int = 200, n_topics: int = 6,
                              query_len: tuple[int, int] = (5, 8),
                              doc_len: tuple[int, int] = (12, 24),
                              noise: float = 0.05) -> list[CandidateSet]:
    """Topic-model corpus with known relevance.

    Each query mixes a primary and a secondary topic. Documents interpolate
    between the query mixture and an unrelated topic; ``hidden_relevance`` is
    the topic similarity plus Gaussian noise, affinely stretched to
    [0.02, 0.98] within each candidate set.
    """
    if min(n_queries, docs_per_query, vocab_size) <= 0:
        raise ConfigurationError("counts must be positive")
    if n_topics < 3:
        raise ConfigurationError("need at least 3 topics")
    rng = np.random.default_rng(seed)
    words = [_pseudo_word(i) for i in range(vocab_size)]
    n_background = max(1, vocab_size // 10)
    background = words[:n_background]
    topic_words = np.array_split(np.arange(n_background, vocab_size), n_topics)
    topic_words = [[words[i] for i in idx] or background for idx in topic_words]
    zipf = [np.array([1.0 / (r + 1) ** 0.8 for r in range(len(tw))]) for tw in topic_words]
    zipf = [z / z.sum() for z in zipf]

    def draw(mix: np.ndarray, length: int, p_background: float) -> str:
        out = []
        for _ in range(length):
            if rng.random() < p_background:
                out.append(background[rng.integers(len(background))])
                continue
            t = rng.choice(n_topics, p=mix)
            out.append(topic_words[t][rng.choice(len(topic_words[t]), p=zipf[t])])
        return " ".join(out)

    sets = []
    for qi in range(n_queries):
        t1 = int(rng.integers(n_topics))
        t2 = int((t1 + 1 + rng.integers(n_topics - 1)) % n_topics)
        q_mix = np.zeros(n_topics)
        q_mix[t1], q_mix[t2] = 0.75, 0.25
        q_text = draw(q_mix, int(rng.integers(query_len[0], query_len[1] + 1)), 0.0)
        query = Query(f"q{qi:04d}", q_text, topics=tuple(q_mix.tolist()))

        lambdas = (rng.permutation(docs_per_query) + rng.random(docs_per_query)) / docs_per_query
        raw, mixes, texts = [], [], []
        for j in range(docs_per_query):
            other = int(rng.integers(n_topics))
            while other in (t1, t2):
                other = int(rng.integers(n_topics))
            mix = lambdas[j] * q_mix
            mix[other] += 1.0 - lambdas[j]
            mixes.append(mix)
            raw.append(topic_relevance(q_mix, mix) + noise * rng.standard_normal())
            texts.append(draw(mix, int(rng.integers(doc_len[0], doc_len[1] + 1)), 0.15))
        raw = np.asarray(raw)
        span = raw.max() - raw.min()
        rel = 0.02 + 0.96 * (raw - raw.min()) / span if span > 0 else np.full_like(raw, 0.5)
        docs = tuple(
            Document(f"{query.id}-d{j:02d}", texts[j], hidden_relevance=round(float(rel[j]), 6),
                     topics=tuple(float(x) for x in mixes[j]))
            for j in range(docs_per_query))
        sets.append(CandidateSet(query, docs))
    return sets


# --- JSONL persistence ------------------------------------------------------

def candidate_set_to_json(cs: CandidateSet) -> dict:
    q = {"id": cs.query.id, "text": cs.query.text}
    if cs.query.topics is not None:
        q["topics"] = list(cs.query.topics)
    docs = []
    for d in cs.documents:
        obj = {"id": d.id, "text": d.text}
        if d.hidden_relevance is not None:
            obj["hidden_relevance"] = d.hidden_relevance
        if d.topics is not None:
            obj["topics"] = list(d.topics)
        docs.append(obj)
    return {"query": q, "documents": docs}


def candidate_set_from_json(obj: dict) -> CandidateSet:
    q = obj["query"]
    query = Query(str(q["id"]), q["text"], topics=tuple(q["topics"]) if "topics" in q else None)
    docs = tuple(
        Document(str(d["id"]), d["text"], hidden_relevance=d.get("hidden_relevance"),
                 topics=tuple(d["topics"]) if "topics" in d else None)
        for d in obj["documents"])
    return CandidateSet(query, docs)


def write_corpus(sets: Sequence[CandidateSet], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for cs in sets:
            fh.write(json.dumps(candidate_set_to_json(cs), ensure_ascii=False) + "\n")


def read_corpus(path: str | Path) -> list[CandidateSet]:
    sets = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                sets.append(candidate_set_from_json(json.loads(line)))
    ids = [cs.query.id for cs in sets]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate query ids in {path}")
    return sets


def corpus_vocabulary(sets: Sequence[CandidateSet], max_size: int = 2000) -> Vocabulary:
    return build_vocabulary(sets, max_size, extra_tokens=RESERVED_WORDS)
