import json

import numpy as np
import pytest
import requests
from hypothesis import given, strategies as st

from rankdistill import labelgen as lg
from rankdistill.evaluation import BM25
from rankdistill.labelgen import (HttpLabeler, LabelerContractError, PipelineError, RankingLabel,
                                  SyntheticOracleLabeler, assign_graded_scores, build_dataset, check_label,
                                  generate_reasoning, label_with_missing, mock_reasoning, parse_permutation,
                                  pre_rank, read_dataset, sample_negatives, sliding_window_label,
                                  synthetic_oracle_label, write_dataset)
from rankdistill.text import CandidateSet, Document, Query, topic_relevance


def make_set(rels, qid="q"):
    docs = tuple(Document(f"d{i + 1}", f"word{i} text", hidden_relevance=r) for i, r in enumerate(rels))
    return CandidateSet(Query(qid, "word1 text"), docs)


class Recorder:
    """Labeler wrapper counting calls."""

    def __init__(self, inner):
        self.inner, self.calls = inner, 0

    def __call__(self, query, docs):
        self.calls += 1
        return self.inner(query, docs)


def perfect(query, docs):
    return [d.id for d in sorted(docs, key=lambda d: (-d.hidden_relevance, d.id))]


# --- pre-rank ---------------------------------------------------------------------

def test_pre_rank_keeps_head_and_tail(small_corpus):
    cs = small_corpus[0]
    pre = pre_rank(cs)
    assert len(cs.documents) == 30 and len(pre.pre) == 20
    assert pre.top10 == pre.ordered_docs[:10] and pre.bottom10 == pre.ordered_docs[-10:]
    assert sorted(d.id for d in pre.ordered_docs) == sorted(cs.doc_ids)


def test_pre_rank_fifty_docs_gives_twenty():
    from rankdistill.text import generate_synthetic_corpus
    cs = generate_synthetic_corpus(0, 1, 50)[0]
    assert len(pre_rank(cs).pre) == 20


def test_pre_rank_small_set_is_whole_set():
    cs = make_set([0.1, 0.2, 0.3, 0.4, 0.5])
    pre = pre_rank(cs)
    ids = sorted(cs.doc_ids)
    assert sorted(d.id for d in pre.pre) == ids
    assert sorted(d.id for d in pre.top10) == ids == sorted(d.id for d in pre.bottom10)


def test_pre_rank_matches_bruteforce_bm25_sort(small_corpus):
    cs = small_corpus[1]
    index = BM25(cs.documents)
    scores = {d.id: index.score(cs.query, d) for d in cs.documents}
    expected = sorted(scores, key=lambda i: (-scores[i], i))
    assert [d.id for d in pre_rank(cs).ordered_docs] == expected


def test_pre_rank_custom_ranker_and_ties():
    cs = make_set([0.5, 0.5, 0.9])
    pre = pre_rank(cs, ranker=lambda q, d: d.hidden_relevance)
    assert [d.id for d in pre.ordered_docs] == ["d3", "d1", "d2"]


def test_pre_rank_empty_raises():
    with pytest.raises(ValueError):
        pre_rank(CandidateSet(Query("q", "x"), ()))


# --- oracle labeler -------------------------------------------------------------------

def test_oracle_threshold_rule():
    cs = make_set([0.9, 0.8, 0.1])
    assert synthetic_oracle_label(cs.query, cs.documents, 0.5) == ["d1", "d2"]


def test_oracle_all_below_threshold():
    cs = make_set([0.1, 0.2])
    assert synthetic_oracle_label(cs.query, cs.documents, 0.5) == []


def test_oracle_requires_hidden_relevance():
    with pytest.raises(ValueError):
        synthetic_oracle_label(Query("q", "x"), [Document("d", "x")])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.floats(0, 1), st.integers(0, 10))
def test_oracle_noise_flips_only_inside_band(rels, noise, seed):
    cs = make_set(rels)
    out = set(synthetic_oracle_label(cs.query, cs.documents, 0.5, noise, seed))
    for d in cs.documents:
        if abs(d.hidden_relevance - 0.5) > 0.05:
            assert (d.id in out) == (d.hidden_relevance >= 0.5)


# --- missing documents ------------------------------------------------------------------

def test_label_with_missing_all_ranked(small_corpus):
    pre = pre_rank(small_corpus[0])
    ranked, excluded = label_with_missing(pre.query, pre, lambda q, docs: [d.id for d in docs])
    assert len(ranked) == 20 and excluded == []


def test_label_with_missing_partial():
    pre = pre_rank(make_set(np.linspace(0, 1, 20).tolist()))
    ranked, excluded = label_with_missing(pre.query, pre, lambda q, docs: [d.id for d in docs][:13])
    assert len(excluded) == 7


def test_label_with_missing_oracle_excludes_subthreshold(small_corpus):
    cs = small_corpus[2]
    pre = pre_rank(cs)
    _, excluded = label_with_missing(cs.query, pre, SyntheticOracleLabeler(0.5))
    assert set(excluded) == {d.id for d in pre.pre if d.hidden_relevance < 0.5}


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0, 1))
def test_label_with_missing_partitions_pre(rels, tau):
    cs = make_set(rels)
    pre = pre_rank(cs)
    ranked, excluded = label_with_missing(cs.query, pre, SyntheticOracleLabeler(tau))
    assert not set(ranked) & set(excluded)
    assert sorted(ranked + excluded) == sorted(d.id for d in pre.pre)


def test_labeler_contract_violations():
    pre = pre_rank(make_set([0.1, 0.9]))
    with pytest.raises(LabelerContractError):
        label_with_missing(pre.query, pre, lambda q, d: ["nope"])
    with pytest.raises(LabelerContractError):
        label_with_missing(pre.query, pre, lambda q, d: ["d1", "d1"])


def test_empty_labeler_output_does_not_raise():
    pre = pre_rank(make_set([0.1, 0.2]))
    assert label_with_missing(pre.query, pre, lambda q, d: []) == ([], ["d2", "d1"])


# --- graded scores -------------------------------------------------------------------

def test_ranked_scores_follow_two_minus_tenth_of_position():
    s = assign_graded_scores(["a", "b", "c"], [], [])
    assert s == {"a": 1.9, "b": 1.8, "c": 1.7}


def test_excluded_scores_are_permutation_of_band():
    ex = [f"e{i}" for i in range(10)]
    s = assign_graded_scores([], ex, [], seed=4, key="q")
    assert sorted(s.values()) == pytest.approx([round(0.1 + 0.01 * i, 2) for i in range(10)])
    again = assign_graded_scores([], ex, [], seed=4, key="q")
    assert s == again


def test_negatives_score_zero_and_long_lists_are_floored():
    ranked = [f"r{i}" for i in range(25)]
    s = assign_graded_scores(ranked, ["x"], ["n1", "n2"])
    assert s["n1"] == s["n2"] == 0.0
    assert min(s[r] for r in ranked) == lg.RANKED_FLOOR > s["x"]


def test_graded_scores_reject_overlap():
    with pytest.raises(ValueError):
        assign_graded_scores(["a"], ["a"], [])


@given(st.integers(0, 18), st.integers(0, 12), st.integers(0, 3), st.integers(0, 99))
def test_graded_scores_strictly_ordered(n_r, n_e, n_n, seed):
    ranked = [f"r{i}" for i in range(n_r)]
    excluded = [f"e{i}" for i in range(n_e)]
    negs = [f"n{i}" for i in range(n_n)]
    s = assign_graded_scores(ranked, excluded, negs, seed)
    r, e = [s[i] for i in ranked], [s[i] for i in excluded]
    assert min(r, default=9) > max(e, default=0.0)
    assert min(e, default=9) > 0.0
    assert all(s[i] == 0.0 for i in negs)


# --- negatives -----------------------------------------------------------------------

def test_negatives_come_from_outside_and_are_off_topic(small_corpus):
    cs = small_corpus[0]
    negs = sample_negatives(small_corpus, cs, 3, seed=1)
    assert len(negs) == 3 and not {d.id for d in negs} & set(cs.doc_ids)
    assert all(topic_relevance(cs.query.topics, d.topics) < 0.05 for d in negs)
    assert negs == sample_negatives(small_corpus, cs, 3, seed=1)


def test_negatives_insufficient_pool_raises(small_corpus):
    with pytest.raises(ValueError):
        sample_negatives(small_corpus[:1], small_corpus[0], 3)


# --- reasoning -------------------------------------------------------------------------

def test_mock_reasoning_templates():
    q = Query("q", "dog park")
    assert mock_reasoning(q, Document("d", "the dog runs"), 1) == "relevant: shares terms [dog]"
    assert mock_reasoning(q, Document("d", "cats"), 0) == "irrelevant: no shared terms"
    assert mock_reasoning(q, Document("d", "cats"), 0) == mock_reasoning(q, Document("d", "cats"), 0)


def test_empty_reasoning_is_a_contract_error():
    with pytest.raises(LabelerContractError):
        generate_reasoning(Query("q", "x"), Document("d", "y"), 1, lambda q, d, y: "")


# --- sliding window ------------------------------------------------------------------

def test_sliding_window_single_call_for_short_lists():
    cs = make_set([0.2, 0.9, 0.7, 0.1])
    rec = Recorder(SyntheticOracleLabeler(0.5))
    out = sliding_window_label(cs.query, cs.documents, rec)
    assert rec.calls == 1 and out == ["d2", "d3", "d1", "d4"]


def test_sliding_window_call_count_for_thirty():
    cs = make_set(np.linspace(0, 1, 30).tolist())
    rec = Recorder(perfect)
    sliding_window_label(cs.query, cs.documents, rec)
    assert rec.calls == 2


def test_sliding_window_identity_is_fixpoint():
    cs = make_set(np.random.default_rng(0).random(37).tolist())
    out = sliding_window_label(cs.query, cs.documents, lambda q, d: [x.id for x in d])
    assert out == cs.doc_ids


def test_sliding_window_rejects_bad_geometry():
    cs = make_set([0.1])
    with pytest.raises(ValueError):
        sliding_window_label(cs.query, cs.documents, perfect, window=10, step=10)


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=40, unique=True))
def test_sliding_window_perfect_labeler_fixes_the_head(rels):
    """One back-to-front pass carries the true top (window - step) into place."""
    cs = make_set(rels)
    out = sliding_window_label(cs.query, cs.documents, perfect)
    truth = perfect(cs.query, cs.documents)
    assert sorted(out) == sorted(truth)
    assert out[:10] == truth[:10]
    if len(rels) <= 20:
        assert out == truth


def test_sliding_window_single_pass_is_not_a_full_sort():
    # Tail window holds the 20 best docs; its lower half is left behind the head window.
    rels = [0.01 * i for i in range(10)] + [0.5 + 0.01 * i for i in range(20)]
    cs = make_set(rels)
    out = sliding_window_label(cs.query, cs.documents, perfect)
    assert out != perfect(cs.query, cs.documents)


# --- permutation parsing and the HTTP labeler --------------------------------------

def test_parse_permutation_grammar():
    assert parse_permutation("[3] > [1] > [2]", 3) == [2, 0, 1]
    assert parse_permutation("2 > 1", 3) == [1, 0]
    for bad in ("[4] > [1]", "[1] > [1]", "the best is [1]", ""):
        with pytest.raises(LabelerContractError):
            parse_permutation(bad, 3)


@given(st.permutations(list(range(1, 9))), st.integers(1, 8))
def test_parse_permutation_round_trip(perm, cut):
    text = " > ".join(f"[{i}]" for i in perm[:cut])
    assert parse_permutation(text, 8) == [i - 1 for i in perm[:cut]]


class FakeResponse:
    def __init__(self, status, body):
        self.status_code, self._body = status, body

    def json(self):
        return self._body

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.HTTPError(f"status {self.status_code}")


def test_http_labeler_parses_completion(monkeypatch):
    seen = {}

    def fake_post(url, json=None, headers=None, timeout=None):
        seen.update(url=url, payload=json, headers=headers, timeout=timeout)
        return FakeResponse(200, {"choices": [{"message": {"content": "[2] > [1]"}}]})

    monkeypatch.setattr(requests, "post", fake_post)
    monkeypatch.setenv("RANKDISTILL_HTTP_TOKEN", "secret")
    cs = make_set([0.1, 0.9, 0.4])
    out = HttpLabeler("http://labeler.invalid/v1/chat", timeout=5)(cs.query, cs.documents)
    assert out == ["d2", "d1"]
    assert seen["headers"]["Authorization"] == "Bearer secret" and seen["timeout"] == 5
    assert "[3]" in seen["payload"]["messages"][-1]["content"]


def test_http_labeler_retries_then_fails(monkeypatch):
    calls = []

    def fake_post(*a, **k):
        calls.append(1)
        return FakeResponse(503, {})

    monkeypatch.setattr(requests, "post", fake_post)
    cs = make_set([0.1])
    with pytest.raises(PipelineError):
        HttpLabeler("http://x.invalid", max_retries=2, backoff=0.0)(cs.query, cs.documents)
    assert len(calls) == 3


def test_http_labeler_malformed_body(monkeypatch):
    monkeypatch.setattr(requests, "post", lambda *a, **k: FakeResponse(200, {"oops": 1}))
    cs = make_set([0.1])
    with pytest.raises(LabelerContractError):
        HttpLabeler("http://x.invalid")(cs.query, cs.documents)


# --- dataset -----------------------------------------------------------------------------

def test_dataset_labels_pass_invariants(small_corpus, small_labels):
    by_id = {cs.query.id: cs for cs in small_corpus}
    assert small_labels
    for lab in small_labels:
        cs = by_id[lab.query_id]
        check_label(lab, [d.id for d in pre_rank(cs).pre], cs.doc_ids)
        assert len(lab.negatives) == 3
        assert set(lab.reasoning) == set(lab.doc_ids)
        assert set(lab.documents) == set(lab.doc_ids)


def test_dataset_is_byte_identical(tmp_path, small_corpus):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    build_dataset(small_corpus, SyntheticOracleLabeler(), seed=9, out=a)
    build_dataset(small_corpus, SyntheticOracleLabeler(), seed=9, out=b, workers=4)
    assert a.read_bytes() == b.read_bytes()
    first = json.loads(a.read_text().splitlines()[0])
    assert {"query_id", "query", "ranked", "excluded", "negatives", "graded", "binary",
            "reasoning", "seed"} <= set(first)


def test_dataset_round_trip(tmp_path, small_labels):
    path = tmp_path / "d.jsonl"
    write_dataset(small_labels, path)
    assert read_dataset(path) == small_labels


def test_empty_output_queries_are_skipped(small_corpus):
    res = build_dataset(small_corpus[:3], lambda q, d: [], seed=0)
    assert res.labels == [] and [q for q, _ in res.skipped] == [cs.query.id for cs in small_corpus[:3]]


def test_write_failure_is_pipeline_error(tmp_path, small_corpus):
    with pytest.raises(PipelineError):
        build_dataset(small_corpus[:2], SyntheticOracleLabeler(), out=tmp_path / "missing" / "x.jsonl")


def test_sliding_window_dataset_mode(small_corpus):
    res = build_dataset(small_corpus[:2], perfect, seed=0, sliding_window=True)
    lab = res.labels[0]
    assert lab.excluded == [] and len(lab.ranked) == len(small_corpus[0].documents)
    assert isinstance(lab, RankingLabel)
