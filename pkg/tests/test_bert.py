import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from rankdistill.bert import (BertConfig, DegenerateLabelsWarning, RRABert, make_encoder_input, ranknet_loss,
                              token_select)
from rankdistill.nn import ModelConfig, grad_check, pad_batch

from . import oracles

ids = st.lists(st.integers(0, 49), min_size=1, max_size=8)


@pytest.fixture(scope="module")
def model(small_vocab):
    torch.manual_seed(0)
    return RRABert(small_vocab, ModelConfig(len(small_vocab)), BertConfig()).eval()


# --- token selection -------------------------------------------------------------------

@settings(max_examples=250)
@given(ids, ids, st.integers(1, 4), st.integers(0, 10_000))
def test_token_select_matches_bruteforce(q, d, k, seed):
    emb = torch.from_numpy(np.random.default_rng(seed).normal(size=(50, 6)))
    got = token_select(q, d, emb, k)
    assert list(got.positions) == oracles.token_select(q, d, emb.numpy(), k)


def test_token_select_ties_go_left_and_duplicates_collapse():
    emb = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert token_select([0], [2, 1, 0, 1], emb, k=1).positions == (1,)
    assert token_select([0], [1, 1, 0], emb, k=3).positions == (0, 2)


def test_token_select_offset_and_empty():
    emb = torch.eye(4)
    assert token_select([1], [1, 2], emb, k=1, offset=5).positions == (5,)
    assert token_select([], [1], emb, k=1).positions == ()


@given(ids, ids, st.integers(0, 5))
def test_token_select_ignores_padding_after_doc_span(q, d, n_pad):
    vocab_size = 50
    emb = torch.from_numpy(np.random.default_rng(0).normal(size=(vocab_size, 4)))
    from rankdistill.text import build_vocabulary
    vocab = build_vocabulary(["x"], 10)
    inp = make_encoder_input(q, d, vocab, 40)
    padded, _ = pad_batch([list(inp.token_ids), list(inp.token_ids) + [vocab.pad_id] * n_pad], vocab.pad_id)
    doc = padded[1, inp.doc_span[0]:inp.doc_span[1]].tolist()
    assert token_select(q, doc, emb, 3).positions == token_select(q, d, emb, 3).positions


def test_encoder_input_layout_and_truncation(small_vocab):
    inp = make_encoder_input([7, 8], [9, 10, 11, 12], small_vocab, 6)
    assert inp.token_ids == (small_vocab.cls_id, 7, 8, small_vocab.sep_id, 9, 10)
    assert inp.truncated and inp.query_ids == (7, 8) and inp.doc_ids == (9, 10)
    with pytest.raises(ValueError):
        make_encoder_input([1] * 5, [2], small_vocab, 6)


# --- TCL ------------------------------------------------------------------------------------

def test_tcl_full_selection_sees_whole_sequence(model, small_corpus):
    cs = small_corpus[0]
    inp = model.encode(cs.query.text, cs.documents[0].text)
    last = model.encoder(torch.tensor(inp.token_ids)).last
    full = type(model.select(inp))(tuple(range(*inp.doc_span)), 3)
    model.tcl.keep_weights = True
    out = model.tcl_forward(last, [inp], [full])
    model.tcl.keep_weights = False
    assert out.shape == (1, 64)
    assert model.tcl.last_weights.shape[-1] == len(inp.token_ids)


def test_tcl_forward_matches_attention_oracle(model, small_corpus):
    cs = small_corpus[1]
    inp = model.encode(cs.query.text, cs.documents[3].text)
    sel = model.select(inp)
    m = model.double()
    try:
        last = m.encoder(torch.tensor(inp.token_ids)).last
        rows = [0, *range(*inp.query_span), inp.sep_index, *sel.positions]
        h_t = last[0, rows].detach().numpy()
        params = [p.detach().numpy() for p in (m.tcl.q_proj.weight, m.tcl.q_proj.bias, m.tcl.k_proj.weight,
                                               m.tcl.k_proj.bias, m.tcl.v_proj.weight, m.tcl.v_proj.bias,
                                               m.tcl.out_proj.weight, m.tcl.out_proj.bias)]
        expected = oracles.attention(h_t, *params, m.tcl.n_heads)[0]
        np.testing.assert_allclose(m.tcl_forward(last, [inp], [sel])[0].detach().numpy(), expected, atol=1e-10)
    finally:
        model.float()


def test_tcl_heads_scale_down_for_small_hidden(small_vocab, caplog):
    m = RRABert(small_vocab, ModelConfig(len(small_vocab), hidden_size=12, n_heads=2))
    assert m.tcl.n_heads == 6


# --- relevance score ------------------------------------------------------------------------

def test_score_combines_base_and_tcl(model, small_corpus):
    cs = small_corpus[0]
    inp = [model.encode(cs.query.text, d.text) for d in cs.documents[:3]]
    with torch.no_grad():
        s, base, tcl = model.score_inputs(inp, use_tcl=True, alpha=0.3, return_parts=True)
    torch.testing.assert_close(s, base + 0.3 * tcl)
    assert 0.4 + 0.3 * 0.2 == pytest.approx(0.46)


def test_alpha_zero_equals_no_tcl(model, small_corpus):
    cs = small_corpus[2]
    for d in cs.documents[:6]:
        a = model.relevance_score(cs.query.text, d.text, use_tcl=True, alpha=0.0)
        b = model.relevance_score(cs.query.text, d.text, use_tcl=False)
        assert a == b


def test_rank_orders_by_score_and_ties_by_id(model, monkeypatch):
    monkeypatch.setattr(model, "score_texts", lambda q, texts, use_tcl=None: torch.tensor([0.2, 0.9, 0.5, 0.9]))
    out = model.rank("q", [("c", "x"), ("b", "x"), ("a", "x"), ("a2", "x")])
    assert [d for d, _ in out] == ["a2", "b", "a", "c"]


def test_rank_single_doc(model, small_corpus):
    cs = small_corpus[0]
    assert [d for d, _ in model.rank(cs.query.text, [("only", cs.documents[0].text)])] == ["only"]


def test_rank_without_tcl_never_calls_tcl(model, small_corpus):
    cs = small_corpus[0]
    docs = [(d.id, d.text) for d in cs.documents]
    before = model.tcl_calls
    model.rank(cs.query.text, docs, use_tcl=False)
    assert model.tcl_calls == before
    model.rank(cs.query.text, docs, use_tcl=True)
    assert model.tcl_calls == before + 1


# --- RankNet ---------------------------------------------------------------------------------

def test_ranknet_closed_forms():
    assert float(ranknet_loss(torch.zeros(2), [1, 0])) == pytest.approx(math.log(2))
    assert float(ranknet_loss(torch.tensor([20.0, 0.0]), [1, 0])) < 1e-8


def test_ranknet_degenerate_labels_warn():
    with pytest.warns(DegenerateLabelsWarning):
        loss = ranknet_loss(torch.tensor([1.0, 2.0], requires_grad=True), [1, 1])
    assert loss.item() == 0.0 and loss.requires_grad


def test_ranknet_shape_errors():
    with pytest.raises(ValueError):
        ranknet_loss(torch.zeros(1), [1])
    with pytest.raises(ValueError):
        ranknet_loss(torch.zeros(3), [1, 0])


finite = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=250)
@given(st.lists(st.tuples(finite, st.integers(0, 3)), min_size=2, max_size=8))
def test_ranknet_matches_bruteforce(pairs):
    s, y = [p[0] for p in pairs], [p[1] for p in pairs]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateLabelsWarning)
        got = float(ranknet_loss(torch.tensor(s, dtype=torch.float64), y))
    assert abs(got - oracles.ranknet(s, y)) <= 1e-9


@given(st.lists(st.tuples(finite, st.integers(0, 3)), min_size=2, max_size=8), finite)
def test_ranknet_translation_invariant(pairs, c):
    s = torch.tensor([p[0] for p in pairs], dtype=torch.float64)
    y = [p[1] for p in pairs]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateLabelsWarning)
        assert float(ranknet_loss(s + c, y)) == pytest.approx(float(ranknet_loss(s, y)), abs=1e-12)


def test_ranknet_decreases_with_margin():
    vals = [float(ranknet_loss(torch.tensor([m, 0.0]), [1, 0])) for m in (-1.0, 0.0, 1.0)]
    assert vals[0] > vals[1] > vals[2]


# --- gradients ----------------------------------------------------------------------------------

def test_ranknet_over_encoder_with_tcl_passes_grad_check(small_vocab, small_corpus):
    torch.manual_seed(0)
    m = RRABert(small_vocab, ModelConfig(len(small_vocab)), BertConfig(use_tcl=True)).double()
    cs = small_corpus[0]
    texts = [d.text for d in cs.documents[:3]]

    def loss():
        return ranknet_loss(m.score_texts(cs.query.text, texts, use_tcl=True), [1.9, 0.19, 0.0])

    report = grad_check(loss, dict(m.named_parameters()), samples_per_param=2)
    assert report.passed, report.violations[:3]
    assert any(name.startswith("tcl.") for name, _ in m.named_parameters())
