"""Encoder ranker with Token Selection and a Term Control Layer (TCL)."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .nn import ModelConfig, MultiHeadAttention, Transformer, pad_batch, tcl_head_count
from .text import Vocabulary, tokenize

log = logging.getLogger(__name__)


class DegenerateLabelsWarning(UserWarning):
    pass


@dataclass
class BertConfig:
    k: int = 3
    alpha: float = 0.3
    use_tcl: bool = True
    use_tcl_at_inference: bool = False
    tcl_heads: int = 8
    similarity: str = "dot"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.similarity not in ("dot", "cosine"):
            raise ValueError("similarity must be 'dot' or 'cosine'")


@dataclass(frozen=True)
class EncoderInput:
    token_ids: tuple[int, ...]
    query_span: tuple[int, int]
    doc_span: tuple[int, int]
    sep_index: int
    truncated: bool = False

    @property
    def query_ids(self) -> tuple[int, ...]:
        return self.token_ids[self.query_span[0]:self.query_span[1]]

    @property
    def doc_ids(self) -> tuple[int, ...]:
        return self.token_ids[self.doc_span[0]:self.doc_span[1]]


def make_encoder_input(query_ids: Sequence[int], doc_ids: Sequence[int], vocab: Vocabulary,
                       max_len: int) -> EncoderInput:
    """``[CLS] query [SEP] document``; document tokens are cut first when too long."""
    query_ids, doc_ids = list(query_ids), list(doc_ids)
    if len(query_ids) + 2 > max_len:
        raise ValueError(f"query of {len(query_ids)} tokens does not fit max_len={max_len}")
    room = max_len - len(query_ids) - 2
    truncated = len(doc_ids) > room
    doc_ids = doc_ids[:room]
    ids = [vocab.cls_id] + query_ids + [vocab.sep_id] + doc_ids
    nq = len(query_ids)
    return EncoderInput(tuple(ids), (1, 1 + nq), (2 + nq, 2 + nq + len(doc_ids)), 1 + nq, truncated)


@dataclass(frozen=True)
class TokenSelection:
    positions: tuple[int, ...]
    k: int


def token_select(query_ids: Sequence[int], doc_ids: Sequence[int], embedding: torch.Tensor, k: int,
                 offset: int = 0, similarity: str = "dot") -> TokenSelection:
    """Top-``k`` document positions per query token by word-embedding similarity.

    Ties go to the smaller position; repeated document tokens collapse to their
    leftmost selected position. Returned positions are sorted and shifted by
    ``offset``.
    """
    if not len(query_ids) or not len(doc_ids):
        return TokenSelection((), k)
    with torch.no_grad():
        eq = embedding[torch.as_tensor(list(query_ids))]
        ed = embedding[torch.as_tensor(list(doc_ids))]
        if similarity == "cosine":
            eq, ed = F.normalize(eq, dim=-1), F.normalize(ed, dim=-1)
        sim = (eq @ ed.T).tolist()
    n_doc = len(doc_ids)
    chosen = set()
    for row in sim:
        order = sorted(range(n_doc), key=lambda j: (-row[j], j))
        chosen.update(order[:k])
    first_pos: dict[int, int] = {}
    for j in sorted(chosen):
        first_pos.setdefault(doc_ids[j], j)
    return TokenSelection(tuple(sorted(p + offset for p in first_pos.values())), k)


def ranknet_loss(scores: torch.Tensor, labels: Sequence[float] | torch.Tensor) -> torch.Tensor:
    """Mean of log(1 + exp(-(s_i - s_j))) over pairs with label_i > label_j."""
    labels = torch.as_tensor(labels, dtype=scores.dtype)
    if scores.shape != labels.shape or scores.dim() != 1 or scores.numel() < 2:
        raise ValueError("scores and labels must be matching 1-d lists of length >= 2")
    pairs = labels[:, None] > labels[None, :]
    if not pairs.any():
        warnings.warn("all labels equal; RankNet loss is 0", DegenerateLabelsWarning, stacklevel=2)
        return scores.sum() * 0.0
    diff = scores[:, None] - scores[None, :]
    return F.softplus(-diff[pairs]).mean()


class RRABert(nn.Module):
    kind = "rra_bert"

    def __init__(self, vocab: Vocabulary, config: ModelConfig, bert_config: BertConfig | None = None):
        super().__init__()
        self.vocab = vocab
        self.config = config
        self.bert_config = bert_config or BertConfig()
        heads = tcl_head_count(config.hidden_size, self.bert_config.tcl_heads)
        if heads != self.bert_config.tcl_heads:
            log.warning("TCL uses %d heads instead of %d for hidden size %d",
                        heads, self.bert_config.tcl_heads, config.hidden_size)
        self.encoder = Transformer(config, causal=False)
        self.clf_head = nn.Linear(config.hidden_size, 1)
        self.tcl = MultiHeadAttention(config.hidden_size, heads)
        self.tcl_calls = 0
        self.tcl.register_forward_pre_hook(self._count_tcl)

    def _count_tcl(self, module, args):
        self.tcl_calls += 1

    def encode(self, query_text: str, doc_text: str) -> EncoderInput:
        return make_encoder_input(tokenize(query_text, self.vocab), tokenize(doc_text, self.vocab),
                                  self.vocab, self.config.max_seq_len)

    def select(self, inp: EncoderInput) -> TokenSelection:
        return token_select(inp.query_ids, inp.doc_ids, self.encoder.word_embeddings.weight,
                            self.bert_config.k, offset=inp.doc_span[0],
                            similarity=self.bert_config.similarity)

    def tcl_forward(self, last: torch.Tensor, inputs: Sequence[EncoderInput],
                    selections: Sequence[TokenSelection] | None = None) -> torch.Tensor:
        """TCL output at the [CLS] row for each sequence in the batch."""
        if selections is None:
            selections = [self.select(inp) for inp in inputs]
        rows = []
        for inp, sel in zip(inputs, selections):
            rows.append([0, *range(*inp.query_span), inp.sep_index, *sel.positions])
        width = max(len(r) for r in rows)
        gather = torch.zeros(len(rows), width, dtype=torch.long)
        mask = torch.zeros(len(rows), width, dtype=torch.bool)
        for i, r in enumerate(rows):
            gather[i, :len(r)] = torch.tensor(r)
            mask[i, :len(r)] = True
        h_t = torch.gather(last, 1, gather[..., None].expand(-1, -1, last.size(-1)))
        return self.tcl(h_t, key_mask=mask)[:, 0]

    def score_inputs(self, inputs: Sequence[EncoderInput], use_tcl: bool,
                     alpha: float | None = None, return_parts: bool = False):
        alpha = self.bert_config.alpha if alpha is None else alpha
        ids, mask = pad_batch([list(i.token_ids) for i in inputs], self.vocab.pad_id)
        last = self.encoder(ids, mask).last
        s_base = self.clf_head(last[:, 0]).squeeze(-1)
        if not use_tcl:
            return (s_base, s_base, None) if return_parts else s_base
        s_tcl = self.clf_head(self.tcl_forward(last, inputs)).squeeze(-1)
        s = s_base + alpha * s_tcl
        return (s, s_base, s_tcl) if return_parts else s

    def score_texts(self, query_text: str, doc_texts: Sequence[str], use_tcl: bool | None = None) -> torch.Tensor:
        if use_tcl is None:
            use_tcl = self.bert_config.use_tcl_at_inference
        return self.score_inputs([self.encode(query_text, d) for d in doc_texts], use_tcl)

    def relevance_score(self, query_text: str, doc_text: str, use_tcl: bool | None = None,
                        alpha: float | None = None) -> float:
        if use_tcl is None:
            use_tcl = self.bert_config.use_tcl_at_inference
        with torch.no_grad():
            return float(self.score_inputs([self.encode(query_text, doc_text)], use_tcl, alpha)[0])

    def rank(self, query_text: str, docs: Sequence[tuple[str, str]],
             use_tcl: bool | None = None) -> list[tuple[str, float]]:
        """Score (doc_id, text) pairs; descending score, ties by id."""
        if not docs:
            return []
        with torch.no_grad():
            scores = self.score_texts(query_text, [t for _, t in docs], use_tcl).tolist()
        return sorted(zip([d for d, _ in docs], scores), key=lambda x: (-x[1], x[0]))

    def ranker_config(self) -> dict:
        return asdict(self.bert_config)
