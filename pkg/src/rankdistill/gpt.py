"""Decoder ranker: prompt format, special tokens, ranking layer and joint loss."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .bert import ranknet_loss
from .nn import ModelConfig, Transformer, pad_batch
from .text import Vocabulary, tokenize

log = logging.getLogger(__name__)

RELEVANT, IRRELEVANT, RESPONSE, REASON = "<|Relevant|>", "<|Irrelevant|>", "<|Response|>", "<|Reason|>"
SOURCE_WORDS = {RELEVANT: "relevant", IRRELEVANT: "irrelevant", RESPONSE: "response", REASON: "reason"}
TASKS = ("gen", "clf", "rank")


@dataclass
class GptConfig:
    tasks: tuple[str, ...] = TASKS
    reasoning: bool = True
    ranking_layer: bool = True
    ranking_layer_input: str = "response"
    mask_prompt: bool = False

    def __post_init__(self):
        self.tasks = tuple(t for t in TASKS if t in set(self.tasks))
        if not self.tasks:
            raise ValueError("at least one task is required")
        if self.ranking_layer_input not in ("response", "reason"):
            raise ValueError("ranking_layer_input must be 'response' or 'reason'")
        if self.ranking_layer_input == "reason" and not self.reasoning:
            raise ValueError("the <|Reason|> input needs reasoning=True")


@dataclass(frozen=True)
class SpecialTokens:
    relevant: int
    irrelevant: int
    response: int
    reason: int


@dataclass(frozen=True)
class Markers:
    """Token ids used to lay out a prompt (special tokens or plain words)."""
    relevant: int
    irrelevant: int
    response: int
    reason: int


@dataclass(frozen=True)
class PromptedExample:
    X: tuple[int, ...]
    response_index: int
    reason_index: int | None = None
    label_target_id: int | None = None
    y: int | None = None
    truncated: bool = False


def word_markers(vocab: Vocabulary) -> Markers:
    ids = [vocab.token_to_id.get(SOURCE_WORDS[t], vocab.unk_id) for t in (RELEVANT, IRRELEVANT, RESPONSE, REASON)]
    return Markers(*ids)


def build_prompt(vocab: Vocabulary, query_text: str, doc_text: str, markers: Markers,
                 label: int | None = None, reasoning: str | None = None,
                 max_len: int | None = None) -> PromptedExample:
    """``query: q document: d`` + response marker [+ label [+ reason marker + reasoning]].

    Without ``label`` the inference form ending at the response marker is built.
    Document tokens are cut first when ``max_len`` is exceeded, then reasoning.
    """
    q = tokenize(query_text, vocab)
    d = tokenize(doc_text, vocab)
    if not q or not d:
        raise ValueError("query and document must be nonempty")
    head = [vocab.token_to_id.get("query", vocab.unk_id)]
    mid = [vocab.token_to_id.get("document", vocab.unk_id)]
    tail: list[int] = []
    r: list[int] = []
    if label is not None:
        tail.append(markers.relevant if label == 1 else markers.irrelevant)
        if reasoning is not None:
            r = tokenize(reasoning, vocab)
            tail.append(markers.reason)
    truncated = False
    if max_len is not None:
        fixed = len(head) + len(q) + len(mid) + 1 + len(tail)
        if fixed + 1 > max_len:
            raise ValueError(f"prompt cannot fit max_len={max_len}")
        over = fixed + len(d) + len(r) - max_len
        if over > 0:
            truncated = True
            cut = min(over, len(d) - 1)
            d = d[:len(d) - cut]
            over -= cut
            r = r[:max(0, len(r) - over)]
    x = head + q + mid + d + [markers.response]
    resp = len(x) - 1
    reason_index = None
    x += tail
    if label is not None and reasoning is not None:
        reason_index = len(x) - 1
        x += r
    target = None if label is None else tail[0]
    return PromptedExample(tuple(x), resp, reason_index, target, label, truncated)


def min_max_scale(scores: torch.Tensor) -> torch.Tensor:
    lo, hi = scores.min(), scores.max()
    if hi - lo <= 0:
        return torch.full_like(scores, 0.5) + 0.0 * scores
    return (scores - lo) / (hi - lo)


@dataclass
class JointLoss:
    total: torch.Tensor
    parts: dict[str, torch.Tensor] = field(default_factory=dict)

    def items(self) -> dict[str, float]:
        return {"loss": self.total.item(), **{k: v.item() for k, v in self.parts.items()}}


class RRAGpt(nn.Module):
    kind = "rra_gpt"

    def __init__(self, vocab: Vocabulary, config: ModelConfig, gpt_config: GptConfig | None = None):
        super().__init__()
        if config.vocab_size != len(vocab):
            raise ValueError("config.vocab_size must match the vocabulary")
        # private copy: special-token registration extends it
        self.vocab = Vocabulary.from_dict(vocab.to_dict())
        self.config = config
        self.gpt_config = gpt_config or GptConfig()
        self.decoder = Transformer(config, causal=True)
        self.lm_head = nn.Linear(config.hidden_size, config.vocab_size)
        self.ranking_layer = nn.Linear(config.hidden_size, 1)
        self.special: SpecialTokens | None = None
        self.generation_steps = 0

    # --- vocabulary -----------------------------------------------------------
    @property
    def markers(self) -> Markers:
        if self.special is None:
            return word_markers(self.vocab)
        s = self.special
        return Markers(s.relevant, s.irrelevant, s.response, s.reason)

    def register_special_tokens(self) -> SpecialTokens:
        return register_special_tokens(self)

    # --- forward pieces -------------------------------------------------------
    def forward_examples(self, examples: Sequence[PromptedExample]):
        ids, mask = pad_batch([list(e.X) for e in examples], self.vocab.pad_id)
        last = self.decoder(ids, mask).last
        return ids, mask, last

    def ranking_scores(self, last: torch.Tensor, examples: Sequence[PromptedExample]) -> torch.Tensor:
        idx = torch.tensor([self._rank_index(e) for e in examples])
        h = last[torch.arange(len(examples)), idx]
        return self.ranking_layer(h).squeeze(-1)

    def _rank_index(self, e: PromptedExample) -> int:
        if self.gpt_config.ranking_layer_input == "reason":
            if e.reason_index is None:
                raise ValueError("example has no <|Reason|> position")
            return e.reason_index
        return e.response_index

    def label_logits(self, last: torch.Tensor, examples: Sequence[PromptedExample]) -> torch.Tensor:
        """(batch, 2) logits of [relevant, irrelevant] at the response position."""
        m = self.markers
        idx = torch.tensor([e.response_index for e in examples])
        logits = self.lm_head(last[torch.arange(len(examples)), idx])
        return logits[:, [m.relevant, m.irrelevant]]

    def classification(self, last, examples) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-example BCE over the two label logits and the predicted class."""
        logp = F.log_softmax(self.label_logits(last, examples), dim=-1)
        y = torch.tensor([e.y for e in examples], dtype=last.dtype)
        loss = -(y * logp[:, 0] + (1 - y) * logp[:, 1])
        return loss, (logp[:, 0] > logp[:, 1]).long()

    def generation(self, ids, mask, last, examples) -> torch.Tensor:
        """Per-example mean next-token cross-entropy over positions 2..len(X)."""
        logits = self.lm_head(last[:, :-1])
        target = ids[:, 1:]
        valid = mask[:, 1:].clone()
        if self.gpt_config.mask_prompt:
            for i, e in enumerate(examples):
                valid[i, :e.response_index] = False
        ce = F.cross_entropy(logits.reshape(-1, logits.size(-1)), target.reshape(-1),
                             reduction="none").view_as(target)
        ce = ce * valid
        return ce.sum(1) / valid.sum(1).clamp(min=1)

    def relevance_from_labels(self, last, examples) -> torch.Tensor:
        p = F.softmax(self.label_logits(last, examples), dim=-1)
        return p[:, 0] - p[:, 1]

    # --- training objective -----------------------------------------------------
    def training_examples(self, query_text: str, docs: Sequence[tuple[str, int, str | None]]) -> list[PromptedExample]:
        """``docs`` holds (text, binary label, reasoning) triples."""
        use_reason = self.gpt_config.reasoning
        return [build_prompt(self.vocab, query_text, text, self.markers, label=y,
                             reasoning=(r or "") if use_reason else None,
                             max_len=self.config.max_seq_len)
                for text, y, r in docs]

    def joint_loss(self, examples: Sequence[PromptedExample], graded: Sequence[float],
                   tasks: Sequence[str] | None = None) -> JointLoss:
        tasks = self.gpt_config.tasks if tasks is None else tuple(tasks)
        ids, mask, last = self.forward_examples(examples)
        parts: dict[str, torch.Tensor] = {}
        if "gen" in tasks:
            parts["gen"] = self.generation(ids, mask, last, examples).mean()
        if "clf" in tasks:
            parts["clf"] = self.classification(last, examples)[0].mean()
        if "rank" in tasks:
            if len(examples) < 2:
                warnings.warn("rank term needs >= 2 documents; skipped", stacklevel=2)
            else:
                s = (self.ranking_scores(last, examples) if self.gpt_config.ranking_layer
                     else self.relevance_from_labels(last, examples))
                parts["rank"] = ranknet_loss(min_max_scale(s), list(graded))
        if not parts:
            raise ValueError("no loss term could be computed")
        total = sum(parts.values())
        return JointLoss(total, parts)

    # --- inference ------------------------------------------------------------
    def greedy_label(self, examples: Sequence[PromptedExample]) -> list[int]:
        """One autoregressive step: the predicted label token per example."""
        _, _, last = self.forward_examples(examples)
        self.generation_steps += len(examples)
        p = self.label_logits(last, examples)
        m = self.markers
        return [m.relevant if a > b else m.irrelevant for a, b in p.tolist()]

    def score_texts(self, query_text: str, doc_texts: Sequence[str]) -> torch.Tensor:
        m = self.markers
        examples = [build_prompt(self.vocab, query_text, t, m, max_len=self.config.max_seq_len)
                    for t in doc_texts]
        if not self.gpt_config.ranking_layer:
            _, _, last = self.forward_examples(examples)
            return self.relevance_from_labels(last, examples)
        if self.gpt_config.ranking_layer_input == "reason":
            labels = self.greedy_label(examples)
            examples = [PromptedExample(e.X + (lab, m.reason), e.response_index, len(e.X) + 1)
                        for e, lab in zip(examples, labels)]
        _, _, last = self.forward_examples(examples)
        return self.ranking_scores(last, examples)

    def rank(self, query_text: str, docs: Sequence[tuple[str, str]]) -> list[tuple[str, float]]:
        if not docs:
            return []
        with torch.no_grad():
            scores = self.score_texts(query_text, [t for _, t in docs]).tolist()
        return sorted(zip([d for d, _ in docs], scores), key=lambda x: (-x[1], x[0]))

    def ranker_config(self) -> dict:
        cfg = asdict(self.gpt_config)
        cfg["tasks"] = list(cfg["tasks"])
        cfg["special_registered"] = self.special is not None
        return cfg


def register_special_tokens(model: RRAGpt) -> SpecialTokens:
    """Append the four decoder tokens, copying embedding and LM-head rows
    from their source words (mean over pieces; ``<unk>`` row if missing)."""
    if model.special is not None:
        return model.special
    vocab = model.vocab
    emb = model.decoder.word_embeddings
    head = model.lm_head
    new_ids, src_rows = [], []
    for tok in (RELEVANT, IRRELEVANT, RESPONSE, REASON):
        word = SOURCE_WORDS[tok]
        pieces = tokenize(word, vocab)
        if not pieces or pieces == [vocab.unk_id]:
            log.warning("source word %r not in vocabulary; %s starts from <unk>", word, tok)
            warnings.warn(f"{word!r} is out of vocabulary; using <unk> row for {tok}", stacklevel=2)
            pieces = [vocab.unk_id]
        src_rows.append(pieces)
        new_ids.append(vocab.add_special(tok))
    n_old = emb.num_embeddings
    n_new = len(vocab)
    with torch.no_grad():
        def rows(weight, pieces):
            return weight[pieces].mean(0) if len(pieces) > 1 else weight[pieces[0]].clone()

        new_emb = nn.Embedding(n_new, emb.embedding_dim, dtype=emb.weight.dtype)
        new_emb.weight[:n_old] = emb.weight
        new_head = nn.Linear(head.in_features, n_new, dtype=head.weight.dtype)
        new_head.weight[:n_old] = head.weight
        new_head.bias[:n_old] = head.bias
        for tid, pieces in zip(new_ids, src_rows):
            new_emb.weight[tid] = rows(emb.weight, pieces)
            new_head.weight[tid] = rows(head.weight, pieces)
            new_head.bias[tid] = rows(head.bias, pieces)
    model.decoder.word_embeddings = new_emb
    model.lm_head = new_head
    model.config.vocab_size = n_new
    model.decoder.config.vocab_size = n_new
    model.special = SpecialTokens(*new_ids)
    return model.special
