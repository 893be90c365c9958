"""Dataset split, AdamW loop with step-based validation and early stopping."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .bert import BertConfig, RRABert, ranknet_loss
from .checkpoint import save_checkpoint
from .evaluation import ndcg_at_k
from .gpt import GptConfig, RRAGpt, register_special_tokens
from .labelgen import RankingLabel, mock_reasoning
from .nn import ModelConfig
from .text import Document, Query, Vocabulary

log = logging.getLogger(__name__)

BERT_VALIDATE_EVERY = 300
GPT_VALIDATE_EVERY = 1000


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    validate_every: int = BERT_VALIDATE_EVERY
    patience: int = 5
    split_ratio: float = 0.9
    seed: int = 0
    max_steps: int = 20_000
    scale: float = 1.0
    use_excluded: bool = True
    eval_k: int = 5

    def __post_init__(self):
        if self.learning_rate <= 0 or self.validate_every < 1 or self.max_steps < 1:
            raise ValueError("learning_rate, validate_every and max_steps must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must lie in (0, 1)")

    @property
    def effective_validate_every(self) -> int:
        return max(1, round(self.validate_every * self.scale))

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


@dataclass
class TrainReport:
    steps_to_best: int
    curve: list[tuple[int, float]]
    best_metric: float
    last_step: int
    stopped_early: bool
    best_checkpoint: str | None = None
    losses: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["curve"] = [list(p) for p in self.curve]
        return d


def split_dataset(labels: Sequence[RankingLabel], ratio: float = 0.9,
                  seed: int = 0) -> tuple[list[RankingLabel], list[RankingLabel]]:
    """Query-level seeded shuffle; first floor(ratio * n) go to training."""
    if len(labels) < 10:
        raise ValueError(f"need at least 10 queries to split, got {len(labels)}")
    ordered = sorted(labels, key=lambda lab: lab.query_id)
    perm = np.random.default_rng([seed, 9001]).permutation(len(ordered))
    n_train = math.floor(ratio * len(ordered))
    return [ordered[i] for i in perm[:n_train]], [ordered[i] for i in perm[n_train:]]


# --- model construction -----------------------------------------------------------

def make_bert(vocab: Vocabulary, model_config: ModelConfig | None = None,
              bert_config: BertConfig | None = None, seed: int = 0) -> RRABert:
    model_config = model_config or ModelConfig(vocab_size=len(vocab))
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return RRABert(vocab, model_config, bert_config)


def make_gpt(vocab: Vocabulary, model_config: ModelConfig | None = None,
             gpt_config: GptConfig | None = None, seed: int = 0, special: bool = True) -> RRAGpt:
    model_config = model_config or ModelConfig(vocab_size=len(vocab))
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = RRAGpt(vocab, model_config, gpt_config)
    if special:
        register_special_tokens(model)
    return model


# --- per-query objectives -----------------------------------------------------------

def training_docs(label: RankingLabel, use_excluded: bool = True) -> list[str]:
    return label.ranked + (label.excluded if use_excluded else []) + label.negatives


def query_loss(model: RRABert | RRAGpt, label: RankingLabel, config: TrainConfig):
    """Returns (loss tensor, component dict)."""
    ids = training_docs(label, config.use_excluded)
    graded = [label.graded[i] for i in ids]
    if isinstance(model, RRABert):
        scores = model.score_texts(label.query, [label.documents[i] for i in ids],
                                   use_tcl=model.bert_config.use_tcl)
        loss = ranknet_loss(scores, graded)
        value = loss.item()
        return loss, {"loss": value, "rank": value}
    q = Query(label.query_id, label.query)
    docs = []
    for i in ids:
        text = label.documents[i]
        y = label.binary.get(i, 0)
        r = label.reasoning.get(i) or mock_reasoning(q, Document(i, text), y)
        docs.append((text, y, r))
    jl = model.joint_loss(model.training_examples(label.query, docs), graded)
    return jl.total, jl.items()


def rank_label(model, label: RankingLabel, use_tcl: bool | None = None) -> list[tuple[str, float]]:
    docs = [(i, label.documents[i]) for i in sorted(label.ranked + label.excluded)]
    if isinstance(model, RRABert):
        return model.rank(label.query, docs, use_tcl=use_tcl)
    return model.rank(label.query, docs)


def validate(model, labels: Sequence[RankingLabel], k: int = 5, use_tcl: bool | None = None) -> float:
    """Mean nDCG@k of the inference path against graded labels."""
    was_training = model.training
    model.eval()
    vals = []
    for lab in labels:
        ranked = rank_label(model, lab, use_tcl)
        vals.append(ndcg_at_k([lab.graded[d] for d, _ in ranked], k))
    model.train(was_training)
    return math.fsum(vals) / len(vals) if vals else 0.0


def fit(model: RRABert | RRAGpt, train_set: Sequence[RankingLabel], valid_set: Sequence[RankingLabel],
        config: TrainConfig, out_dir: str | Path | None = None,
        metrics_path: str | Path | None = None) -> TrainReport:
    """Train one query per step; keep the best validation checkpoint."""
    if not train_set:
        raise ValueError("empty training set")
    every = config.effective_validate_every
    torch.manual_seed(config.seed)
    order_rng = np.random.default_rng([config.seed, 4242])
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    metrics_fh = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    step, best, steps_to_best, bad = 0, -math.inf, 0, 0
    best_state = copy.deepcopy(model.state_dict())
    curve: list[tuple[int, float]] = []
    losses: list[dict] = []
    window: list[dict] = []
    stopped = False
    try:
        while step < config.max_steps and not stopped:
            for qi in order_rng.permutation(len(train_set)):
                model.train()
                loss, parts = query_loss(model, train_set[int(qi)], config)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss {loss.item()} at step {step + 1} "
                                        f"(query {train_set[int(qi)].query_id}, parts {parts})")
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                window.append(parts)
                if step % every == 0 or step == config.max_steps:
                    metric = validate(model, valid_set, config.eval_k)
                    curve.append((step, metric))
                    mean_parts = {k: float(np.mean([w[k] for w in window if k in w]))
                                  for k in window[0]} if window else {}
                    window = []
                    record = {"step": step, **mean_parts, f"valid_ndcg@{config.eval_k}": metric}
                    losses.append(record)
                    if metrics_fh:
                        metrics_fh.write(json.dumps(record) + "\n")
                    if metric > best:
                        best, steps_to_best, bad = metric, step, 0
                        best_state = copy.deepcopy(model.state_dict())
                    else:
                        bad += 1
                        if bad >= config.patience:
                            stopped = True
                            break
                if step >= config.max_steps:
                    break
    finally:
        if metrics_fh:
            metrics_fh.close()
    model.load_state_dict(best_state)
    model.eval()
    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = str(out / "best.ckpt")
        save_checkpoint(model, ckpt, extra={"steps_to_best": steps_to_best, "best_metric": best})
    return TrainReport(steps_to_best, curve, best, step, stopped, ckpt, losses)


def train(model: RRABert | RRAGpt, dataset: Sequence[RankingLabel], config: TrainConfig,
          out_dir: str | Path | None = None, metrics_path: str | Path | None = None) -> TrainReport:
    train_set, valid_set = split_dataset(dataset, config.split_ratio, config.seed)
    return fit(model, train_set, valid_set, config, out_dir, metrics_path)
