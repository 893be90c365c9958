"""Minimal pre-LN transformer (encoder or causal decoder) and a gradient checker."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch
from torch import nn


@dataclass
class ModelConfig:
    vocab_size: int
    hidden_size: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 96
    ffn_multiplier: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("vocab_size", "hidden_size", "n_layers", "n_heads", "max_seq_len", "ffn_multiplier"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hidden_size % self.n_heads:
            raise ValueError("hidden_size must be divisible by n_heads")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product self-attention with an output projection.

    Accepts ``(m, d)`` or ``(batch, m, d)``. ``key_mask`` marks real
    (non-padding) positions with True.
    """

    def __init__(self, hidden_size: int, n_heads: int):
        super().__init__()
        if hidden_size % n_heads:
            raise ValueError(f"hidden size {hidden_size} not divisible by {n_heads} heads")
        self.hidden_size, self.n_heads = hidden_size, n_heads
        self.head_dim = hidden_size // n_heads
        self.q_proj = nn.Linear(hidden_size, hidden_size)
        self.k_proj = nn.Linear(hidden_size, hidden_size)
        self.v_proj = nn.Linear(hidden_size, hidden_size)
        self.out_proj = nn.Linear(hidden_size, hidden_size)
        self.last_weights: torch.Tensor | None = None
        self.keep_weights = False

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None,
                causal: bool = False) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
            key_mask = None if key_mask is None else key_mask.unsqueeze(0)
        if x.size(-1) != self.hidden_size:
            raise ValueError(f"expected last dim {self.hidden_size}, got {x.size(-1)}")
        b, m, _ = x.shape

        def heads(t):
            return t.view(b, m, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(self.q_proj(x)), heads(self.k_proj(x)), heads(self.v_proj(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        allowed = torch.ones(m, m, dtype=torch.bool, device=x.device)
        if causal:
            allowed = torch.tril(allowed)
        allowed = allowed.expand(b, 1, m, m)
        if key_mask is not None:
            allowed = allowed & key_mask[:, None, None, :].bool()
        scores = scores.masked_fill(~allowed, torch.finfo(scores.dtype).min)
        weights = torch.softmax(scores, dim=-1)
        if self.keep_weights:
            self.last_weights = weights.detach()
        out = (weights @ v).transpose(1, 2).reshape(b, m, self.hidden_size)
        out = self.out_proj(out)
        return out.squeeze(0) if squeeze else out


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.hidden_size
        self.ln1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, config.n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, d * config.ffn_multiplier), nn.GELU(),
                                 nn.Linear(d * config.ffn_multiplier, d))
        self.drop = nn.Dropout(config.dropout)

    def forward(self, x, key_mask=None, causal=False):
        x = x + self.drop(self.attn(self.ln1(x), key_mask=key_mask, causal=causal))
        return x + self.drop(self.ffn(self.ln2(x)))


@dataclass
class HiddenStates:
    """``all`` has shape (n_layers + 1, batch, seq_len, hidden); ``all[-1]`` is ``last``."""
    all: torch.Tensor
    mask: torch.Tensor

    @property
    def last(self) -> torch.Tensor:
        return self.all[-1]


class Transformer(nn.Module):
    def __init__(self, config: ModelConfig, causal: bool = False):
        super().__init__()
        self.config, self.causal = config, causal
        self.word_embeddings = nn.Embedding(config.vocab_size, config.hidden_size)
        self.position_embeddings = nn.Embedding(config.max_seq_len, config.hidden_size)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.final_norm = nn.LayerNorm(config.hidden_size)
        self.drop = nn.Dropout(config.dropout)
        nn.init.normal_(self.word_embeddings.weight, std=0.1)
        nn.init.normal_(self.position_embeddings.weight, std=0.02)

    def embed(self, token_ids: torch.Tensor) -> torch.Tensor:
        """Word embeddings only (no positions)."""
        token_ids = torch.as_tensor(token_ids, dtype=torch.long)
        if token_ids.numel() and (token_ids.min() < 0 or token_ids.max() >= self.word_embeddings.num_embeddings):
            raise IndexError("token id outside the vocabulary")
        return self.word_embeddings(token_ids)

    def forward(self, token_ids: torch.Tensor, key_mask: torch.Tensor | None = None) -> HiddenStates:
        token_ids = torch.as_tensor(token_ids, dtype=torch.long)
        if token_ids.dim() == 1:
            token_ids = token_ids.unsqueeze(0)
            key_mask = None if key_mask is None else key_mask.unsqueeze(0)
        b, length = token_ids.shape
        if length > self.config.max_seq_len:
            raise ValueError(f"sequence length {length} exceeds max_seq_len {self.config.max_seq_len}")
        if key_mask is None:
            key_mask = torch.ones(b, length, dtype=torch.bool)
        pos = torch.arange(length)
        x = self.drop(self.embed(token_ids) + self.position_embeddings(pos)[None])
        layers = [x]
        for block in self.blocks:
            x = block(x, key_mask=key_mask, causal=self.causal)
            layers.append(x)
        layers[-1] = self.final_norm(layers[-1])
        return HiddenStates(torch.stack(layers), key_mask)


def pad_batch(seqs: list[list[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    mask = torch.zeros(len(seqs), width, dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = torch.tensor(s, dtype=torch.long)
        mask[i, :len(s)] = True
    return ids, mask


def tcl_head_count(hidden_size: int, requested: int = 8) -> int:
    """Largest head count <= ``requested`` dividing ``hidden_size``."""
    for h in range(min(requested, hidden_size), 0, -1):
        if hidden_size % h == 0:
            return h
    return 1


# --- gradient checking ----------------------------------------------------------

@dataclass
class GradCheckReport:
    checked: int
    max_error: float
    tolerance: float
    violations: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor],
               eps: float = 1e-5, tolerance: float = 1e-4, samples_per_param: int = 3,
               seed: int = 0) -> GradCheckReport:
    """Compare autograd gradients with central differences on sampled entries.

    Error is ``|analytic - numeric| / max(1, |numeric|)``. Run in float64.
    """
    params = dict(params)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    rng = np.random.default_rng(seed)
    violations, max_err, checked = [], 0.0, 0
    with torch.no_grad():
        for (name, p), g in zip(params.items(), grads):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            picks = rng.choice(flat.numel(), size=min(samples_per_param, flat.numel()), replace=False)
            for idx in picks:
                idx = int(idx)
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = loss_fn().item()
                flat[idx] = orig - eps
                down = loss_fn().item()
                flat[idx] = orig
                numeric = (up - down) / (2 * eps)
                analytic = gflat[idx].item()
                err = abs(analytic - numeric) / max(1.0, abs(numeric))
                max_err = max(max_err, err)
                checked += 1
                if not err < tolerance:
                    violations.append({"param": name, "index": idx, "analytic": analytic,
                                       "numeric": numeric, "error": err})
    return GradCheckReport(checked, max_err, tolerance, violations)


def assert_finite(module: nn.Module) -> None:
    for name, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise FloatingPointError(f"parameter {name} is not finite")

