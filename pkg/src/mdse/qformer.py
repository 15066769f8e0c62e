"""Query transformer with context-gated cross-attention and an image-text matching head.

Learnable queries attend to each other (and to text tokens, when given) through
shared self-attention. Every ``cross_attn_every``-th block also lets the query
rows attend to the visual tokens, whose keys and values are first shifted by a
sigmoid gate conditioned on a projected context vector:

    K' = E + sigmoid(W_g [E ; C'] + b_g),   V' = E + sigmoid(W_g^V [E ; C'] + b_g^V)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Mlp, Module, MultiHeadAttention, key_padding_mask, make_rng, param, \
    split_heads
from .tensor import Tensor


@dataclass(frozen=True)
class QFormerConfig:
    num_queries: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    cross_attn_every: int = 2
    context_vocab: int = 8
    context_dim: int = 16
    mlp_ratio: float = 4.0
    max_text_len: int = 24

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.cross_attn_every < 1:
            raise ValueError("cross_attn_every must be >= 1")

    def has_cross(self, block: int) -> bool:
        return block % self.cross_attn_every == 0


@dataclass(frozen=True)
class ContextSignal:
    category_id: int

    def check(self, vocab: int) -> None:
        if not 0 <= self.category_id < vocab:
            raise ValueError(f"context id {self.category_id} outside [0, {vocab})")


class Gate(Module):
    """``out_t = E_t + sigmoid(W [E_t ; C'] + b)`` for every token row t."""

    def __init__(self, rng, dim: int, trainable: bool = True):
        self.weight = param(rng.normal(0.0, 0.02, (dim, 2 * dim)), trainable)
        self.bias = param(np.zeros(dim), trainable)

    def __call__(self, e: Tensor, c: Tensor) -> Tensor:
        return gate_fuse(e, c, self.weight, self.bias)


def gate_fuse(e: Tensor, c: Tensor, w_g: Tensor, b_g: Tensor | None = None) -> Tensor:
    """Gated context correction; ``e`` is [..., T, d] and ``c`` is [..., d]."""
    if c.shape[-1] != e.shape[-1] or c.shape[:-1] != e.shape[:-2]:
        raise T.ShapeError(f"context {c.shape} does not match tokens {e.shape}")
    n_tok = e.shape[-2]
    c_rows = T.permute(T.expand(c, (n_tok,) + c.shape), tuple(range(1, c.ndim)) + (0, c.ndim)) \
        if c.ndim > 1 else T.expand(c, (n_tok,) + c.shape)
    pre = T.linear(T.concat([e, c_rows], axis=-1), w_g, b_g)
    return T.add(e, T.sigmoid(pre))


def cross_attention(attn: MultiHeadAttention, queries: Tensor, keys: Tensor, values: Tensor) -> Tensor:
    """Multi-head ``softmax(Q K'^T / sqrt(d_k)) V'`` followed by the output projection."""
    return attn(queries, kv=keys, value=values)


def attention_weights(attn: MultiHeadAttention, queries: Tensor, keys: Tensor) -> np.ndarray:
    """Per-head attention probabilities [B, H, N, T] (diagnostic, no grad)."""
    with T.no_grad():
        q = split_heads(attn.q(queries), attn.heads)
        k = split_heads(attn.k(keys), attn.heads)
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(q.shape[-1]))
        return T.softmax(scores).data


class QFormerBlock(Module):
    def __init__(self, rng, cfg: QFormerConfig, cross: bool, base_trainable: bool):
        d = cfg.dim
        hidden = int(d * cfg.mlp_ratio)
        self.norm1 = LayerNorm(d, base_trainable)
        self.self_attn = MultiHeadAttention(rng, d, cfg.heads, base_trainable)
        if cross:
            self.norm_c = LayerNorm(d, base_trainable)
            self.cross_attn = MultiHeadAttention(rng, d, cfg.heads, base_trainable)
            self.gate_k = Gate(rng, d)
            self.gate_v = Gate(rng, d)
        else:
            self.norm_c = self.cross_attn = self.gate_k = self.gate_v = None
        self.norm2 = LayerNorm(d, base_trainable)
        self.mlp = Mlp(rng, d, hidden, base_trainable)

    @property
    def has_cross(self) -> bool:
        return self.cross_attn is not None

    def __call__(self, x: Tensor, n_query: int, visual: Tensor | None, ctx: Tensor | None,
                 mask: np.ndarray | None, gated: bool = True) -> Tensor:
        x = T.add(x, self.self_attn(self.norm1(x), mask=mask))
        if self.has_cross and visual is not None and n_query > 0:
            if gated:
                k_in, v_in = self.gate_k(visual, ctx), self.gate_v(visual, ctx)
            else:
                k_in = v_in = visual
            if n_query == x.shape[1]:
                x = T.add(x, cross_attention(self.cross_attn, self.norm_c(x), k_in, v_in))
            else:
                xq, xt = x[:, :n_query], x[:, n_query:]
                xq = T.add(xq, cross_attention(self.cross_attn, self.norm_c(xq), k_in, v_in))
                x = T.concat([xq, xt], axis=1)
        return T.add(x, self.mlp(self.norm2(x)))


class QFormer(Module):
    """Queries, shared blocks, context projector ``f_ctx``, visual input projector and ITM head."""

    def __init__(self, cfg: QFormerConfig, vision_dim: int, vocab_size: int, seed: int = 1,
                 base_trainable: bool = False):
        rng = make_rng(seed)
        d = cfg.dim
        self._cfg = cfg
        self.queries = param(rng.normal(0.0, 0.5, (cfg.num_queries, d)))
        self.vision_proj = Linear(rng, vision_dim, d)
        self.ctx_table = param(rng.normal(0.0, 1.0, (cfg.context_vocab, cfg.context_dim)))
        self.ctx_proj = param(rng.normal(0.0, 1.0 / np.sqrt(cfg.context_dim), (d, cfg.context_dim)))
        self.text_embed = param(rng.normal(0.0, 0.5, (vocab_size, d)))
        self.text_pos = param(rng.normal(0.0, 0.1, (cfg.max_text_len, d)))
        self.blocks = [QFormerBlock(rng, cfg, cfg.has_cross(i), base_trainable) for i in range(cfg.depth)]
        self.norm = LayerNorm(d, base_trainable)
        self.itm_head = Linear(rng, d, 2)
        self.gated = True

    @property
    def cfg(self) -> QFormerConfig:
        return self._cfg

    def project_context(self, ctx_ids) -> Tensor:
        """C' = f_ctx(C): category embedding followed by a bias-free linear map to width d."""
        ids = np.atleast_1d(np.asarray(ctx_ids, dtype=np.int64))
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.context_vocab):
            raise ValueError(f"context ids {ids.tolist()} outside [0, {self.cfg.context_vocab})")
        return T.linear(T.embedding(self.ctx_table, ids), self.ctx_proj)

    def visual_input(self, e_f: Tensor) -> Tensor:
        return self.vision_proj(e_f)

    def _expand_queries(self, b: int) -> Tensor:
        return T.expand(self.queries, (b,) + self.queries.shape)

    def _embed_text(self, text_ids: np.ndarray) -> Tensor:
        text_ids = np.asarray(text_ids, dtype=np.int64)
        L = text_ids.shape[1]
        if L > self.cfg.max_text_len:
            raise ValueError(f"text length {L} exceeds max_text_len {self.cfg.max_text_len}")
        tok = T.embedding(self.text_embed, text_ids)
        return T.add(tok, T.expand(self.text_pos[:L], tok.shape))

    def _run(self, x: Tensor, n_query: int, visual: Tensor | None, ctx: Tensor | None,
             mask: np.ndarray | None) -> Tensor:
        for blk in self.blocks:
            x = blk(x, n_query, visual, ctx, mask, gated=self.gated)
        return self.norm(x)

    def image_queries(self, visual: Tensor, ctx_ids) -> Tensor:
        """Query-only pass: [B, T, d] visual tokens -> [B, N, d] query outputs."""
        b = visual.shape[0]
        ctx = self.project_context(ctx_ids) if self.gated else None
        return self._run(self._expand_queries(b), self.cfg.num_queries, visual, ctx, None)

    def text_features(self, text_ids: np.ndarray, valid: np.ndarray) -> Tensor:
        """Text-only pass; returns the class-position output [B, d]."""
        x = self._embed_text(text_ids)
        out = self._run(x, 0, None, None, key_padding_mask(np.asarray(valid, dtype=bool)))
        return out[:, 0]

    def joint(self, visual: Tensor, ctx_ids, text_ids: np.ndarray, valid: np.ndarray) -> tuple[Tensor, Tensor]:
        """Queries and text share self-attention; returns (query outputs, ITM logits [B, 2])."""
        b = visual.shape[0]
        n = self.cfg.num_queries
        ctx = self.project_context(ctx_ids) if self.gated else None
        x = T.concat([self._expand_queries(b), self._embed_text(text_ids)], axis=1)
        keep = np.concatenate([np.ones((b, n), dtype=bool), np.asarray(valid, dtype=bool)], axis=1)
        out = self._run(x, n, visual, ctx, key_padding_mask(keep))
        z = out[:, :n]
        return z, self.itm_head(T.mean(z, axis=1))

    def forward(self, visual: Tensor, ctx_ids, text_ids: np.ndarray | None = None,
                valid: np.ndarray | None = None) -> tuple[Tensor, Tensor | None]:
        """(Z_out, ITM logits); the logits are only produced when text is supplied."""
        if text_ids is None:
            return self.image_queries(visual, ctx_ids), None
        return self.joint(visual, ctx_ids, text_ids, valid)

    def projections(self, kind: str) -> list[Linear]:
        out: list[Linear] = []
        for blk in self.blocks:
            if kind == "attn":
                out += blk.self_attn.projections()
                if blk.has_cross:
                    out += blk.cross_attn.projections()
            elif kind == "mlp":
                out += [blk.mlp.fc1, blk.mlp.fc2]
            else:
                raise ValueError(kind)
        return out
