"""Small causal language model conditioned on a visual prefix, plus its vocabulary."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Mlp, Module, MultiHeadAttention, make_rng, param
from .tensor import Tensor

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
_PUNCT = re.compile(r"[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[: len(SPECIALS)] != list(SPECIALS):
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    pad = property(lambda self: 0)
    bos = property(lambda self: 1)
    eos = property(lambda self: 2)
    unk = property(lambda self: 3)

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, captions: Iterable[str]) -> "Vocab":
        words = sorted({w for c in captions for w in tokenize(c)} - set(SPECIALS))
        return cls(list(SPECIALS) + words)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, self.unk) for w in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i not in (self.pad, self.bos, self.eos))

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls([ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln])


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a common length; returns (ids [B, L], valid [B, L])."""
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), pad, dtype=np.int64)
    valid = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        valid[i, : len(s)] = True
    return ids, valid


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int = 64
    dim: int = 64
    depth: int = 2
    heads: int = 4
    max_len: int = 24
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")


def prefix_causal_mask(n_prefix: int, n_text: int) -> np.ndarray:
    """Additive [P+L, P+L] mask: prefix rows see the prefix; text rows see the prefix and earlier text."""
    n = n_prefix + n_text
    allowed = np.zeros((n, n), dtype=bool)
    allowed[:, :n_prefix] = True
    allowed[n_prefix:, n_prefix:] = np.tril(np.ones((n_text, n_text), dtype=bool))
    return np.where(allowed, 0.0, -1e9)


class DecoderBlock(Module):
    def __init__(self, rng, cfg: DecoderConfig, trainable: bool):
        self.norm1 = LayerNorm(cfg.dim, trainable)
        self.attn = MultiHeadAttention(rng, cfg.dim, cfg.heads, trainable)
        self.norm2 = LayerNorm(cfg.dim, trainable)
        self.mlp = Mlp(rng, cfg.dim, int(cfg.dim * cfg.mlp_ratio), trainable)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        x = T.add(x, self.attn(self.norm1(x), mask=mask))
        return T.add(x, self.mlp(self.norm2(x)))


class Decoder(Module):
    """Frozen stand-in for the language model. Adapters may be attached to its maps."""

    def __init__(self, cfg: DecoderConfig, n_prefix: int, seed: int = 2, trainable: bool = False):
        rng = make_rng(seed)
        self._cfg = cfg
        self._n_prefix = n_prefix
        self.tok_embed = param(rng.normal(0.0, 1.0, (cfg.vocab_size, cfg.dim)), trainable)
        self.pos = param(rng.normal(0.0, 0.1, (n_prefix + cfg.max_len + 1, cfg.dim)), trainable)
        self.blocks = [DecoderBlock(rng, cfg, trainable) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim, trainable)
        self.lm_head = Linear(rng, cfg.dim, cfg.vocab_size, bias=False, trainable=trainable)

    @property
    def cfg(self) -> DecoderConfig:
        return self._cfg

    def logits(self, prefix: Tensor, tokens: np.ndarray) -> Tensor:
        """Next-token logits [B, L, V] for every text position given prefix [B, P, d_L]."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if prefix.ndim == 2:
            prefix = T.reshape(prefix, (1,) + prefix.shape)
        b, L = tokens.shape
        p = prefix.shape[1]
        if L > self.cfg.max_len + 1:
            raise ValueError(f"sequence length {L} exceeds max_len {self.cfg.max_len}")
        x = T.concat([prefix, T.embedding(self.tok_embed, tokens)], axis=1)
        x = T.add(x, T.expand(self.pos[: p + L], x.shape))
        mask = prefix_causal_mask(p, L)
        for blk in self.blocks:
            x = blk(x, mask)
        return self.lm_head(self.norm(x[:, p:]))

    def decode_step(self, prefix: Tensor, tokens: Sequence[int]) -> Tensor:
        """Logits [V] for the token following ``tokens`` (which should start with BOS)."""
        return self.logits(prefix, np.asarray(tokens)[None])[0, -1]

    def generate(self, prefix: Tensor, bos: int, eos: int, max_len: int | None = None) -> list[list[int]]:
        """Greedy decoding for a batch of prefixes; ties go to the lowest token id."""
        max_len = max_len or self.cfg.max_len
        if prefix.ndim == 2:
            prefix = T.reshape(prefix, (1,) + prefix.shape)
        b = prefix.shape[0]
        seqs = np.full((b, 1), bos, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        out: list[list[int]] = [[] for _ in range(b)]
        with T.no_grad():
            for _ in range(max_len):
                step = self.logits(prefix, seqs).data[:, -1]
                nxt = np.argmax(step, axis=-1)
                for i in range(b):
                    if not done[i]:
                        if nxt[i] == eos:
                            done[i] = True
                        else:
                            out[i].append(int(nxt[i]))
                if done.all():
                    break
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        return out


class PrefixProjector(Module):
    """Linear map from query width to the language-model width (LoRA-adaptable)."""

    def __init__(self, rng, d_in: int, d_out: int, trainable: bool = False):
        self.proj = Linear(rng, d_in, d_out, bias=False, trainable=trainable)

    def __call__(self, z: Tensor) -> Tensor:
        return self.proj(z)


def project_prefix(z_out: Tensor, projector: PrefixProjector) -> Tensor:
    return projector(z_out)
