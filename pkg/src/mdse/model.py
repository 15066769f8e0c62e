"""The full captioning model: frozen encoder, fusion, gated Q-Former, prefix projector, frozen decoder."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .decoder import Decoder, DecoderConfig, PrefixProjector, Vocab, pad_batch
from .encoder import Fusion, VisionEncoder, VitConfig
from .lora import LoraTarget, ParamLayout, count_trainable
from .nn import Linear, Module, make_rng
from .objectives import LossWeights, itc_loss, itg_loss, itm_loss, itm_pairing, similarity_matrix, total_loss
from .qformer import QFormer, QFormerConfig
from .tensor import Tensor

BASE_PLAN = (
    LoraTarget("qformer.attn", 8, 16.0),
    LoraTarget("qformer.mlp", 8, 16.0),
    LoraTarget("llm_proj", 4, 8.0),
)
# The desk decoder is randomly initialised rather than pretrained, so it also
# gets adapters (its base weights stay frozen).
DEFAULT_LORA_PLAN = BASE_PLAN + (
    LoraTarget("decoder.attn", 8, 16.0),
    LoraTarget("decoder.mlp", 8, 16.0),
    LoraTarget("llm_head", 8, 16.0),
)

ABLATIONS = ("no_dual", "no_sam", "no_context_gate", "no_fe")


@dataclass(frozen=True)
class Ablation:
    no_fe: bool = False
    no_sam: bool = False
    no_dual: bool = False
    no_context_gate: bool = False

    @classmethod
    def only(cls, name: str | None) -> "Ablation":
        if name in (None, "full"):
            return cls()
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")
        return cls(**{name: True})

    @property
    def name(self) -> str:
        on = [a for a in ABLATIONS if getattr(self, a)]
        return "+".join(on) if on else "full"


@dataclass(frozen=True)
class ModelConfig:
    vit: VitConfig = field(default_factory=VitConfig)
    qformer: QFormerConfig = field(default_factory=QFormerConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    fusion_dim: int = 64
    region_pooling: str = "mean"
    lora_plan: tuple[LoraTarget, ...] = DEFAULT_LORA_PLAN
    lora_dropout: float = 0.05
    seed: int = 0
    train_encoder: bool = False
    train_qformer_base: bool = False
    ablation: Ablation = field(default_factory=Ablation)


@dataclass
class VisualBatch:
    """Encoder outputs for a batch: global tokens and pooled region tokens, both [B, T, D]."""

    e_g: Tensor
    e_s: Tensor


@dataclass
class TextBatch:
    qf_ids: np.ndarray  # [B, L] bos + words, for the Q-Former text path
    qf_valid: np.ndarray
    dec_in: np.ndarray  # [B, L] bos + words
    dec_out: np.ndarray  # [B, L] words + eos
    dec_valid: np.ndarray

    @classmethod
    def from_captions(cls, captions: list[str], vocab: Vocab, max_len: int) -> "TextBatch":
        seqs = [vocab.encode(c)[:max_len] for c in captions]
        qf_ids, qf_valid = pad_batch([[vocab.bos] + s for s in seqs], vocab.pad)
        dec_out, dec_valid = pad_batch([s + [vocab.eos] for s in seqs], vocab.pad)
        return cls(qf_ids, qf_valid, qf_ids.copy(), dec_out, dec_valid)

    def take(self, idx: np.ndarray) -> "TextBatch":
        return TextBatch(self.qf_ids[idx], self.qf_valid[idx], self.dec_in[idx], self.dec_out[idx],
                         self.dec_valid[idx])


@dataclass
class LossParts:
    itc: Tensor
    itm: Tensor
    itg: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("itc", "itm", "itg", "total")}


class MDSE(Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocab):
        if cfg.decoder.vocab_size != len(vocab):
            cfg = replace(cfg, decoder=replace(cfg.decoder, vocab_size=len(vocab)))
        self._cfg = cfg
        self._vocab = vocab
        s = cfg.seed
        self.encoder = VisionEncoder(cfg.vit, seed=s * 7919 + 11, trainable=cfg.train_encoder)
        rng = make_rng(s * 7919 + 13)
        self.fusion = None if cfg.ablation.no_dual else Fusion(rng, cfg.vit.dim, cfg.fusion_dim)
        vis_dim = cfg.vit.dim if cfg.ablation.no_dual else cfg.fusion_dim
        self.qformer = QFormer(cfg.qformer, vis_dim, len(vocab), seed=s * 7919 + 17,
                               base_trainable=cfg.train_qformer_base)
        self.qformer.gated = not cfg.ablation.no_context_gate
        self.projector = PrefixProjector(rng, cfg.qformer.dim, cfg.decoder.dim)
        self.decoder = Decoder(cfg.decoder, cfg.qformer.num_queries, seed=s * 7919 + 19)
        self.apply_lora_plan(cfg.lora_plan, cfg.lora_dropout, make_rng(s * 7919 + 23))

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    @property
    def vocab(self) -> Vocab:
        return self._vocab

    # ------------------------------------------------------------ LoRA
    def lora_groups(self) -> dict[str, list[Linear]]:
        dec_attn = [p for b in self.decoder.blocks for p in b.attn.projections()]
        dec_mlp = [m for b in self.decoder.blocks for m in (b.mlp.fc1, b.mlp.fc2)]
        return {
            "qformer.attn": self.qformer.projections("attn"),
            "qformer.mlp": self.qformer.projections("mlp"),
            "llm_proj": [self.projector.proj],
            "llm_head": [self.decoder.lm_head],
            "decoder.attn": dec_attn,
            "decoder.mlp": dec_mlp,
        }

    def apply_lora_plan(self, plan, dropout: float, rng) -> None:
        groups = self.lora_groups()
        for entry in plan:
            if entry.target not in groups:
                raise KeyError(f"unknown LoRA target {entry.target!r}; known: {sorted(groups)}")
            for lin in groups[entry.target]:
                lin.attach_lora(rng, entry.rank, entry.alpha, dropout)

    def layout(self) -> ParamLayout:
        groups = {k: [(l.d_in, l.d_out) for l in v] for k, v in self.lora_groups().items()}
        qf = self.qformer
        dense = {
            "queries": qf.queries.size,
            "itm_head": qf.itm_head.weight.size + qf.itm_head.bias.size,
            "vision_proj": qf.vision_proj.weight.size + qf.vision_proj.bias.size,
            "f_ctx": qf.ctx_table.size + qf.ctx_proj.size,
            "gates": sum(g.weight.size + g.bias.size for b in qf.blocks if b.has_cross for g in (b.gate_k, b.gate_v)),
            "text_embed": qf.text_embed.size + qf.text_pos.size,
            "fusion": self.fusion.weight.size if self.fusion is not None else 0,
        }
        return ParamLayout(groups, dense)

    def count_trainable(self) -> int:
        """Closed-form count from the layout; equals the number of requires_grad scalars."""
        layout = self.layout()
        return count_trainable(layout, list(self.cfg.lora_plan), list(layout.dense))

    def frozen_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if not p.requires_grad]

    # ------------------------------------------------------------ forward pieces
    def encode_images(self, images: np.ndarray, region_images: list[list[np.ndarray]]) -> VisualBatch:
        """Run the shared encoder on each image and on its masked copies (mean/max pooled)."""
        b = len(images)
        e_g = self.encoder(np.asarray(images))
        per_region = []
        for regions in region_images:
            if not regions or self.cfg.ablation.no_sam:
                per_region.append(None)
                continue
            enc = self.encoder(np.stack(regions))
            pooled = T.mean(enc, axis=0) if self.cfg.region_pooling == "mean" else T.max(enc, axis=0)
            per_region.append(pooled)
        zeros = Tensor(np.zeros(e_g.shape[1:]))
        rows = [T.reshape(r if r is not None else zeros, (1,) + e_g.shape[1:]) for r in per_region]
        e_s = T.concat(rows, axis=0) if b else zeros
        return VisualBatch(e_g, e_s)

    def fused(self, vis: VisualBatch) -> Tensor:
        if self.fusion is None:
            return vis.e_g
        return self.fusion(vis.e_g, vis.e_s)

    def visual_tokens(self, vis: VisualBatch) -> Tensor:
        return self.qformer.visual_input(self.fused(vis))

    def query_outputs(self, vis: VisualBatch, ctx_ids) -> Tensor:
        return self.qformer.image_queries(self.visual_tokens(vis), ctx_ids)

    def losses(self, vis: VisualBatch, ctx_ids, captions: list[str], weights: LossWeights) -> LossParts:
        vocab = self.vocab
        text = TextBatch.from_captions(captions, vocab, self.cfg.decoder.max_len - 1)
        visual = self.visual_tokens(vis)
        z = self.qformer.image_queries(visual, ctx_ids)
        f_t = self.qformer.text_features(text.qf_ids, text.qf_valid)
        l_itc = itc_loss(z, f_t, weights.tau, weights.symmetric_itc)
        partner, labels = itm_pairing(captions)
        other = text.take(partner)
        _, itm_logits = self.qformer.joint(visual, ctx_ids, other.qf_ids, other.qf_valid)
        l_itm = itm_loss(itm_logits, labels)
        prefix = self.projector(z)
        logits = self.decoder.logits(prefix, text.dec_in)
        l_itg = itg_loss(logits, text.dec_out, text.dec_valid)
        return LossParts(l_itc, l_itm, l_itg, total_loss(l_itc, l_itm, l_itg, weights))

    def similarity(self, vis: VisualBatch, ctx_ids, captions: list[str]) -> np.ndarray:
        """ITC cosine similarity of every image (row) against every caption (column)."""
        text = TextBatch.from_captions(captions, self.vocab, self.cfg.decoder.max_len - 1)
        with T.no_grad():
            z = self.query_outputs(vis, ctx_ids)
            f_t = self.qformer.text_features(text.qf_ids, text.qf_valid)
            return similarity_matrix(z, f_t).data

    def generate(self, vis: VisualBatch, ctx_ids, max_len: int | None = None) -> list[str]:
        with T.no_grad():
            z = self.query_outputs(vis, ctx_ids)
            prefix = self.projector(z)
            ids = self.decoder.generate(prefix, self.vocab.bos, self.vocab.eos, max_len)
        return [self.vocab.decode(s) for s in ids]
