"""Low-rank adapters for frozen linear maps, and trainable-parameter accounting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class LoraAdapter:
    """Update ``(alpha / rank) * A @ B`` added to a frozen weight ``W`` of shape [d_out, d_in].

    ``B`` starts at zero so the adapted map equals the base map exactly until
    training moves it.
    """

    A: Tensor  # [d_out, r]
    B: Tensor  # [r, d_in]
    rank: int
    alpha: float
    dropout: float = 0.0
    rng: np.random.Generator | None = None

    @classmethod
    def create(cls, rng: np.random.Generator, d_in: int, d_out: int, rank: int, alpha: float,
               dropout: float = 0.0, init_std: float = 0.02) -> "LoraAdapter":
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        if 2 * rank > min(d_in, d_out):
            raise ValueError(f"LoRA rank {rank} too large for a {d_out}x{d_in} map (need r <= min/2)")
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"LoRA dropout must be in [0, 1), got {dropout}")
        A = Tensor(rng.normal(0.0, init_std, (d_out, rank)), requires_grad=True)
        B = Tensor(np.zeros((rank, d_in)), requires_grad=True)
        seed = int(rng.integers(0, 2**63 - 1))
        return cls(A, B, rank, float(alpha), dropout, np.random.Generator(np.random.PCG64(seed)))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def d_in(self) -> int:
        return self.B.shape[1]

    @property
    def d_out(self) -> int:
        return self.A.shape[0]

    def num_parameters(self) -> int:
        return self.rank * (self.d_in + self.d_out)

    def delta(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise T.ShapeError(f"LoRA input width {x.shape[-1]} != adapter d_in {self.d_in}")
        if training and self.dropout > 0.0:
            keep = self.rng.random(x.shape) >= self.dropout
            x = T.mul_const(x, keep / (1.0 - self.dropout))
        return T.scale(T.linear(T.linear(x, self.B), self.A), self.scaling)

    def update_matrix(self) -> np.ndarray:
        return self.scaling * self.A.data @ self.B.data


def adapt(weight: Tensor, adapter: LoraAdapter | None, x: Tensor, training: bool = False) -> Tensor:
    """Apply ``x -> W x + (alpha/r) A (B x)`` row-wise; ``W`` is never handed a gradient."""
    if adapter is not None and (adapter.d_in, adapter.d_out) != (weight.shape[1], weight.shape[0]):
        raise T.ShapeError(
            f"adapter {adapter.d_out}x{adapter.d_in} does not fit weight {weight.shape[0]}x{weight.shape[1]}")
    frozen = Tensor(weight.data) if weight.requires_grad else weight
    y = T.linear(x, frozen)
    if adapter is None:
        return y
    return T.add(y, adapter.delta(x, training=training))


# ---------------------------------------------------------------- accounting


@dataclass(frozen=True)
class LoraTarget:
    """Plan entry: attach adapters of ``rank``/``alpha`` to every map in group ``target``."""

    target: str
    rank: int
    alpha: float


@dataclass
class ParamLayout:
    """Shapes needed for counting: adaptable linear maps per group, and dense trainable blocks."""

    linear_groups: dict[str, list[tuple[int, int]]] = field(default_factory=dict)  # target -> [(d_in, d_out)]
    dense: dict[str, int] = field(default_factory=dict)  # e.g. "queries" -> 32*768


def count_trainable(layout: ParamLayout, lora_plan: list[LoraTarget], dense: list[str] = ()) -> int:
    """Adapter parameters ``r (d_in + d_out)`` over every planned map, plus the named dense blocks."""
    total = 0
    for entry in lora_plan:
        if entry.target not in layout.linear_groups:
            raise KeyError(f"unknown LoRA target {entry.target!r}; known: {sorted(layout.linear_groups)}")
        total += sum(entry.rank * (d_in + d_out) for d_in, d_out in layout.linear_groups[entry.target])
    for name in dense:
        total += layout.dense[name]
    return total


def full_scale_layout(qformer_blocks: int = 12, dim: int = 768, mlp_hidden: int = 3072,
                       num_queries: int = 32, llm_dim: int = 2560, vision_dim: int = 1024,
                       context_dim: int = 768, itm_classes: int = 2) -> ParamLayout:
    """Layout of the full-size configuration (queries 32x768, 12 Q-Former blocks assumed)."""
    attn = [(dim, dim)] * (8 * qformer_blocks)  # q,k,v,o of self- and cross-attention
    mlp = [(dim, mlp_hidden), (mlp_hidden, dim)] * qformer_blocks
    return ParamLayout(
        linear_groups={
            "qformer.attn": attn,
            "qformer.mlp": mlp,
            "llm_proj": [(dim, llm_dim)],
        },
        dense={
            "queries": num_queries * dim,
            "itm_head": dim * itm_classes + itm_classes,
            "gate_k": 2 * dim * dim + dim,
            "gate_v": 2 * dim * dim + dim,
            "f_ctx": context_dim * dim,
            "fusion": 2 * vision_dim * vision_dim,
        },
    )


FULL_SCALE_LORA_PLAN = [
    LoraTarget("qformer.attn", 8, 16.0),
    LoraTarget("qformer.mlp", 8, 16.0),
    LoraTarget("llm_proj", 4, 8.0),
]
FULL_SCALE_DENSE = ["queries", "itm_head"]


def full_scale_count() -> dict[str, int]:
    layout = full_scale_layout()
    parts = {e.target: count_trainable(layout, [e]) for e in FULL_SCALE_LORA_PLAN}
    for name in FULL_SCALE_DENSE:
        parts[name] = layout.dense[name]
    parts["total"] = int(np.sum(list(parts.values())))
    return parts
