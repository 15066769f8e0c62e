"""Data preparation, training loop, checkpoints, captioning, retrieval and ablations."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import DatasetManifest, Record
from .decoder import Vocab
from .enhance import EnhanceConfig, enhance, load_image
from .lora import LoraTarget
from .metrics import cider, mean_average_precision, recall_at_k
from .model import ABLATIONS, MDSE, Ablation, VisualBatch
from .regions import RegionMaskSet, apply_masks, load_masks, propose_fallback
from .tensor import Tensor

log = logging.getLogger(__name__)

TRACE_HEADER = ("step", "itc", "itm", "itg", "total")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- preprocessing


@dataclass
class Prepared:
    """One record after enhancement and mask resolution, ready for the encoder."""

    image: np.ndarray
    regions: list[np.ndarray]
    mask_source: str
    context_id: int
    captions: list[str]


def prepare_image(path: str | Path, size: int, enhance_cfg: EnhanceConfig, no_fe: bool = False) -> np.ndarray:
    img = load_image(path, size)
    return img if no_fe else enhance(img, enhance_cfg)


def resolve_masks(record_id: str, mask_dir: Path | None, image_path: Path, enhanced: np.ndarray,
                  fallback_k: int) -> RegionMaskSet:
    """Ingested masks when a mask directory holds any for this id, otherwise the fallback proposer."""
    size = enhanced.shape[0]
    if mask_dir is not None and Path(mask_dir).is_dir():
        from PIL import Image

        with Image.open(image_path) as im:
            shape = im.size[::-1]
        masks = load_masks(mask_dir, record_id, shape)
        if len(masks):
            return masks.resized(size)
    return propose_fallback(enhanced, fallback_k)


def prepare_record(rec: Record, manifest: DatasetManifest, cfg: TrainConfig) -> Prepared:
    size = cfg.model.vit.image_size
    img = prepare_image(rec.image_path, size, cfg.enhance, cfg.ablation.no_fe)
    masks = resolve_masks(rec.image_id, rec.mask_dir, rec.image_path, img, cfg.fallback_regions)
    return Prepared(img, apply_masks(img, masks), masks.source, manifest.context_id(rec.context_category),
                    list(rec.captions))


@dataclass
class EncodedSet:
    """Frozen-encoder outputs for every record, cached as arrays."""

    e_g: np.ndarray  # [R, T, D]
    e_s: np.ndarray
    ctx: np.ndarray
    captions: list[list[str]]
    mask_sources: list[str]

    def batch(self, idx) -> VisualBatch:
        return VisualBatch(Tensor(self.e_g[idx]), Tensor(self.e_s[idx]))

    def __len__(self) -> int:
        return len(self.captions)


def encode_prepared(model: MDSE, items: list[Prepared]) -> EncodedSet:
    with T.no_grad():
        vis = model.encode_images(np.stack([p.image for p in items]), [p.regions for p in items])
    return EncodedSet(vis.e_g.data.copy(), vis.e_s.data.copy(), np.array([p.context_id for p in items]),
                      [p.captions for p in items], [p.mask_source for p in items])


# ---------------------------------------------------------------- optimisation


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad**2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: list[Tensor], lr: float):
        self.params, self.lr = params, lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


def make_optimizer(cfg: TrainConfig, params: list[Tensor]):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate)
    return SGD(params, cfg.learning_rate)


@dataclass
class TrainResult:
    model: MDSE
    config: TrainConfig
    trace: list[tuple[int, float, float, float, float]]
    encoded: EncodedSet
    step: int = 0


def build_vocab(manifest: DatasetManifest) -> Vocab:
    return Vocab.build(manifest.all_captions())


def build_model(cfg: TrainConfig, vocab: Vocab) -> MDSE:
    return MDSE(cfg.model_config(), vocab)


def train(manifest: DatasetManifest, cfg: TrainConfig, trace_path: str | Path | None = None,
          vocab: Vocab | None = None) -> TrainResult:
    """Fit the trainable parameters (adapters, queries, gates, context projector, fusion, heads)."""
    vocab = vocab or build_vocab(manifest)
    model = build_model(cfg, vocab)
    items = [prepare_record(r, manifest, cfg) for r in manifest.records]
    encoded = encode_prepared(model, items)
    params = [p for _, p in model.trainable_parameters()]
    opt = make_optimizer(cfg, params)
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    n = len(encoded)
    bs = min(cfg.batch_size, n)
    draw_order = (lambda: rng.permutation(n)) if cfg.shuffle else (lambda: np.arange(n))
    order = draw_order()
    cursor = 0
    trace: list[tuple[int, float, float, float, float]] = []
    fh = writer = None
    if trace_path is not None:
        fh = open(trace_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
    model.train()
    try:
        for step in range(1, cfg.steps + 1):
            if cursor + bs > n:
                order, cursor = draw_order(), 0
            idx = order[cursor:cursor + bs]
            cursor += bs
            captions = [encoded.captions[i][rng.integers(len(encoded.captions[i]))] for i in idx]
            model.zero_grad()
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    parts = model.losses(encoded.batch(idx), encoded.ctx[idx], captions, cfg.weights)
            except ValueError as exc:  # degenerate features after divergence
                raise TrainingError(f"forward pass failed at step {step}: {exc}") from exc
            vals = parts.values()
            if not all(np.isfinite(list(vals.values()))):
                raise TrainingError(f"non-finite loss at step {step}: {vals}")
            T.backward(parts.total)
            opt.step()
            row = (step, vals["itc"], vals["itm"], vals["itg"], vals["total"])
            trace.append(row)
            if writer is not None:
                writer.writerow(row)
                fh.flush()
            if step == 1 or step % 50 == 0:
                log.info("step %d total %.4f (itc %.4f itm %.4f itg %.4f)", step, vals["total"], vals["itc"],
                         vals["itm"], vals["itg"])
    finally:
        if fh is not None:
            fh.close()
        model.eval()
    return TrainResult(model, cfg, trace, encoded, cfg.steps)


def write_trace(trace, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        w.writerows(trace)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(result: TrainResult | MDSE, path: str | Path, cfg: TrainConfig | None = None,
                    step: int | None = None, context_categories: list[str] | None = None) -> Path:
    """``<path>.npz`` holds every tensor; ``<path>.json`` holds config, vocab, hash and step."""
    model = result.model if isinstance(result, TrainResult) else result
    cfg = result.config if isinstance(result, TrainResult) else cfg
    step = result.step if isinstance(result, TrainResult) and step is None else (step or 0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: p.data for name, p in model.named_parameters()}
    np.savez(path.with_suffix(".npz"), **arrays)
    meta = {
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "step": step,
        "vocab": model.vocab.tokens,
        "context_categories": context_categories or [],
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1, default=str), encoding="utf-8")
    return path.with_suffix(".json")


@dataclass
class Checkpoint:
    model: MDSE
    config: TrainConfig
    step: int
    config_hash: str
    context_categories: list[str] = field(default_factory=list)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    cfg = TrainConfig.from_dict(meta["config"])
    if cfg.digest() != meta["config_hash"]:
        raise ValueError(f"config hash mismatch in {path}")
    model = build_model(cfg, Vocab(meta["vocab"]))
    with np.load(path.with_suffix(".npz")) as arrays:
        params = dict(model.named_parameters())
        missing = set(params) - set(arrays.files)
        if missing:
            raise ValueError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {p.shape}")
            p.data = arrays[name].astype(np.float64).copy()
    model.eval()
    return Checkpoint(model, cfg, int(meta["step"]), meta["config_hash"], meta.get("context_categories", []))


# ---------------------------------------------------------------- inference


def caption_image(image_path: str | Path, ckpt: Checkpoint, context_category: str,
                  mask_dir: str | Path | None = None, image_id: str | None = None) -> dict:
    """Enhance, segment, encode, fuse, attend and greedily decode one image."""
    cfg = ckpt.config
    model = ckpt.model
    image_path = Path(image_path)
    cats = ckpt.context_categories
    if context_category not in cats:
        raise ValueError(f"unknown context category {context_category!r}; known: {cats}")
    img = prepare_image(image_path, cfg.model.vit.image_size, cfg.enhance, cfg.ablation.no_fe)
    rid = image_id or image_path.stem
    md = Path(mask_dir) if mask_dir is not None else None
    masks = resolve_masks(rid, md if md is not None and md.is_dir() else None, image_path, img,
                          cfg.fallback_regions)
    with T.no_grad():
        vis = model.encode_images(img[None], [apply_masks(img, masks)])
    text = model.generate(vis, [cats.index(context_category)])[0]
    return {"caption": text, "mask_source": masks.source, "num_regions": len(masks)}


def rank_of_correct(scores: np.ndarray) -> np.ndarray:
    """1-based rank of the diagonal entry in each row; ties count against the correct item."""
    diag = np.diag(scores)
    others = scores >= diag[:, None]
    np.fill_diagonal(others, False)
    return 1 + others.sum(axis=1)


def retrieval_relevance(scores: np.ndarray, encoded: EncodedSet) -> list[list[int]]:
    """Per query image, gallery captions sorted by score, marked 1 when the text is one of its references."""
    gallery = [c[0] for c in encoded.captions]
    out = []
    for i, row in enumerate(scores):
        order = np.argsort(-row, kind="stable")
        out.append([int(gallery[j] in encoded.captions[i]) for j in order])
    return out


def retrieve(model: MDSE, encoded: EncodedSet, k_list=(1, 5, 10)) -> dict:
    """Image-to-text retrieval over the set's first captions, ranked by ITC similarity."""
    captions = [c[0] for c in encoded.captions]
    scores = model.similarity(encoded.batch(np.arange(len(encoded))), encoded.ctx, captions)
    ranks = rank_of_correct(scores)
    return {
        "ranks": ranks.tolist(),
        "r_at": {str(k): recall_at_k(ranks, k) for k in k_list},
        "map": mean_average_precision(retrieval_relevance(scores, encoded)),
    }


def generate_all(model: MDSE, encoded: EncodedSet, batch: int = 32) -> list[str]:
    out = []
    for s in range(0, len(encoded), batch):
        idx = np.arange(s, min(len(encoded), s + batch))
        out += model.generate(encoded.batch(idx), encoded.ctx[idx])
    return out


def evaluate(model: MDSE, encoded: EncodedSet, k_list=(1, 5, 10)) -> dict:
    cands = generate_all(model, encoded)
    cid = cider([(c, refs) for c, refs in zip(cands, encoded.captions)])
    ret = retrieve(model, encoded, k_list)
    exact = sum(c in refs for c, refs in zip(cands, encoded.captions))
    return {"cider": cid["cider"], "cider_x10": cid["cider_x10"], "r_at": ret["r_at"], "map": ret["map"],
            "exact_captions": exact, "n": len(encoded), "captions": cands}


def encode_manifest(model: MDSE, manifest: DatasetManifest, cfg: TrainConfig) -> EncodedSet:
    return encode_prepared(model, [prepare_record(r, manifest, cfg) for r in manifest.records])


# ---------------------------------------------------------------- ablations

LORA_SWEEP = ((4, 4), (4, 8), (8, 8), (8, 16), (16, 16), (16, 32))


def ablate(manifest: DatasetManifest, cfg: TrainConfig, variants=("full",) + ABLATIONS) -> dict[str, dict]:
    """Train the full model and each single-removal variant with the same seed and steps."""
    table = {}
    for name in variants:
        vcfg = replace(cfg, ablation=Ablation.only(name))
        res = train(manifest, vcfg)
        report = evaluate(res.model, res.encoded)
        report.pop("captions")
        report["final_loss"] = res.trace[-1][4]
        table[name] = report
        log.info("ablation %s: %s", name, report)
    return table


def lora_sweep(manifest: DatasetManifest, cfg: TrainConfig, pairs=LORA_SWEEP) -> dict[str, dict]:
    """Vary (rank, alpha) of the Q-Former adapters; the prefix projector adapter is kept as configured."""
    table = {}
    for r, a in pairs:
        plan = tuple(LoraTarget(e.target, r, float(a)) if e.target.startswith("qformer") else e
                     for e in cfg.model.lora_plan)
        vcfg = replace(cfg, model=replace(cfg.model, lora_plan=plan))
        res = train(manifest, vcfg)
        report = evaluate(res.model, res.encoded)
        report.pop("captions")
        report["final_loss"] = res.trace[-1][4]
        table[f"({r},{a})"] = report
    return table
