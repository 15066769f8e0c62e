"""Captioning and retrieval metrics: CIDEr (unscaled), recall@k, mean average precision."""

from __future__ import annotations

import math
import warnings
from collections import Counter
from typing import Sequence

import numpy as np

from .decoder import tokenize


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _tfidf(counts: Counter, idf: dict) -> dict:
    total = sum(counts.values())
    if total == 0:
        return {}
    return {g: (c / total) * idf.get(g, 0.0) for g, c in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider(corpus: Sequence[tuple[str, Sequence[str]]], max_n: int = 4) -> dict:
    """CIDEr over ``[(candidate, [references...]), ...]``.

    Document frequency counts images whose references contain an n-gram;
    ``idf = log(N / max(1, df))``. Candidate term frequencies are clipped to the
    reference's counts before the cosine. The per-image score averages over
    references, then over n = 1..max_n.
    """
    if not corpus:
        raise ValueError("CIDEr needs at least one image")
    n_img = len(corpus)
    cands = [tokenize(c) for c, _ in corpus]
    refs = []
    for _, rs in corpus:
        if not rs:
            raise ValueError("every image needs at least one reference")
        refs.append([tokenize(r) for r in rs])
    scores = np.zeros(n_img)
    for n in range(1, max_n + 1):
        df: Counter = Counter()
        for rs in refs:
            df.update(set().union(*(ngrams(r, n).keys() for r in rs)))
        idf = {g: math.log(n_img / max(1, d)) for g, d in df.items()}
        for i in range(n_img):
            cand_counts = ngrams(cands[i], n)
            if not cand_counts:
                continue
            sims = []
            for r in refs[i]:
                ref_counts = ngrams(r, n)
                clipped = Counter({g: min(c, ref_counts.get(g, 0)) for g, c in cand_counts.items()})
                clipped = Counter({g: c for g, c in clipped.items() if c > 0})
                if not clipped:
                    sims.append(0.0)
                    continue
                vc = {g: (c / sum(cand_counts.values())) * idf.get(g, 0.0) for g, c in clipped.items()}
                sims.append(_cosine(vc, _tfidf(ref_counts, idf)))
            scores[i] += float(np.mean(sims)) / max_n
    mean = float(scores.mean())
    return {"per_image": scores.tolist(), "cider": mean, "cider_x10": 10.0 * mean}


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    """Fraction of queries whose correct item has 1-based rank <= k."""
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no ranks given")
    if np.any(ranks < 1):
        raise ValueError("ranks are 1-based")
    return float(np.mean(ranks <= k))


def average_precision(relevance: Sequence[int]) -> float | None:
    """Mean of precision@i over the ranks i holding relevant items; None without positives."""
    rel = np.asarray(relevance, dtype=bool)
    if not rel.any():
        return None
    hits = np.cumsum(rel)
    positions = np.nonzero(rel)[0]
    return float(np.mean(hits[positions] / (positions + 1)))


def mean_average_precision(per_class: Sequence[Sequence[int]]) -> float:
    """Unweighted mean AP over classes with at least one positive."""
    aps = []
    for c, rel in enumerate(per_class):
        ap = average_precision(rel)
        if ap is None:
            warnings.warn(f"class {c} has no positives; excluded from mAP", stacklevel=2)
            continue
        aps.append(ap)
    if not aps:
        raise ValueError("no class has any positive item")
    return float(np.mean(aps))


def relevance_from_scores(scores: np.ndarray, labels: np.ndarray) -> list[list[int]]:
    """Per class, rank items by descending score and list their 0/1 relevance."""
    out = []
    for c in range(scores.shape[1]):
        order = np.argsort(-scores[:, c], kind="stable")
        out.append(labels[order, c].astype(int).tolist())
    return out
