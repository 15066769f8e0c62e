"""Central finite-difference checks of taped gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

STEP = 1e-5


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = STEP) -> np.ndarray:
    """Full finite-difference gradient of scalar ``f()`` w.r.t. every entry of ``x``."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
    return g


def directional_fd(f: Callable[[], Tensor], x: Tensor, v: np.ndarray, h: float = STEP) -> float:
    base = x.data.copy()
    with T.no_grad():
        x.data[...] = base + h * v
        fp = f().item()
        x.data[...] = base - h * v
        fm = f().item()
    x.data[...] = base
    return (fp - fm) / (2 * h)


def analytic_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    T.backward(f())
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


@dataclass
class ParamCheck:
    name: str
    size: int
    max_rel_error: float
    checks: int


def check_parameters(f: Callable[[], Tensor], named: Sequence[tuple[str, Tensor]], *, coords: int = 3,
                     seed: int = 0, h: float = STEP, floor: float = 1e-6) -> list[ParamCheck]:
    """Compare taped gradients with central differences for every named tensor.

    Per tensor: one random-direction derivative (covers every entry at once), the
    entry with the largest analytic gradient, and ``coords`` random entries.
    Relative errors use ``max(|a|, |n|, floor)`` as denominator.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    grads = analytic_grads(f, [p for _, p in named])
    report = []
    for (name, p), g in zip(named, grads):
        errs = []
        v = rng.standard_normal(p.shape)
        v /= np.linalg.norm(v)
        errs.append(relative_error(float((g * v).sum()), directional_fd(f, p, v, h), floor))
        flat = p.data.reshape(-1)
        picks = {int(np.argmax(np.abs(g)))} | set(rng.integers(0, p.size, size=min(coords, p.size)).tolist())
        for i in sorted(picks):
            e = np.zeros(p.size)
            e[i] = 1.0
            num = directional_fd(f, p, e.reshape(p.shape), h)
            errs.append(relative_error(float(g.reshape(-1)[i]), num, floor))
        del flat
        report.append(ParamCheck(name, p.size, max(errs), len(errs)))
    return report


def model_gradcheck(seed: int = 0, batch: int = 3, coords: int = 3) -> dict:
    """Gradient check of the full weighted loss of a freshly initialised desk-scale model.

    Runs in evaluation mode (no adapter dropout) so the loss is a deterministic
    function of the parameters. Adapter ``B`` factors are randomised first:
    at their zero init the ``A`` factors would receive exactly zero gradient.
    """
    from .data import CONTEXTS
    from .decoder import Vocab
    from .model import MDSE, ModelConfig, VisualBatch
    from .objectives import LossWeights

    t0 = time.time()
    rng = np.random.Generator(np.random.PCG64(seed + 100))
    captions = ["a red circle on the left", "a blue square on the top and a white circle", "a yellow triangle"][:batch]
    while len(captions) < batch:
        captions.append(captions[len(captions) % 3] + " again")
    vocab = Vocab.build(captions)
    model = MDSE(ModelConfig(seed=seed), vocab)
    model.eval()
    for _, p in model.trainable_parameters():
        if not np.any(p.data):
            p.data[...] = rng.normal(0.0, 0.05, p.shape)
    cfg = model.cfg.vit
    images = rng.random((batch, cfg.image_size, cfg.image_size, 3)) * 0.5
    regions = [[images[i] * (rng.random(images[i].shape[:2])[..., None] > 0.5)] for i in range(batch)]
    with T.no_grad():
        vis = model.encode_images(images, regions)
    vis = VisualBatch(Tensor(vis.e_g.data), Tensor(vis.e_s.data))
    ctx = rng.integers(0, len(CONTEXTS), size=batch)
    weights = LossWeights()

    def loss():
        return model.losses(vis, ctx, captions, weights).total

    report = check_parameters(loss, model.trainable_parameters(), coords=coords, seed=seed)
    worst = max(report, key=lambda r: r.max_rel_error)
    return {
        "parameters": len(report),
        "scalars": int(sum(r.size for r in report)),
        "max_rel_error": worst.max_rel_error,
        "worst": worst.name,
        "seconds": time.time() - t0,
        "per_parameter": {r.name: r.max_rel_error for r in report},
    }
