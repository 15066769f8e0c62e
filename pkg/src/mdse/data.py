"""Dataset manifests and the synthetic low-light shapes corpus."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .enhance import save_image
from .regions import save_mask


class ManifestError(ValueError):
    pass


@dataclass
class Record:
    image_id: str
    image_path: Path
    captions: list[str]
    context_category: str
    mask_dir: Path | None = None


@dataclass
class DatasetManifest:
    records: list[Record]
    split: str = "train"
    context_categories: list[str] = field(default_factory=list)

    def context_id(self, category: str) -> int:
        try:
            return self.context_categories.index(category)
        except ValueError:
            raise ManifestError(f"context category {category!r} not in {self.context_categories}") from None

    def all_captions(self) -> list[str]:
        return [c for r in self.records for c in r.captions]

    @classmethod
    def load(cls, path: str | Path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent
        split = raw.get("split", "train")
        if split not in ("train", "val", "test"):
            raise ManifestError(f"split must be train|val|test, got {split!r}")
        records = []
        for i, r in enumerate(raw["records"]):
            caps = r.get("captions") or []
            if not caps:
                raise ManifestError(f"record {i} ({r.get('image_id')}) has no captions")
            img = base / r["image_path"]
            if check_files and not img.is_file():
                raise ManifestError(f"record {i}: image file {img} not found")
            mask_dir = base / r["mask_dir"] if r.get("mask_dir") else None
            records.append(Record(str(r["image_id"]), img, list(caps), str(r.get("context_category", "none")), mask_dir))
        cats = raw.get("context_categories") or sorted({r.context_category for r in records})
        man = cls(records, split, list(cats))
        for r in records:
            man.context_id(r.context_category)
        return man

    def save(self, path: str | Path) -> None:
        path = Path(path)
        base = path.parent.resolve()

        def rel(p: Path) -> str:
            p = Path(p).resolve()
            try:
                return str(p.relative_to(base))
            except ValueError:
                return str(p)

        out = {
            "split": self.split,
            "context_categories": self.context_categories,
            "records": [
                {
                    "image_id": r.image_id,
                    "image_path": rel(r.image_path),
                    "captions": r.captions,
                    "context_category": r.context_category,
                    **({"mask_dir": rel(r.mask_dir)} if r.mask_dir else {}),
                }
                for r in self.records
            ],
        }
        path.write_text(json.dumps(out, indent=2), encoding="utf-8")


# ---------------------------------------------------------------- synthetic corpus

COLORS = {
    "red": (1.0, 0.15, 0.1),
    "green": (0.1, 0.9, 0.2),
    "blue": (0.15, 0.3, 1.0),
    "yellow": (1.0, 0.9, 0.1),
    "white": (1.0, 1.0, 1.0),
    "purple": (0.7, 0.2, 0.9),
}
SHAPES = ("circle", "square", "triangle")
PLACES = {"left": (0.3, 0.5), "right": (0.7, 0.5), "top": (0.5, 0.28), "bottom": (0.5, 0.72)}
CONTEXTS = ("flood", "fire", "collapse", "mine")


def _shape_mask(size: int, shape: str, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    x, y = cx * size, cy * size
    rad = r * size
    if shape == "circle":
        return (xx - x) ** 2 + (yy - y) ** 2 <= rad**2
    if shape == "square":
        return (np.abs(xx - x) <= rad * 0.85) & (np.abs(yy - y) <= rad * 0.85)
    # upward triangle
    top, bottom = y - rad, y + rad
    half = (yy - top) / (2 * rad) * rad
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - x) <= half)


def render_scene(objects: list[tuple[str, str, str]], size: int, rng: np.random.Generator,
                 brightness: float = 0.3) -> tuple[np.ndarray, list[np.ndarray]]:
    """Dark, noisy scene with the given (color, shape, place) objects; returns image and one mask each."""
    img = np.full((size, size, 3), 0.04) + rng.normal(0.0, 0.01, (size, size, 3))
    masks = []
    for color, shape, place in objects:
        cx, cy = PLACES[place]
        m = _shape_mask(size, shape, cx, cy, 0.17)
        img[m] = np.asarray(COLORS[color]) * brightness
        masks.append(m)
    return np.clip(img, 0.0, 1.0), masks


def _caption(objects: list[tuple[str, str, str]], context: str | None) -> str:
    parts = [f"a {c} {s} on the {p}" for c, s, p in objects]
    body = " and ".join(parts)
    return f"{context} scene with {body}" if context else body


def make_synthetic(out_dir: str | Path, n_records: int = 16, seed: int = 0, size: int = 32,
                   context_pairs: bool = False, two_objects: bool = True) -> DatasetManifest:
    """Write images, masks and ``manifest.json`` for a colored-shapes corpus.

    With ``context_pairs`` every image appears twice under different context
    categories, and the caption names the context, so only a model that reads
    the context can tell the two records apart.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))
    n_images = (n_records + 1) // 2 if context_pairs else n_records
    colors, places = list(COLORS), list(PLACES)
    seen: set[tuple] = set()
    scenes = []
    while len(scenes) < n_images:
        k = 2 if two_objects and rng.random() < 0.5 else 1
        pl = rng.choice(len(places), size=k, replace=False)
        objs = tuple((colors[rng.integers(len(colors))], SHAPES[rng.integers(len(SHAPES))], places[p]) for p in pl)
        if objs in seen:
            continue
        seen.add(objs)
        scenes.append(list(objs))
    records = []
    for i, objs in enumerate(scenes):
        img, masks = render_scene(objs, size, rng)
        image_id = f"img{i:04d}"
        save_image(img, out / "images" / f"{image_id}.png")
        ctxs = list(rng.choice(len(CONTEXTS), size=2, replace=False)) if context_pairs else [rng.integers(len(CONTEXTS))]
        for c in ctxs:
            context = CONTEXTS[int(c)]
            rid = f"{image_id}_{context}" if context_pairs else image_id
            for j, m in enumerate(masks):
                save_mask(m, out / "masks" / f"{rid}_mask_{j}.png")
            records.append(Record(rid, out / "images" / f"{image_id}.png",
                                  [_caption(objs, context if context_pairs else None)],
                                  context, out / "masks"))
    records = records[:n_records]
    man = DatasetManifest(records, "train", list(CONTEXTS))
    man.save(out / "manifest.json")
    return DatasetManifest.load(out / "manifest.json")
