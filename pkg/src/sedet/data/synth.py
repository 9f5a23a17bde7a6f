"""Synthetic scenes: one glyph style per behavior class on a noisy background.

Each class has its own shape and color so a small detector can tell them
apart. Glyphs never overlap, and each glyph spans its box edge to edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..boxes import Box
from .annotations import Annotation, ClassVocabulary


@dataclass
class SceneConfig:
    width: int = 160
    height: int = 128
    min_objects: int = 2
    max_objects: int = 4
    min_size: int = 18
    max_size: int = 44
    max_aspect: float = 1.6
    gap: int = 2
    class_frequencies: Optional[List[float]] = None
    max_attempts: int = 200

    def __post_init__(self):
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if not 2 <= self.min_size <= self.max_size:
            raise ValueError("need 2 <= min_size <= max_size")
        if self.max_size > min(self.width, self.height):
            raise ValueError("max_size exceeds the scene")

    def frequencies(self, n_classes: int) -> np.ndarray:
        if self.class_frequencies is None:
            return np.full(n_classes, 1.0 / n_classes)
        f = np.asarray(self.class_frequencies, dtype=np.float64)
        if f.shape != (n_classes,) or np.any(f < 0) or f.sum() <= 0:
            raise ValueError(f"class_frequencies must be {n_classes} non-negative weights")
        return f / f.sum()


COLORS = [
    (220, 40, 40),    # uphead: red block
    (40, 200, 60),    # uphand: green disc
    (40, 80, 230),    # reading: blue triangle
    (240, 220, 30),   # writing: yellow cross
    (210, 50, 210),   # stand: magenta ring
    (30, 210, 220),   # turn: cyan diamond
    (250, 140, 20),   # discuss: orange striped block
]


def _glyph_mask(kind: int, w: int, h: int) -> np.ndarray:
    # pixel-center coordinates normalized to [-1, 1] across the box
    u = (np.arange(w) + 0.5) / w * 2 - 1
    v = (np.arange(h) + 0.5) / h * 2 - 1
    uu, vv = np.meshgrid(u, v)
    k = kind % 7
    if k == 0:
        return np.ones((h, w), dtype=bool)
    if k == 1:
        return uu ** 2 + vv ** 2 <= 1.0 + 1.0 / min(w, h)
    if k == 2:
        # apex at top center, base along the bottom edge
        return np.abs(uu) <= (vv + 1) / 2 + 1.0 / w
    if k == 3:
        return (np.abs(uu) <= 0.34) | (np.abs(vv) <= 0.34)
    if k == 4:
        r = uu ** 2 + vv ** 2
        return (r <= 1.0 + 1.0 / min(w, h)) & (r >= 0.3)
    if k == 5:
        return np.abs(uu) + np.abs(vv) <= 1.0 + 1.0 / min(w, h)
    stripes = (np.arange(h) * 6 // h) % 2 == 0
    return np.ones((h, w), dtype=bool) & stripes[:, None] | (np.abs(uu) >= 0.8)


def background(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    base = rng.uniform(90, 150)
    ramp = np.linspace(-12, 12, width)[None, :] * rng.choice([-1, 1])
    noise = rng.normal(0, 6, size=(height, width, 3))
    img = base + ramp[..., None] + noise
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def render_glyph(img: np.ndarray, kind: int, x: int, y: int, w: int, h: int) -> None:
    mask = _glyph_mask(kind, w, h)
    region = img[y:y + h, x:x + w]
    region[mask] = COLORS[kind % len(COLORS)]


def _overlaps(box, placed, gap) -> bool:
    x, y, w, h = box
    for px, py, pw, ph in placed:
        if x < px + pw + gap and px < x + w + gap and y < py + ph + gap and py < y + h + gap:
            return True
    return False


def generate_synthetic_scene(cfg: SceneConfig, vocab: Optional[ClassVocabulary] = None, seed: int = 0,
                             image_id: str = "", forced: Optional[Sequence[Tuple[int, int, int, int, int]]] = None,
                             n_objects: Optional[int] = None) -> Tuple[np.ndarray, Annotation]:
    """Render one scene.

    ``forced`` lists exact (class, x, y, w, h) glyphs in integer pixels and
    bypasses random placement; ``n_objects`` fixes the object count.
    """
    vocab = vocab or ClassVocabulary()
    rng = np.random.default_rng(seed)
    img = background(rng, cfg.width, cfg.height)
    ann = Annotation(image_id or f"scene_{seed}", cfg.width, cfg.height)
    if forced is not None:
        for cls, x, y, w, h in forced:
            render_glyph(img, cls, x, y, w, h)
            ann.objects.append((Box.from_corners(x, y, x + w, y + h), int(cls)))
        return img, ann.validate(len(vocab))

    freqs = cfg.frequencies(len(vocab))
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1)) if n_objects is None else n_objects
    placed = []
    for _ in range(n):
        cls = int(rng.choice(len(vocab), p=freqs))
        for _ in range(cfg.max_attempts):
            side = rng.uniform(cfg.min_size, cfg.max_size)
            aspect = np.exp(rng.uniform(-np.log(cfg.max_aspect), np.log(cfg.max_aspect)))
            w = int(np.clip(round(side * np.sqrt(aspect)), 2, cfg.width))
            h = int(np.clip(round(side / np.sqrt(aspect)), 2, cfg.height))
            x = int(rng.integers(0, cfg.width - w + 1))
            y = int(rng.integers(0, cfg.height - h + 1))
            if not _overlaps((x, y, w, h), placed, cfg.gap):
                break
        else:
            continue
        placed.append((x, y, w, h))
        render_glyph(img, cls, x, y, w, h)
        ann.objects.append((Box.from_corners(x, y, x + w, y + h), cls))
    return img, ann.validate(len(vocab))
