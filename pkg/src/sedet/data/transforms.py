"""Letterboxing, mosaic and random-affine augmentation.

All randomness comes from ``numpy.random.default_rng(seed)`` so a (sample,
seed) pair always yields the same output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np

from ..boxes import Box
from .annotations import Annotation

PAD_VALUE = 114
MIN_KEPT_AREA = 0.10

Sample = Tuple[np.ndarray, Annotation]


@dataclass
class AugmentConfig:
    mosaic_prob: float = 0.5
    mosaic_scale: Tuple[float, float] = (0.5, 1.0)
    mosaic_canvas_factor: int = 2
    affine_prob: float = 1.0
    degrees: float = 5.0
    translate: float = 0.1
    scale: Tuple[float, float] = (0.75, 1.25)
    seed: int = 0

    def __post_init__(self):
        self.mosaic_scale = tuple(self.mosaic_scale)
        self.scale = tuple(self.scale)
        for name in ("mosaic_prob", "affine_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("mosaic_scale", "scale"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ValueError(f"{name} must be a positive (low, high) range, got {(lo, hi)}")
        if self.translate < 0 or self.degrees < 0:
            raise ValueError("translate and degrees must be non-negative")

    @classmethod
    def disabled(cls, seed: int = 0) -> "AugmentConfig":
        return cls(mosaic_prob=0.0, affine_prob=0.0, seed=seed)


@dataclass(frozen=True)
class LetterboxTransform:
    """x_net = x * scale_x + pad_x (likewise y); original size kept for clipping."""

    scale_x: float
    scale_y: float
    pad_x: float
    pad_y: float
    orig_w: int
    orig_h: int

    def forward_box(self, box: Box) -> Box:
        return Box(box.x * self.scale_x + self.pad_x, box.y * self.scale_y + self.pad_y,
                   box.w * self.scale_x, box.h * self.scale_y)

    def inverse_box(self, box: Box) -> Box:
        return Box((box.x - self.pad_x) / self.scale_x, (box.y - self.pad_y) / self.scale_y,
                   box.w / self.scale_x, box.h / self.scale_y)


def letterbox(image: np.ndarray, ann: Optional[Annotation], target: int):
    """Aspect-preserving resize onto a gray ``target`` x ``target`` canvas.

    Returns ``(canvas, annotation, transform)``; the annotation is None when
    ``ann`` is None.
    """
    if target % 32:
        raise ValueError(f"letterbox target must be a multiple of 32, got {target}")
    h, w = image.shape[:2]
    r = min(target / w, target / h)
    nw, nh = max(1, int(round(w * r))), max(1, int(round(h * r)))
    if (nw, nh) != (w, h):
        interp = cv2.INTER_AREA if r < 1 else cv2.INTER_LINEAR
        resized = cv2.resize(image, (nw, nh), interpolation=interp)
    else:
        resized = image
    left, top = (target - nw) // 2, (target - nh) // 2
    canvas = np.full((target, target, 3), PAD_VALUE, dtype=np.uint8)
    canvas[top:top + nh, left:left + nw] = resized
    t = LetterboxTransform(nw / w, nh / h, float(left), float(top), w, h)
    if ann is None:
        return canvas, None, t
    out = Annotation(ann.image_id, target, target, [(t.forward_box(b), c) for b, c in ann.objects])
    return canvas, out, t


def _clip_and_filter(corners: np.ndarray, ref_areas: np.ndarray, classes: Sequence[int],
                     bounds: Tuple[float, float, float, float]) -> List[Tuple[Box, int]]:
    """Clip corner boxes to ``bounds``; drop those keeping < 10% of ``ref_areas``."""
    x0, y0, x1, y1 = bounds
    out = []
    for (a, b, c, d), area, cls in zip(corners, ref_areas, classes):
        ca, cb = min(max(a, x0), x1), min(max(b, y0), y1)
        cc, cd = min(max(c, x0), x1), min(max(d, y0), y1)
        kept = (cc - ca) * (cd - cb)
        if kept <= 0 or area <= 0 or kept < MIN_KEPT_AREA * area:
            continue
        out.append((Box.from_corners(ca, cb, cc, cd), int(cls)))
    return out


def mosaic(samples: Sequence[Sample], cfg: AugmentConfig, seed: int, canvas_size: int,
           center: Optional[Tuple[int, int]] = None, return_center: bool = False):
    """Stitch four samples around a random center on a ``canvas_size`` canvas.

    Each sample is rescaled so its longer side is ``canvas_size * u`` with u
    drawn from ``cfg.mosaic_scale``, then placed with one corner at the center:
    sample 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right. Boxes are
    clipped to their quadrant.
    """
    if len(samples) != 4:
        raise ValueError(f"mosaic needs exactly 4 samples, got {len(samples)}")
    rng = np.random.default_rng(seed)
    s = canvas_size
    if center is None:
        cx = int(rng.uniform(0.25 * s, 0.75 * s))
        cy = int(rng.uniform(0.25 * s, 0.75 * s))
    else:
        cx, cy = center
    canvas = np.full((s, s, 3), PAD_VALUE, dtype=np.uint8)
    objects: List[Tuple[Box, int]] = []
    quads = [(0, 0, cx, cy), (cx, 0, s, cy), (0, cy, cx, s), (cx, cy, s, s)]
    for k, ((img, ann), (qx0, qy0, qx1, qy1)) in enumerate(zip(samples, quads)):
        h, w = img.shape[:2]
        u = rng.uniform(*cfg.mosaic_scale)
        r = s * u / max(h, w)
        nw, nh = max(1, int(round(w * r))), max(1, int(round(h * r)))
        img = cv2.resize(img, (nw, nh), interpolation=cv2.INTER_AREA if r < 1 else cv2.INTER_LINEAR)
        sx, sy = nw / w, nh / h
        # placement offset of the scaled image's top-left corner on the canvas
        ox = cx - nw if k in (0, 2) else cx
        oy = cy - nh if k in (0, 1) else cy
        px0, py0 = max(qx0, ox), max(qy0, oy)
        px1, py1 = min(qx1, ox + nw), min(qy1, oy + nh)
        if px1 > px0 and py1 > py0:
            canvas[py0:py1, px0:px1] = img[py0 - oy:py1 - oy, px0 - ox:px1 - ox]
        if not ann.objects:
            continue
        corners = np.array([[b.x1 * sx + ox, b.y1 * sy + oy, b.x2 * sx + ox, b.y2 * sy + oy] for b in ann.boxes])
        areas = (corners[:, 2] - corners[:, 0]) * (corners[:, 3] - corners[:, 1])
        objects += _clip_and_filter(corners, areas, ann.classes, (qx0, qy0, qx1, qy1))
    out = (canvas, Annotation(samples[0][1].image_id + "+mosaic", s, s, objects))
    return (*out, (cx, cy)) if return_center else out


@dataclass(frozen=True)
class AffineParams:
    angle: float = 0.0  # degrees, counter-clockwise
    scale: float = 1.0
    tx: float = 0.0  # pixels
    ty: float = 0.0


def sample_affine(rng: np.random.Generator, cfg: AugmentConfig, width: int, height: int) -> AffineParams:
    return AffineParams(
        angle=float(rng.uniform(-cfg.degrees, cfg.degrees)),
        scale=float(rng.uniform(*cfg.scale)),
        tx=float(rng.uniform(-cfg.translate, cfg.translate) * width),
        ty=float(rng.uniform(-cfg.translate, cfg.translate) * height),
    )


def affine_matrix(p: AffineParams, width: int, height: int) -> np.ndarray:
    """2 x 3 matrix: rotate/scale about the image center, then translate."""
    m = cv2.getRotationMatrix2D((width / 2, height / 2), p.angle, p.scale)
    m[0, 2] += p.tx
    m[1, 2] += p.ty
    return m


def random_affine(sample: Sample, cfg: AugmentConfig, seed: int,
                  params: Optional[AffineParams] = None) -> Sample:
    """Rotate/scale/translate a sample (nearest-neighbor) and re-box its corners."""
    img, ann = sample
    h, w = img.shape[:2]
    if params is None:
        params = sample_affine(np.random.default_rng(seed), cfg, w, h)
    m = affine_matrix(params, w, h)
    if np.allclose(m, [[1, 0, 0], [0, 1, 0]], atol=0, rtol=0):
        out_img = img.copy()
    else:
        out_img = cv2.warpAffine(img, m, (w, h), flags=cv2.INTER_NEAREST,
                                 borderMode=cv2.BORDER_CONSTANT, borderValue=(PAD_VALUE,) * 3)
    if not ann.objects:
        return out_img, Annotation(ann.image_id, w, h, [])
    corners = []
    for b in ann.boxes:
        pts = np.array([[b.x1, b.y1, 1], [b.x2, b.y1, 1], [b.x2, b.y2, 1], [b.x1, b.y2, 1]]) @ m.T
        corners.append([pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()])
    corners = np.array(corners)
    areas = (corners[:, 2] - corners[:, 0]) * (corners[:, 3] - corners[:, 1])
    objects = _clip_and_filter(corners, areas, ann.classes, (0, 0, w, h))
    return out_img, Annotation(ann.image_id, w, h, objects)


def prepare_sample(index: int, samples: Sequence[Sample], cfg: AugmentConfig, target: int,
                   seed: int) -> Tuple[np.ndarray, Annotation]:
    """Training view of ``samples[index]``: optional mosaic, then affine, then letterbox."""
    rng = np.random.default_rng(seed)
    img, ann = samples[index]
    if cfg.mosaic_prob > 0 and rng.random() < cfg.mosaic_prob and len(samples) >= 1:
        others = rng.integers(0, len(samples), size=3)
        quad = [samples[index]] + [samples[int(i)] for i in others]
        img, ann = mosaic(quad, cfg, int(rng.integers(2 ** 31)), target * cfg.mosaic_canvas_factor)
    if cfg.affine_prob > 0 and rng.random() < cfg.affine_prob:
        img, ann = random_affine((img, ann), cfg, int(rng.integers(2 ** 31)))
    img, ann, _ = letterbox(img, ann, target)
    return img, ann
