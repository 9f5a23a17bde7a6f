"""Box geometry: IoU, CIoU, head-output decoding and label confidence."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .ops import ShapeError
from .tensor import Tensor, atan, clamp, maximum, minimum

ASPECT_EPS = 1e-9
_V_SCALE = 4.0 / math.pi ** 2


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in center form (pixels)."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box size must be non-negative, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "Box":
        x1, x2 = min(x1, x2), max(x1, x2)
        y1, y2 = min(y1, y2), max(y1, y2)
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @property
    def x1(self) -> float:
        return self.x - self.w / 2

    @property
    def y1(self) -> float:
        return self.y - self.h / 2

    @property
    def x2(self) -> float:
        return self.x + self.w / 2

    @property
    def y2(self) -> float:
        return self.y + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self):
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h])


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union is empty."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    # areas from corners so identical boxes give exactly 1
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return min(inter / union, 1.0) if union > 0 else 0.0


def ciou(pred: Box, gt: Box) -> float:
    """Complete IoU: IoU - center distance^2 / enclosing diagonal^2 - alpha * v."""
    if gt.w <= 0 or gt.h <= 0:
        raise ValueError(f"ground-truth box needs positive size, got {gt}")
    overlap = iou(pred, gt)
    rho2 = (pred.x - gt.x) ** 2 + (pred.y - gt.y) ** 2
    cw = max(pred.x2, gt.x2) - min(pred.x1, gt.x1)
    ch = max(pred.y2, gt.y2) - min(pred.y1, gt.y1)
    c2 = cw * cw + ch * ch
    v = _V_SCALE * (math.atan(gt.w / gt.h) - math.atan(pred.w / max(pred.h, ASPECT_EPS))) ** 2
    alpha = v / (1.0 - overlap + v) if v > 0 else 0.0
    return overlap - rho2 / c2 - alpha * v


def ciou_terms(pred: Box, gt: Box) -> dict:
    """The individual pieces of :func:`ciou`, for inspection."""
    overlap = iou(pred, gt)
    cw = max(pred.x2, gt.x2) - min(pred.x1, gt.x1)
    ch = max(pred.y2, gt.y2) - min(pred.y1, gt.y1)
    v = _V_SCALE * (math.atan(gt.w / gt.h) - math.atan(pred.w / max(pred.h, ASPECT_EPS))) ** 2
    return {
        "iou": overlap,
        "rho2": (pred.x - gt.x) ** 2 + (pred.y - gt.y) ** 2,
        "c2": cw * cw + ch * ch,
        "v": v,
        "alpha": v / (1.0 - overlap + v) if v > 0 else 0.0,
    }


def xywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:4] / 2
    return np.concatenate([b[..., 0:2] - half, b[..., 0:2] + half], axis=-1)


def xyxy_to_xywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., 0:2] + b[..., 2:4]) / 2, b[..., 2:4] - b[..., 0:2]], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner-form boxes, shapes (N, 4) x (M, 4) -> (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, np.minimum(inter / np.where(union > 0, union, 1.0), 1.0), 0.0)
    return out


def ciou_tensor(pxy: Tensor, pwh: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable CIoU for M predictions against M fixed ground truths.

    ``pxy``/``pwh`` are (M, 2) tensors of centers and sizes, ``gt`` an (M, 4)
    center-form array in the same units. Every term, alpha included, carries
    gradient.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if np.any(gt[:, 2:4] <= 0):
        raise ValueError("ground-truth boxes need positive size")
    px, py = pxy[:, 0], pxy[:, 1]
    pw, ph = pwh[:, 0], pwh[:, 1]
    gx1, gy1 = gt[:, 0] - gt[:, 2] / 2, gt[:, 1] - gt[:, 3] / 2
    gx2, gy2 = gt[:, 0] + gt[:, 2] / 2, gt[:, 1] + gt[:, 3] / 2
    px1, px2 = px - pw * 0.5, px + pw * 0.5
    py1, py2 = py - ph * 0.5, py + ph * 0.5

    iw = clamp(minimum(px2, gx2) - maximum(px1, gx1), lo=0.0)
    ih = clamp(minimum(py2, gy2) - maximum(py1, gy1), lo=0.0)
    inter = iw * ih
    union = pw * ph + gt[:, 2] * gt[:, 3] - inter
    overlap = inter / union

    rho2 = (px - gt[:, 0]) ** 2 + (py - gt[:, 1]) ** 2
    cw = maximum(px2, gx2) - minimum(px1, gx1)
    ch = maximum(py2, gy2) - minimum(py1, gy1)
    c2 = cw * cw + ch * ch

    v = _V_SCALE * (np.arctan(gt[:, 2] / gt[:, 3]) - atan(pw / clamp(ph, lo=ASPECT_EPS))) ** 2
    # tiny floor keeps alpha = 0/0 finite when boxes coincide (v == 0 there anyway)
    alpha = v / (1.0 - overlap + v + 1e-300)
    return overlap - rho2 / c2 - alpha * v


@dataclass
class DecodedPrediction:
    box: Box
    objectness: float
    class_scores: np.ndarray
    scale: int
    cell: tuple  # (cell_x, cell_y)
    anchor: int


def decode_arrays(raw: Sequence[Tensor], config) -> dict:
    """Vectorized decode of all three heads.

    Returns arrays over every (image, scale, anchor, cell): ``boxes`` (center
    form, pixels), ``objectness``, ``class_scores``, ``image``, ``scale``,
    ``cell_x``, ``cell_y``, ``anchor``. Centers are clipped to the input frame.
    """
    from scipy.special import expit

    a_count, nc = config.anchors_per_scale, config.num_classes
    anchors = config.anchor_array()
    parts = {k: [] for k in ("boxes", "objectness", "class_scores", "image", "scale", "cell_x", "cell_y", "anchor")}
    if len(raw) != 3:
        raise ShapeError(f"expected 3 prediction maps, got {len(raw)}")
    for s, (t, stride) in enumerate(zip(raw, config.strides)):
        g = config.input_size // stride
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        if data.ndim != 4 or data.shape[1:] != (config.head_channels, g, g):
            raise ShapeError(f"scale {s}: raw shape {data.shape} does not match config "
                             f"(N, {config.head_channels}, {g}, {g})")
        n = data.shape[0]
        p = expit(data.reshape(n, a_count, 5 + nc, g, g))
        gy, gx = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
        cx = (2 * p[:, :, 0] - 0.5 + gx) * stride
        cy = (2 * p[:, :, 1] - 0.5 + gy) * stride
        w = (2 * p[:, :, 2]) ** 2 * anchors[s, :, 0][None, :, None, None]
        h = (2 * p[:, :, 3]) ** 2 * anchors[s, :, 1][None, :, None, None]
        cx = np.clip(cx, 0, config.input_size)
        cy = np.clip(cy, 0, config.input_size)
        parts["boxes"].append(np.stack([cx, cy, w, h], axis=-1).reshape(-1, 4))
        parts["objectness"].append(p[:, :, 4].reshape(-1))
        parts["class_scores"].append(p[:, :, 5:].transpose(0, 1, 3, 4, 2).reshape(-1, nc))
        shape = (n, a_count, g, g)
        idx = np.indices(shape)
        parts["image"].append(idx[0].reshape(-1))
        parts["anchor"].append(idx[1].reshape(-1))
        parts["cell_y"].append(idx[2].reshape(-1))
        parts["cell_x"].append(idx[3].reshape(-1))
        parts["scale"].append(np.full(int(np.prod(shape)), s))
    return {k: np.concatenate(v) for k, v in parts.items()}


def decode(raw: Sequence[Tensor], config, image: int = 0) -> List[DecodedPrediction]:
    """Decode one image's raw head maps into per-anchor predictions."""
    d = decode_arrays(raw, config)
    keep = np.flatnonzero(d["image"] == image)
    return [
        DecodedPrediction(
            box=Box(*d["boxes"][i]),
            objectness=float(d["objectness"][i]),
            class_scores=d["class_scores"][i],
            scale=int(d["scale"][i]),
            cell=(int(d["cell_x"][i]), int(d["cell_y"][i])),
            anchor=int(d["anchor"][i]),
        )
        for i in keep
    ]


def confidence(pred: DecodedPrediction, matched_gt: Optional[Box]) -> float:
    """Pr(object) * IoU: IoU with the matched truth, 0 with none."""
    if matched_gt is None:
        return 0.0
    return iou(pred.box, matched_gt)
