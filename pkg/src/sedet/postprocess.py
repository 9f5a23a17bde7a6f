"""Score filtering, per-class greedy NMS, and the end-to-end detect call."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import Box, DecodedPrediction, decode_arrays, iou_matrix, xywh_to_xyxy
from .tensor import Tensor, no_grad

Candidate = Tuple[Box, int, float]


@dataclass
class NMSConfig:
    score_threshold: float = 0.25
    iou_threshold: float = 0.45
    max_detections: int = 300

    def __post_init__(self):
        for name in ("score_threshold", "iou_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.max_detections < 0:
            raise ValueError("max_detections must be >= 0")


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def to_record(self, image: str, class_names: Optional[Sequence[str]] = None) -> dict:
        cls = class_names[self.class_id] if class_names else self.class_id
        return {
            "image": image,
            "class": cls,
            "score": self.score,
            "box": [self.box.x1, self.box.y1, self.box.x2, self.box.y2],
        }


def confidence_filter(preds: Iterable[DecodedPrediction], cfg: NMSConfig) -> List[Candidate]:
    """score = objectness * best class probability; drop scores under the threshold."""
    out = []
    for p in preds:
        cls = int(np.argmax(p.class_scores))
        score = p.objectness * float(p.class_scores[cls])
        if score >= cfg.score_threshold:
            out.append((p.box, cls, score))
    return out


def _nms_order(boxes_xyxy: np.ndarray, scores: np.ndarray, position: np.ndarray) -> np.ndarray:
    # descending score, then smaller area, then input position
    area = (boxes_xyxy[:, 2] - boxes_xyxy[:, 0]) * (boxes_xyxy[:, 3] - boxes_xyxy[:, 1])
    return np.lexsort((position, area, -scores))


def nms_indices(boxes_xyxy: np.ndarray, classes: np.ndarray, scores: np.ndarray,
                iou_threshold: float, max_detections: int) -> np.ndarray:
    """Indices kept by per-class greedy NMS, ordered by the global sort key."""
    boxes_xyxy = np.asarray(boxes_xyxy, dtype=np.float64).reshape(-1, 4)
    classes = np.asarray(classes)
    scores = np.asarray(scores, dtype=np.float64)
    keep = []
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        idx = idx[_nms_order(boxes_xyxy[idx], scores[idx], idx)]
        overlaps = iou_matrix(boxes_xyxy[idx], boxes_xyxy[idx])
        alive = np.ones(len(idx), dtype=bool)
        for i in range(len(idx)):
            if not alive[i]:
                continue
            keep.append(idx[i])
            alive[i + 1:] &= overlaps[i, i + 1:] <= iou_threshold
    keep = np.array(keep, dtype=int)
    if keep.size:
        keep = keep[_nms_order(boxes_xyxy[keep], scores[keep], keep)]
    return keep[:max_detections]


def nms(candidates: Sequence[Candidate], cfg: NMSConfig) -> List[Detection]:
    if not candidates:
        return []
    boxes = np.array([c[0].corners() for c in candidates])
    classes = np.array([c[1] for c in candidates])
    scores = np.array([c[2] for c in candidates])
    keep = nms_indices(boxes, classes, scores, cfg.iou_threshold, cfg.max_detections)
    return [Detection(candidates[i][0], int(candidates[i][1]), float(candidates[i][2])) for i in keep]


def detect_batch(model, images: Tensor, cfg: NMSConfig, transforms=None) -> List[List[Detection]]:
    """forward -> decode -> filter -> NMS for each image in the batch.

    ``transforms`` (one letterbox record per image, or None) maps boxes back to
    original image coordinates.
    """
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            raw = model(images)
    finally:
        model.train(was_training)
    d = decode_arrays(raw, model.config)
    cls = d["class_scores"].argmax(axis=1)
    scores = d["objectness"] * d["class_scores"][np.arange(len(cls)), cls]
    results = []
    for i in range(images.shape[0]):
        sel = np.flatnonzero((d["image"] == i) & (scores >= cfg.score_threshold))
        boxes_xyxy = xywh_to_xyxy(d["boxes"][sel])
        keep = nms_indices(boxes_xyxy, cls[sel], scores[sel], cfg.iou_threshold, cfg.max_detections)
        t = transforms[i] if transforms is not None else None
        dets = []
        for k in keep:
            box = Box(*d["boxes"][sel[k]])
            if t is not None:
                box = t.inverse_box(box)
            dets.append(Detection(box, int(cls[sel[k]]), float(scores[sel[k]])))
        results.append(dets)
    return results


def detect(model, image: Tensor, cfg: NMSConfig, transform=None) -> List[Detection]:
    if image.ndim == 3:
        image = Tensor(image.data[None])
    return detect_batch(model, image, cfg, [transform] if transform is not None else None)[0]


def detections_to_json(records: Sequence[dict]) -> str:
    return json.dumps(list(records), indent=2)


def detections_from_json(text: str, class_names: Optional[Sequence[str]] = None) -> List[Tuple[str, Detection]]:
    out = []
    for rec in json.loads(text):
        cls = rec["class"]
        if isinstance(cls, str):
            if class_names is None:
                raise ValueError(f"class name {cls!r} given but no vocabulary supplied")
            cls = list(class_names).index(cls)
        out.append((rec["image"], Detection(Box.from_corners(*rec["box"]), int(cls), float(rec["score"]))))
    return out
