"""Target assignment and the CIoU-based composite detection loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .boxes import Box, ciou_tensor
from .ops import ShapeError
from .tensor import Tensor, bce_with_logits, concat, sigmoid

ANCHOR_RATIO_LIMIT = 4.0


@dataclass
class LossWeights:
    box: float = 0.05
    obj: float = 1.0
    cls: float = 0.5
    balance: Tuple[float, float, float] = (4.0, 1.0, 0.4)

    def __post_init__(self):
        if min(self.box, self.obj, self.cls) < 0 or min(self.balance) < 0:
            raise ValueError("loss weights must be non-negative")
        self.balance = tuple(float(b) for b in self.balance)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


@dataclass
class TargetAssignment:
    """Flat list of positive (image, scale, cell, anchor) slots and their truths.

    ``boxes`` are center-form pixels; ``cell_x``/``cell_y`` index the grid of
    ``scale``.
    """

    image: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    scale: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    cell_x: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    cell_y: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    anchor: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return len(self.image)

    def keys(self) -> List[tuple]:
        return list(zip(self.image.tolist(), self.scale.tolist(), self.cell_y.tolist(),
                        self.cell_x.tolist(), self.anchor.tolist()))

    @classmethod
    def from_rows(cls, rows: Sequence[tuple]) -> "TargetAssignment":
        if not rows:
            return cls()
        image, scale, cy, cx, anchor, boxes, classes = zip(*rows)
        return cls(np.array(image, dtype=int), np.array(scale, dtype=int), np.array(cx, dtype=int),
                   np.array(cy, dtype=int), np.array(anchor, dtype=int),
                   np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(classes, dtype=int))

    @classmethod
    def merge(cls, parts: Sequence["TargetAssignment"]) -> "TargetAssignment":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls()
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("image", "scale", "cell_x", "cell_y", "anchor", "boxes", "classes")))


@dataclass
class LossBreakdown:
    box: Tensor
    obj: Tensor
    cls: Tensor
    total: Tensor

    def values(self) -> dict:
        return {k: float(getattr(self, k).data) for k in ("box", "obj", "cls", "total")}


def anchor_ratio(gt_wh, anchor_wh) -> float:
    rw = gt_wh[0] / anchor_wh[0]
    rh = gt_wh[1] / anchor_wh[1]
    return max(rw, 1 / rw, rh, 1 / rh)


def assign_targets(gts: Sequence[Tuple[Box, int]], config, image: int = 0) -> TargetAssignment:
    """Match ground truths to (scale, cell, anchor) slots.

    The cell holding a truth's center is responsible at every scale, for each
    anchor whose side ratios to the truth stay below 4. When two truths claim
    the same slot the larger one keeps it.
    """
    anchors = config.anchor_array()
    order = sorted(range(len(gts)), key=lambda i: -gts[i][0].area)
    claimed = set()
    rows = []
    for i in order:
        box, cls = gts[i]
        for s, stride in enumerate(config.strides):
            g = config.input_size // stride
            cx = min(max(int(box.x // stride), 0), g - 1)
            cy = min(max(int(box.y // stride), 0), g - 1)
            for a in range(config.anchors_per_scale):
                if anchor_ratio((box.w, box.h), anchors[s, a]) >= ANCHOR_RATIO_LIMIT:
                    continue
                key = (s, cy, cx, a)
                if key in claimed:
                    continue
                claimed.add(key)
                rows.append((image, s, cy, cx, a, box.as_array(), cls))
    rows.sort(key=lambda r: r[:5])
    return TargetAssignment.from_rows(rows)


def assign_batch(batch_gts: Sequence[Sequence[Tuple[Box, int]]], config) -> TargetAssignment:
    return TargetAssignment.merge([assign_targets(g, config, image=i) for i, g in enumerate(batch_gts)])


def _decode_matched(p: Tensor, targets_sel, anchors_px: np.ndarray, stride: float):
    """Predicted centers/sizes in grid units for the gathered (M, 5+C) rows."""
    grid = np.stack([targets_sel["cell_x"], targets_sel["cell_y"]], axis=1).astype(np.float64)
    pxy = sigmoid(p[:, 0:2]) * 2.0 - 0.5 + grid
    pwh = (sigmoid(p[:, 2:4]) * 2.0) ** 2 * (anchors_px / stride)
    return pxy, pwh


def detection_loss(raw: Sequence[Tensor], targets: TargetAssignment, config,
                   weights: Optional[LossWeights] = None,
                   objectness_iou: Optional[np.ndarray] = None) -> LossBreakdown:
    """Composite loss: lambda_box * box + lambda_obj * obj + lambda_cls * cls.

    box: mean of (1 - CIoU) over matched slots. obj: per-scale mean BCE of
    objectness logits, positives targeting the detached CIoU clamped to [0, 1],
    weighted by ``weights.balance``. cls: mean one-vs-all BCE over matched slots.
    ``objectness_iou`` (aligned with ``targets``) freezes the positive targets,
    which makes the loss a fixed function of ``raw`` for gradient checking.
    """
    weights = weights or LossWeights()
    if len(raw) != 3:
        raise ShapeError(f"expected 3 prediction maps, got {len(raw)}")
    n = raw[0].shape[0]
    if n == 0:
        raise ValueError("detection_loss needs a non-empty batch")
    a_count, nc = config.anchors_per_scale, config.num_classes
    anchors = config.anchor_array()

    box_terms, cls_terms = [], []
    obj_total = None
    for s, (t, stride) in enumerate(zip(raw, config.strides)):
        g = config.input_size // stride
        if t.shape != (n, a_count * (5 + nc), g, g):
            raise ShapeError(f"scale {s}: raw shape {t.shape} != {(n, a_count * (5 + nc), g, g)}")
        r = t.reshape(n, a_count, 5 + nc, g, g)
        tobj = np.zeros((n, a_count, g, g))
        sel = np.flatnonzero(targets.scale == s)
        if sel.size:
            b, a = targets.image[sel], targets.anchor[sel]
            cy, cx = targets.cell_y[sel], targets.cell_x[sel]
            p = r[b, a, :, cy, cx]  # (M, 5 + C)
            pxy, pwh = _decode_matched(p, {"cell_x": cx, "cell_y": cy}, anchors[s, a], stride)
            ci = ciou_tensor(pxy, pwh, targets.boxes[sel] / stride)
            box_terms.append(1.0 - ci)
            iou_t = ci.data if objectness_iou is None else np.asarray(objectness_iou)[sel]
            tobj[b, a, cy, cx] = np.clip(iou_t, 0.0, 1.0)
            onehot = np.zeros((sel.size, nc))
            onehot[np.arange(sel.size), targets.classes[sel]] = 1.0
            cls_terms.append(bce_with_logits(p[:, 5:], onehot))
        term = bce_with_logits(r[:, :, 4], tobj).mean() * weights.balance[s]
        obj_total = term if obj_total is None else obj_total + term

    zero = Tensor(0.0)
    box = concat(box_terms).mean() if box_terms else zero
    cls = concat([c.reshape(-1) for c in cls_terms]).mean() if cls_terms else zero
    total = box * weights.box + obj_total * weights.obj + cls * weights.cls
    return LossBreakdown(box=box, obj=obj_total, cls=cls, total=total)
