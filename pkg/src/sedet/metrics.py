"""Detection evaluation: TP/FP/FN matching, precision/recall, AP and mAP."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import Box, iou


@dataclass
class MatchResult:
    """Per-detection outcome for one image.

    ``records`` holds (class_id, score, is_tp, gt_index or -1) in the order
    detections were given; ``gt_counts`` and ``fn`` are per class.
    """

    records: List[Tuple[int, float, bool, int]]
    gt_counts: Dict[int, int]
    fn: Dict[int, int]

    @property
    def tp(self) -> int:
        return sum(r[2] for r in self.records)

    @property
    def fp(self) -> int:
        return sum(not r[2] for r in self.records)

    @property
    def fn_total(self) -> int:
        return sum(self.fn.values())


def match_detections(dets, gts: Sequence[Tuple[Box, int]], iou_threshold: float = 0.5) -> MatchResult:
    """Greedy per-class matching in descending confidence.

    Each detection takes the still-unmatched truth of its class with the
    highest IoU (>= threshold, lowest index on ties) and counts as TP; failing
    that it is an FP. Unmatched truths are FNs.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    gts = list(gts)
    taken = [False] * len(gts)
    records: List[Optional[tuple]] = [None] * len(dets)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    for i in order:
        d = dets[i]
        best, best_iou = -1, iou_threshold
        for j, (gbox, gcls) in enumerate(gts):
            if taken[j] or gcls != d.class_id:
                continue
            o = iou(d.box, gbox)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = j, o
        if best >= 0:
            taken[best] = True
        records[i] = (d.class_id, d.score, best >= 0, best)
    gt_counts: Dict[int, int] = {}
    fn: Dict[int, int] = {}
    for j, (_, c) in enumerate(gts):
        gt_counts[c] = gt_counts.get(c, 0) + 1
        fn[c] = fn.get(c, 0) + (not taken[j])
    return MatchResult(records, gt_counts, fn)


def precision_recall(tp: int, fp: int, fn: int) -> Tuple[float, float]:
    """TP/(TP+FP) and TP/(TP+FN); an empty denominator gives 0."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    confidence: np.ndarray

    @classmethod
    def from_ranked(cls, scores, is_tp, n_gt: int) -> "PRCurve":
        """Curve over detections ranked by descending score (stable on ties)."""
        scores = np.asarray(scores, dtype=np.float64)
        is_tp = np.asarray(is_tp, dtype=bool)
        order = np.argsort(-scores, kind="stable")
        tp = np.cumsum(is_tp[order])
        fp = np.cumsum(~is_tp[order])
        recall = tp / n_gt if n_gt else np.zeros(len(tp))
        precision = tp / np.maximum(tp + fp, 1)
        return cls(recall.astype(np.float64), precision.astype(np.float64), scores[order])


def average_precision(curve: PRCurve) -> float:
    """All-points interpolated area under the precision/recall step function."""
    if len(curve.recall) == 0:
        return 0.0
    mrec = np.concatenate([[0.0], curve.recall, [1.0]])
    mpre = np.concatenate([[0.0], curve.precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_ap(aps: Dict[int, float], gt_counts: Dict[int, int]) -> float:
    """Mean AP over classes with at least one ground-truth instance."""
    evaluable = [c for c, n in gt_counts.items() if n > 0]
    if not evaluable:
        raise ValueError("no class has ground truth; mAP undefined")
    return float(np.mean([aps.get(c, 0.0) for c in sorted(evaluable)]))


@dataclass
class EvalReport:
    class_names: Tuple[str, ...]
    ap: Dict[int, float]
    mAP: float
    curves: Dict[int, PRCurve]
    gt_counts: Dict[int, int]
    tp: int
    fp: int
    fn: int
    iou_threshold: float = 0.5

    @property
    def precision(self) -> float:
        return precision_recall(self.tp, self.fp, self.fn)[0]

    @property
    def recall(self) -> float:
        return precision_recall(self.tp, self.fp, self.fn)[1]

    def to_dict(self) -> dict:
        return {
            "classes": list(self.class_names),
            "iou_threshold": self.iou_threshold,
            "ap": {self.class_names[c]: self.ap[c] for c in sorted(self.ap)},
            "gt_counts": {self.class_names[c]: self.gt_counts.get(c, 0) for c in range(len(self.class_names))},
            "mAP": self.mAP,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        names = tuple(d["classes"])
        idx = {n: i for i, n in enumerate(names)}
        return cls(
            class_names=names,
            ap={idx[n]: float(v) for n, v in d["ap"].items()},
            mAP=float(d["mAP"]),
            curves={},
            gt_counts={idx[n]: int(v) for n, v in d.get("gt_counts", {}).items()},
            tp=int(d["tp"]), fp=int(d["fp"]), fn=int(d["fn"]),
            iou_threshold=float(d.get("iou_threshold", 0.5)),
        )

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "recall", "precision", "confidence"])
        for c in sorted(self.curves):
            cur = self.curves[c]
            for r, p, s in zip(cur.recall, cur.precision, cur.confidence):
                w.writerow([self.class_names[c], repr(float(r)), repr(float(p)), repr(float(s))])
        return buf.getvalue()

    def ap_table(self) -> str:
        lines = [f"{'class':<10} {'gt':>5} {'AP@' + format(self.iou_threshold, '.2f'):>8}"]
        for c in range(len(self.class_names)):
            if self.gt_counts.get(c, 0):
                lines.append(f"{self.class_names[c]:<10} {self.gt_counts[c]:>5} {self.ap.get(c, 0.0):8.4f}")
        lines.append(f"{'mAP':<10} {'':>5} {self.mAP:8.4f}")
        return "\n".join(lines)


def evaluate(per_image: Sequence[Tuple[Sequence, Sequence[Tuple[Box, int]]]], class_names: Sequence[str],
             iou_threshold: float = 0.5) -> EvalReport:
    """Aggregate matches over images into per-class AP, mAP and totals.

    ``per_image`` pairs each image's detections with its ground truth.
    """
    scores: Dict[int, List[float]] = {}
    flags: Dict[int, List[bool]] = {}
    gt_counts: Dict[int, int] = {}
    tp = fp = fn = 0
    for dets, gts in per_image:
        m = match_detections(list(dets), gts, iou_threshold)
        for cls, score, hit, _ in m.records:
            scores.setdefault(cls, []).append(score)
            flags.setdefault(cls, []).append(hit)
        for c, n in m.gt_counts.items():
            gt_counts[c] = gt_counts.get(c, 0) + n
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn_total
    curves, aps = {}, {}
    for c in set(scores) | set(gt_counts):
        curves[c] = PRCurve.from_ranked(scores.get(c, []), flags.get(c, []), gt_counts.get(c, 0))
        aps[c] = average_precision(curves[c]) if gt_counts.get(c, 0) else 0.0
    m_ap = mean_ap(aps, gt_counts) if any(gt_counts.values()) else 0.0
    return EvalReport(tuple(class_names), aps, m_ap, curves, gt_counts, tp, fp, fn, iou_threshold)


@dataclass
class Comparison:
    class_names: Tuple[str, ...]
    rows: List[Tuple[str, float, float, float]]  # class, AP a, AP b, b - a
    map_a: float
    map_b: float

    @property
    def map_delta(self) -> float:
        return self.map_b - self.map_a

    def to_text(self, label_a: str = "a", label_b: str = "b") -> str:
        lines = [f"{'class':<10} {label_a:>10} {label_b:>10} {'delta':>9}"]
        for name, a, b, d in self.rows:
            lines.append(f"{name:<10} {a:10.4f} {b:10.4f} {d:+9.4f}")
        lines.append(f"{'mAP':<10} {self.map_a:10.4f} {self.map_b:10.4f} {self.map_delta:+9.4f}")
        return "\n".join(lines)


def compare_runs(a: EvalReport, b: EvalReport) -> Comparison:
    """Per-class AP and mAP deltas of ``b`` relative to ``a``."""
    if tuple(a.class_names) != tuple(b.class_names):
        raise ValueError(f"class vocabularies differ: {a.class_names} vs {b.class_names}")
    rows = []
    for c, name in enumerate(a.class_names):
        ap_a, ap_b = a.ap.get(c, 0.0), b.ap.get(c, 0.0)
        rows.append((name, ap_a, ap_b, ap_b - ap_a))
    return Comparison(tuple(a.class_names), rows, a.mAP, b.mAP)
