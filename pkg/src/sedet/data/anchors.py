"""Anchor sizes from k-means over box shapes with a 1 - IoU distance."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np


def shape_iou(wh: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """IoU of co-centered boxes, (N, 2) x (K, 2) -> (N, K)."""
    wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
    centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    inter = np.minimum(wh[:, None, 0], centroids[None, :, 0]) * np.minimum(wh[:, None, 1], centroids[None, :, 1])
    union = (wh[:, 0] * wh[:, 1])[:, None] + (centroids[:, 0] * centroids[:, 1])[None, :] - inter
    return inter / union


def distortion(wh, anchors) -> float:
    """Mean over boxes of 1 - IoU with the best-fitting anchor."""
    return float(np.mean(1.0 - shape_iou(wh, anchors).max(axis=1)))


@dataclass
class AnchorSet:
    anchors: np.ndarray  # (k, 2), ascending area

    @property
    def groups(self) -> List[np.ndarray]:
        per = len(self.anchors) // 3
        return [self.anchors[i * per:(i + 1) * per] for i in range(3)]

    def as_list(self) -> List[List[float]]:
        return [[float(w), float(h)] for w, h in self.anchors]

    def to_json(self) -> str:
        return json.dumps({"anchors": self.as_list(), "strides": [8, 16, 32]}, indent=2)

    def table(self) -> str:
        lines = ["stride      w        h"]
        for stride, group in zip((8, 16, 32), self.groups):
            for w, h in group:
                lines.append(f"{stride:>6} {w:8.2f} {h:8.2f}")
        return "\n".join(lines)


def _kmeanspp(wh: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(wh)
    chosen = [int(rng.integers(n))]
    for _ in range(1, k):
        d = 1.0 - shape_iou(wh, wh[chosen]).max(axis=1)
        d2 = d * d
        total = d2.sum()
        if total <= 0:
            chosen.append(int(rng.integers(n)))
        else:
            chosen.append(int(rng.choice(n, p=d2 / total)))
    return wh[chosen].copy()


def kmeans_anchors(boxes: Sequence[Sequence[float]], k: int = 9, seed: int = 0, max_iter: int = 300) -> AnchorSet:
    """Cluster (w, h) pairs into ``k`` anchors.

    Seeded k-means++ start; assignment by smallest 1 - IoU; centroids are
    member means; an emptied cluster is moved onto the box farthest from its
    current centroid. Stops when assignments repeat or after ``max_iter``.
    """
    wh = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    if len(wh) < k:
        raise ValueError(f"need at least {k} boxes for k-means, got {len(wh)}")
    if k % 3:
        raise ValueError(f"k must split evenly over 3 scales, got {k}")
    if np.any(wh <= 0):
        raise ValueError("box sizes must be positive")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(wh, k, rng)
    assign = None
    for _ in range(max_iter):
        dist = 1.0 - shape_iou(wh, centroids)
        new = dist.argmin(axis=1)
        nearest = dist[np.arange(len(wh)), new]
        for c in range(k):
            if not np.any(new == c):
                far = int(nearest.argmax())
                new[far] = c
                nearest[far] = -1.0
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            centroids[c] = wh[assign == c].mean(axis=0)
    order = np.argsort(centroids[:, 0] * centroids[:, 1], kind="stable")
    return AnchorSet(centroids[order])
