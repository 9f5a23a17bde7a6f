"""PPM (P6) image files and conversions between uint8 images and tensors.

Images in the data pipeline are H x W x 3 uint8 RGB arrays.
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from ..tensor import Tensor

_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m = _HEADER.match(buf)
    if m is None:
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    body = buf[m.end():]
    if len(body) < w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {image.shape}")
    h, w = image.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + image.tobytes())


def to_tensor(images: Sequence[np.ndarray]) -> Tensor:
    """Stack H x W x 3 uint8 images into an N x 3 x H x W tensor scaled to [0, 1]."""
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float64) / 255.0
    return Tensor(arr.transpose(0, 3, 1, 2))


PALETTE = [
    (230, 57, 70), (42, 157, 143), (69, 123, 157), (233, 196, 106),
    (155, 93, 229), (0, 187, 249), (244, 162, 97),
]


def draw_detections(image: np.ndarray, detections, class_names: Sequence[str]) -> np.ndarray:
    out = np.ascontiguousarray(image.copy())
    for det in detections:
        color = PALETTE[det.class_id % len(PALETTE)]
        x1, y1, x2, y2 = (int(round(v)) for v in det.box.corners())
        cv2.rectangle(out, (x1, y1), (x2 - 1, y2 - 1), color, 1)
        label = f"{class_names[det.class_id]} {det.score:.2f}"
        cv2.putText(out, label, (x1, max(y1 - 2, 8)), cv2.FONT_HERSHEY_PLAIN, 0.7, color, 1, cv2.LINE_8)
    return out
