"""Class vocabulary, per-image annotations, and labelme JSON ingestion."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from ..boxes import Box

BEHAVIOR_CLASSES = ("uphead", "uphand", "reading", "writing", "stand", "turn", "discuss")


class AnnotationError(ValueError):
    """Base class for annotation ingestion failures."""


class MalformedDocument(AnnotationError):
    pass


class MissingField(AnnotationError):
    pass


class UnknownLabel(AnnotationError):
    def __init__(self, label: str):
        super().__init__(f"unknown label {label!r}")
        self.label = label


class DegenerateBox(AnnotationError):
    pass


class OutOfBounds(AnnotationError):
    pass


class UnsupportedShape(AnnotationError):
    pass


@dataclass(frozen=True)
class ClassVocabulary:
    names: Tuple[str, ...] = BEHAVIOR_CLASSES

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate class names in {self.names}")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, label: str) -> int:
        try:
            return self.names.index(label)
        except ValueError:
            raise UnknownLabel(label) from None

    def __getitem__(self, i: int) -> str:
        return self.names[i]


@dataclass
class Annotation:
    image_id: str
    width: int
    height: int
    objects: List[Tuple[Box, int]] = field(default_factory=list)

    def validate(self, num_classes: int, tol: float = 1e-6) -> "Annotation":
        for box, cls in self.objects:
            if not 0 <= cls < num_classes:
                raise UnknownLabel(str(cls))
            if box.w <= 0 or box.h <= 0:
                raise DegenerateBox(f"{self.image_id}: zero-area box {box}")
            if box.x1 < -tol or box.y1 < -tol or box.x2 > self.width + tol or box.y2 > self.height + tol:
                raise OutOfBounds(f"{self.image_id}: box {box.corners()} outside {self.width}x{self.height}")
        return self

    @property
    def boxes(self) -> List[Box]:
        return [b for b, _ in self.objects]

    @property
    def classes(self) -> List[int]:
        return [c for _, c in self.objects]


def _require(doc: dict, key: str, where: str = "document"):
    if key not in doc:
        raise MissingField(f"{where} is missing {key!r}")
    return doc[key]


def parse_labelme(text: str, vocab: Optional[ClassVocabulary] = None, image_id: str = "") -> Annotation:
    """Parse a labelme document holding rectangle shapes.

    Corner order is irrelevant; each rectangle becomes a center-form box.
    """
    vocab = vocab or ClassVocabulary()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise MalformedDocument(f"invalid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise MalformedDocument("labelme document must be a JSON object")
    width = _require(doc, "imageWidth")
    height = _require(doc, "imageHeight")
    shapes = _require(doc, "shapes")
    if not isinstance(shapes, list):
        raise MalformedDocument("'shapes' must be a list")
    if not isinstance(width, (int, float)) or not isinstance(height, (int, float)) or width <= 0 or height <= 0:
        raise MalformedDocument(f"bad image size {width!r} x {height!r}")
    ann = Annotation(image_id or doc.get("imagePath", ""), int(width), int(height))
    for i, shape in enumerate(shapes):
        where = f"shapes[{i}]"
        if not isinstance(shape, dict):
            raise MalformedDocument(f"{where} must be an object")
        label = _require(shape, "label", where)
        points = _require(shape, "points", where)
        kind = shape.get("shape_type", "rectangle")
        if kind != "rectangle":
            raise UnsupportedShape(f"{where}: shape_type {kind!r} is not a rectangle")
        try:
            (x1, y1), (x2, y2) = points
            x1, y1, x2, y2 = float(x1), float(y1), float(x2), float(y2)
        except (TypeError, ValueError):
            raise MalformedDocument(f"{where}: rectangle needs exactly two [x, y] points") from None
        cls = vocab.index(label)
        box = Box.from_corners(x1, y1, x2, y2)
        if box.w <= 0 or box.h <= 0:
            raise DegenerateBox(f"{where}: degenerate rectangle {points}")
        ann.objects.append((box, cls))
    return ann.validate(len(vocab))


def to_labelme(ann: Annotation, vocab: Optional[ClassVocabulary] = None, image_path: str = "") -> dict:
    vocab = vocab or ClassVocabulary()
    shapes = [
        {
            "label": vocab[cls],
            "points": [[box.x1, box.y1], [box.x2, box.y2]],
            "group_id": None,
            "shape_type": "rectangle",
            "flags": {},
        }
        for box, cls in ann.objects
    ]
    return {
        "version": "5.0.1",
        "flags": {},
        "shapes": shapes,
        "imagePath": image_path or ann.image_id,
        "imageData": None,
        "imageHeight": ann.height,
        "imageWidth": ann.width,
    }


def dump_labelme(ann: Annotation, vocab: Optional[ClassVocabulary] = None, image_path: str = "") -> str:
    return json.dumps(to_labelme(ann, vocab, image_path), indent=2)
