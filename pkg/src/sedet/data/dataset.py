"""On-disk datasets: PPM images, labelme JSON labels, and a manifest.

Manifest format: one ``image_path<TAB>label_path`` pair per line, paths
relative to the manifest's directory. Blank lines and ``#`` comments are
ignored.
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .annotations import Annotation, ClassVocabulary, dump_labelme, parse_labelme
from .image_io import read_ppm, write_ppm
from .synth import SceneConfig, generate_synthetic_scene

MANIFEST = "manifest.txt"


def read_manifest(path) -> List[Tuple[Path, Path]]:
    path = Path(path)
    root = path.parent
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'image<TAB>label'")
        pairs.append((root / parts[0], root / parts[1]))
    return pairs


def write_manifest(path, pairs) -> None:
    path = Path(path)
    root = path.parent
    lines = [f"{Path(i).relative_to(root).as_posix()}\t{Path(l).relative_to(root).as_posix()}" for i, l in pairs]
    path.write_text("".join(line + "\n" for line in lines))


def load_sample(image_path, label_path, vocab: Optional[ClassVocabulary] = None) -> Tuple[np.ndarray, Annotation]:
    img = read_ppm(image_path)
    ann = parse_labelme(Path(label_path).read_text(), vocab, image_id=Path(image_path).stem)
    if (ann.width, ann.height) != (img.shape[1], img.shape[0]):
        raise ValueError(f"{label_path}: size {ann.width}x{ann.height} differs from image {img.shape[1]}x{img.shape[0]}")
    return img, ann


def load_dataset(manifest, vocab: Optional[ClassVocabulary] = None) -> List[Tuple[np.ndarray, Annotation]]:
    return [load_sample(i, l, vocab) for i, l in read_manifest(manifest)]


def write_synthetic_dataset(out_dir, count: int, seed: int, scene: Optional[SceneConfig] = None,
                            vocab: Optional[ClassVocabulary] = None) -> Path:
    """Render ``count`` scenes to ``out_dir``; returns the manifest path.

    Scene ``i`` uses seed ``seed * 100003 + i`` so datasets with different
    seeds do not share scenes.
    """
    out_dir = Path(out_dir)
    scene = scene or SceneConfig()
    vocab = vocab or ClassVocabulary()
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(count):
        name = f"scene_{i:05d}"
        img, ann = generate_synthetic_scene(scene, vocab, seed=seed * 100003 + i, image_id=name)
        ipath = out_dir / "images" / f"{name}.ppm"
        lpath = out_dir / "labels" / f"{name}.json"
        write_ppm(ipath, img)
        lpath.write_text(dump_labelme(ann, vocab, image_path=f"../images/{name}.ppm") + "\n")
        pairs.append((ipath, lpath))
    manifest = out_dir / MANIFEST
    write_manifest(manifest, pairs)
    return manifest
