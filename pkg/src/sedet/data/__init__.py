from .anchors import AnchorSet, distortion, kmeans_anchors
from .annotations import (
    BEHAVIOR_CLASSES,
    Annotation,
    AnnotationError,
    ClassVocabulary,
    DegenerateBox,
    MalformedDocument,
    MissingField,
    OutOfBounds,
    UnknownLabel,
    UnsupportedShape,
    dump_labelme,
    parse_labelme,
    to_labelme,
)
from .dataset import load_dataset, read_manifest, write_manifest, write_synthetic_dataset
from .image_io import read_ppm, to_tensor, write_ppm
from .synth import SceneConfig, generate_synthetic_scene
from .transforms import AffineParams, AugmentConfig, LetterboxTransform, letterbox, mosaic, random_affine
