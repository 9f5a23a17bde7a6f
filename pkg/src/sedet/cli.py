"""Command-line entry point: ``sedet [--config F] [--seed N] [--out D] <verb> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .data.anchors import AnchorSet, distortion, kmeans_anchors
from .data.annotations import AnnotationError, ClassVocabulary
from .data.dataset import load_dataset, write_synthetic_dataset
from .data.image_io import draw_detections, read_ppm, to_tensor, write_ppm
from .data.synth import SceneConfig
from .data.transforms import letterbox
from .metrics import EvalReport, compare_runs
from .model import DEFAULT_ANCHORS, ConfigError, DetectorModel, load_checkpoint
from .postprocess import NMSConfig, detect_batch, detections_to_json
from .train import NumericError, RunConfig, evaluate_model, train

log = logging.getLogger("sedet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def checkpoint_classes(checkpoint) -> List[str]:
    """Class names stored with a checkpoint (falls back to the default vocabulary)."""
    meta = Path(checkpoint) / "meta.json"
    model_cfg = json.loads((Path(checkpoint) / "config.json").read_text())
    if meta.exists():
        names = json.loads(meta.read_text()).get("classes")
        if names:
            return list(names)
    return list(ClassVocabulary().names[:model_cfg.get("num_classes", 7)])


def _load_samples(manifest, vocab):
    try:
        return load_dataset(manifest, vocab)
    except AnnotationError:
        raise
    except (OSError, ValueError) as e:
        raise DataError(f"{manifest}: {e}") from e


def _load_model(checkpoint):
    try:
        return load_checkpoint(checkpoint), checkpoint_classes(checkpoint)
    except FileNotFoundError as e:
        raise DataError(f"cannot read checkpoint {checkpoint}: {e}") from e


# ---------------------------------------------------------------- commands

def cmd_synth(out_dir, count: int, seed: int = 0, scene: Optional[SceneConfig] = None,
              classes: Optional[Sequence[str]] = None) -> Path:
    """Write ``count`` synthetic scenes and a manifest under ``out_dir``."""
    if count < 0:
        raise UsageError("count must be >= 0")
    vocab = ClassVocabulary(tuple(classes)) if classes else ClassVocabulary()
    try:
        return write_synthetic_dataset(out_dir, count, seed, scene, vocab)
    except OSError as e:
        raise DataError(f"cannot write dataset to {out_dir}: {e}") from e


def cmd_anchors(manifest, k: int = 9, seed: int = 0, out_path=None,
                classes: Optional[Sequence[str]] = None) -> AnchorSet:
    """k-means anchors for the boxes listed in ``manifest``; optionally saved as JSON."""
    vocab = ClassVocabulary(tuple(classes)) if classes else None
    samples = _load_samples(manifest, vocab)
    wh = [(b.w, b.h) for _, ann in samples for b in ann.boxes]
    if len(wh) < k:
        raise DataError(f"{manifest}: {len(wh)} boxes, need at least k={k}")
    anchors = kmeans_anchors(wh, k=k, seed=seed)
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(anchors.to_json() + "\n")
    log.info("mean 1-IoU: adapted %.4f, default %.4f", distortion(wh, anchors.anchors),
             distortion(wh, np.asarray(DEFAULT_ANCHORS, dtype=np.float64).reshape(-1, 2)))
    return anchors


def cmd_train(cfg: RunConfig, out_dir=None) -> dict:
    """Train per ``cfg``; returns the summary from :func:`sedet.train.train`."""
    return train(cfg, out_dir=out_dir)


def cmd_eval(checkpoints: Sequence, manifest, nms_cfg: Optional[NMSConfig] = None, out_dir=None,
             iou_threshold: float = 0.5) -> List[EvalReport]:
    """Evaluate each checkpoint on ``manifest``.

    Writes ``report.json``, ``pr_curves.csv`` and ``ap_table.txt`` (one
    subdirectory per checkpoint when several are given) plus
    ``comparison.txt`` when there are exactly two.
    """
    if not checkpoints:
        raise UsageError("at least one checkpoint is required")
    nms_cfg = nms_cfg or NMSConfig()
    reports = []
    vocab_names = None
    for n, ckpt in enumerate(checkpoints):
        model, names = _load_model(ckpt)
        if vocab_names is not None and names != vocab_names:
            raise DataError(f"vocabulary of {ckpt} differs from {checkpoints[0]}")
        vocab_names = names
        if len(names) != model.config.num_classes:
            raise DataError(f"{ckpt}: {len(names)} class names for {model.config.num_classes} outputs")
        samples = _load_samples(manifest, ClassVocabulary(tuple(names)))
        if not samples:
            raise DataError(f"{manifest}: manifest is empty")
        report = evaluate_model(model, samples, nms_cfg, names, iou_threshold)
        reports.append(report)
        if out_dir is not None:
            target = Path(out_dir) if len(checkpoints) == 1 else Path(out_dir) / f"run_{n}"
            target.mkdir(parents=True, exist_ok=True)
            (target / "report.json").write_text(report.to_json() + "\n")
            (target / "pr_curves.csv").write_text(report.curves_csv())
            (target / "ap_table.txt").write_text(report.ap_table() + "\n")
    if out_dir is not None and len(reports) == 2:
        table = compare_runs(reports[0], reports[1]).to_text("run_0", "run_1")
        (Path(out_dir) / "comparison.txt").write_text(table + "\n")
    return reports


def cmd_detect(checkpoint, images: Sequence, nms_cfg: Optional[NMSConfig] = None, out_dir=None,
               draw: bool = False, model: Optional[DetectorModel] = None, classes=None):
    """Detect objects in PPM images.

    Returns ``(records, failures)``: detection records in original image
    coordinates and a list of ``(path, message)`` for unreadable files, which
    are skipped rather than aborting the batch.
    """
    nms_cfg = nms_cfg or NMSConfig()
    if model is None:
        model, classes = _load_model(checkpoint)
    classes = classes or checkpoint_classes(checkpoint)
    size = model.config.input_size
    records, failures = [], []
    for path in images:
        try:
            img = read_ppm(path)
        except (OSError, ValueError) as e:
            log.error("skipping %s: %s", path, e)
            failures.append((str(path), str(e)))
            continue
        boxed, _, t = letterbox(img, None, size)
        dets = detect_batch(model, to_tensor([boxed]), nms_cfg, [t])[0]
        records += [d.to_record(str(path), classes) for d in dets]
        if draw and out_dir is not None:
            target = Path(out_dir) / "annotated"
            target.mkdir(parents=True, exist_ok=True)
            write_ppm(target / f"{Path(path).stem}.ppm", draw_detections(img, dets, classes))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "detections.json").write_text(detections_to_json(records) + "\n")
    return records, failures


def cmd_compare(report_a, report_b, out_dir=None) -> str:
    a = EvalReport.from_dict(json.loads(Path(report_a).read_text()))
    b = EvalReport.from_dict(json.loads(Path(report_b).read_text()))
    try:
        text = compare_runs(a, b).to_text(Path(report_a).parent.name or "a", Path(report_b).parent.name or "b")
    except ValueError as e:
        raise DataError(str(e)) from e
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "comparison.txt").write_text(text + "\n")
    return text


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_nms_flags(p):
    p.add_argument("--score-threshold", type=float, default=None)
    p.add_argument("--iou-threshold", type=float, default=None)
    p.add_argument("--max-detections", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sedet", description="SE-attention single-stage detector toolkit")
    parser.add_argument("--config", help="run configuration JSON")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a seeded synthetic dataset")
    p.add_argument("--count", type=int, default=100)

    p = sub.add_parser("anchors", help="k-means anchors for a dataset")
    p.add_argument("manifest")
    p.add_argument("-k", type=int, default=9)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--anchors", help="anchor JSON from the anchors verb")

    p = sub.add_parser("eval", help="evaluate checkpoint(s) on a dataset")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--manifest", required=True)
    p.add_argument("--match-iou", type=float, default=0.5)
    _add_nms_flags(p)

    p = sub.add_parser("detect", help="run detection on PPM images")
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="*")
    p.add_argument("--draw", action="store_true", help="also write annotated images")
    _add_nms_flags(p)

    p = sub.add_parser("compare", help="compare two report.json files")
    p.add_argument("report_a")
    p.add_argument("report_b")
    return parser


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    return cfg


def _nms_from(args, cfg: Optional[RunConfig]) -> NMSConfig:
    base = (cfg.eval_nms or cfg.nms) if cfg is not None else NMSConfig()
    return NMSConfig(
        score_threshold=base.score_threshold if args.score_threshold is None else args.score_threshold,
        iou_threshold=base.iou_threshold if args.iou_threshold is None else args.iou_threshold,
        max_detections=base.max_detections if args.max_detections is None else args.max_detections,
    )


def _dispatch(args) -> int:
    cfg = _run_config(args) if args.config else None
    classes = cfg.classes if cfg is not None else None
    seed = args.seed if args.seed is not None else (cfg.seed if cfg is not None else 0)
    out = args.out
    if args.verb == "synth":
        manifest = cmd_synth(out or "data/synth", args.count, seed, classes=classes)
        print(manifest)
    elif args.verb == "anchors":
        out_path = Path(out) / "anchors.json" if out else None
        print(cmd_anchors(args.manifest, args.k, seed, out_path, classes).table())
    elif args.verb == "train":
        cfg = cfg or _run_config(args)
        if args.anchors:
            cfg.network.anchors = json.loads(Path(args.anchors).read_text())["anchors"]
            cfg.network.validate()
        if not cfg.train_manifest:
            raise UsageError("train_manifest must be set in the config")
        res = cmd_train(cfg)
        print(f"best mAP@0.5 {res['best_mAP']:.4f} at epoch {res['best_epoch']}")
    elif args.verb == "eval":
        reports = cmd_eval(args.checkpoints, args.manifest, _nms_from(args, cfg), out, args.match_iou)
        for ckpt, rep in zip(args.checkpoints, reports):
            print(f"== {ckpt}\n{rep.ap_table()}")
        if len(reports) == 2:
            print(compare_runs(reports[0], reports[1]).to_text("run_0", "run_1"))
    elif args.verb == "detect":
        records, failures = cmd_detect(args.checkpoint, args.images, _nms_from(args, cfg), out, args.draw)
        print(detections_to_json(records))
        if failures:
            return EXIT_DATA
    elif args.verb == "compare":
        print(cmd_compare(args.report_a, args.report_b, out))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _dispatch(args)
    except (UsageError, ConfigError) as e:
        print(f"sedet: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"sedet: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, AnnotationError, OSError, json.JSONDecodeError) as e:
        print(f"sedet: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        # remaining ValueErrors come from config validation
        print(f"sedet: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
