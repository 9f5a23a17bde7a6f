"""Acceptance criteria A1-A8, one test each.

Every test prints a ``Ax PASS|FAIL`` line (collected again in the terminal
summary) and asserts on the same verdict.
"""

import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import channel_means_loops, greedy_nms_reference, integer_iou, raster_iou, sweep_ap
from sedet import ops
from sedet.boxes import Box, ciou, iou
from sedet.cli import cmd_anchors, cmd_detect, cmd_eval, cmd_synth, cmd_train
from sedet.data.anchors import distortion, kmeans_anchors
from sedet.data.dataset import load_dataset, read_manifest
from sedet.data.transforms import AugmentConfig
from sedet.gradcheck import gradcheck
from sedet.loss import LossWeights, assign_batch, detection_loss
from sedet.metrics import PRCurve, average_precision, precision_recall
from sedet.model import DEFAULT_ANCHORS, NetworkConfig, build, save_checkpoint
from sedet.postprocess import NMSConfig, nms
from sedet.tensor import Tensor, concat, no_grad
from sedet.train import OptimizerConfig, RunConfig
from test_blocks import block_cases, hand_se
from test_tensor import _op_cases

GRAD_TOL = 1e-4
SEEDS = range(5)


# ---------------------------------------------------------------- A1

def test_a1_geometry_oracle(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    coords = rng.integers(0, 65, size=(10_000, 2, 4))
    iou_mismatch = ciou_violations = 0
    worst_identity = 0.0
    for a, b in coords:
        # sort corners; nudge so both boxes have positive area (CIoU needs a real truth box)
        ba = (min(a[0], a[2]), min(a[1], a[3]), max(a[0], a[2]), max(a[1], a[3]))
        bb = (min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]), max(b[1], b[3]))
        ba = (ba[0], ba[1], ba[2] + (ba[2] == ba[0]), ba[3] + (ba[3] == ba[1]))
        bb = (bb[0], bb[1], bb[2] + (bb[2] == bb[0]), bb[3] + (bb[3] == bb[1]))
        box_a, box_b = Box.from_corners(*ba), Box.from_corners(*bb)
        v = iou(box_a, box_b)
        iou_mismatch += v != raster_iou(ba, bb, size=66)
        ciou_violations += ciou(box_a, box_b) > v
        worst_identity = max(worst_identity, abs(ciou(box_a, box_a) - 1.0))
    elapsed = time.perf_counter() - t0
    ok = iou_mismatch == 0 and ciou_violations == 0 and worst_identity <= 1e-12 and elapsed < 10
    assert criterion("A1", ok, f"iou mismatches {iou_mismatch}/10000, ciou>iou {ciou_violations}, "
                               f"|ciou(b,b)-1| {worst_identity:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- A2

def _loss_case(seed):
    cfg = NetworkConfig(input_size=64, width_multiple=0.125, depth_multiple=0.33)
    rng = np.random.default_rng(seed)
    raw = [Tensor(rng.normal(0, 1, (2, cfg.head_channels, g, g)), requires_grad=True) for g in cfg.grid_sizes]
    gts = [[(Box(*rng.uniform(8, 56, 2), *rng.uniform(8, 40, 2)), int(rng.integers(7))) for _ in range(3)]
           for _ in range(2)]
    targets = assign_batch(gts, cfg)
    iou_t = rng.uniform(0.2, 0.9, len(targets))
    return gradcheck(lambda: detection_loss(raw, targets, cfg, LossWeights(), objectness_iou=iou_t).total, raw,
                     samples_per_input=60, seed=seed)


def _network_case(seed):
    cfg = NetworkConfig(input_size=32, width_multiple=0.125, depth_multiple=0.33, seed=seed)
    model = build(cfg).train()
    x = Tensor(np.random.default_rng(seed).uniform(size=(8, 3, 32, 32)), requires_grad=True)
    return gradcheck(lambda: concat([o.reshape(-1) for o in model(x)]), [x] + model.parameters(),
                     samples_per_input=1, seed=seed)


def test_a2_gradient_suite(criterion):
    t0 = time.perf_counter()
    worst = {"ops": 0.0, "blocks": 0.0, "network": 0.0, "loss": 0.0}
    n_ops = n_blocks = 0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        for name, fn, inputs in _op_cases(rng):
            worst["ops"] = max(worst["ops"], gradcheck(fn, inputs, seed=seed))
            n_ops += 1
        for training in (True, False):
            for name, block, shape in block_cases(rng):
                block.train(training)
                for _, buf in block.named_buffers():
                    if buf.ndim:
                        buf[:] = rng.uniform(0.5, 1.5, buf.shape)
                x = Tensor(rng.normal(size=shape), requires_grad=True)
                err = gradcheck(lambda: block(x), [x] + block.parameters(), samples_per_input=6, seed=seed)
                worst["blocks"] = max(worst["blocks"], err)
                n_blocks += 1
        worst["network"] = max(worst["network"], _network_case(seed))
        worst["loss"] = max(worst["loss"], _loss_case(seed))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= GRAD_TOL and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert criterion("A2", ok, f"max rel err {detail} ({n_ops} op / {n_blocks} block checks, "
                               f"{len(SEEDS)} seeds), {elapsed:.1f}s")


# ---------------------------------------------------------------- A3

def test_a3_nms_equivalence(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    mismatches = not_idempotent = 0
    for _ in range(1000):
        n = int(rng.integers(0, 65))
        n_classes = int(rng.integers(1, 8))
        raw = []
        for _ in range(n):
            x1, x2 = sorted(rng.integers(0, 65, 2))
            y1, y2 = sorted(rng.integers(0, 65, 2))
            raw.append(((int(x1), int(y1), int(x2) + 1, int(y2) + 1), int(rng.integers(n_classes)),
                        round(float(rng.uniform()), 2)))
        cfg = NMSConfig(iou_threshold=float(rng.choice([0.3, 0.45, 0.5, 0.7])),
                        max_detections=int(rng.integers(1, 80)))
        cands = [(Box.from_corners(*c), cl, s) for c, cl, s in raw]
        out = nms(cands, cfg)
        expected = greedy_nms_reference(raw, cfg.iou_threshold, cfg.max_detections, integer_iou)
        got = [(tuple(d.box.corners()), d.class_id, d.score) for d in out]
        want = [(tuple(float(v) for v in raw[i][0]), raw[i][1], raw[i][2]) for i in expected]
        mismatches += got != want
        not_idempotent += nms([(d.box, d.class_id, d.score) for d in out], cfg) != out
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and not_idempotent == 0 and elapsed < 10
    assert criterion("A3", ok, f"keep-set mismatches {mismatches}/1000, non-idempotent {not_idempotent}, "
                               f"{elapsed:.1f}s")


# ---------------------------------------------------------------- A4

def test_a4_metric_oracle(criterion):
    t0 = time.perf_counter()
    hand = average_precision(PRCurve.from_ranked([0.9, 0.8, 0.7], [True, False, True], 2))
    hand_err = abs(hand - 5 / 6)
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 11))
        scores = rng.permutation(n) / n + rng.uniform(0, 1e-3, n)
        is_tp = rng.uniform(size=n) < 0.6
        n_gt = max(int(is_tp.sum() + rng.integers(0, 3)), 1)
        ap = average_precision(PRCurve.from_ranked(scores, is_tp, n_gt))
        worst = max(worst, abs(ap - sweep_ap(scores.tolist(), is_tp.tolist(), n_gt)))
    arithmetic = (precision_recall(8, 2, 2) == (0.8, 0.8) and precision_recall(0, 0, 4)[0] == 0.0
                  and precision_recall(3, 1, 0) == (0.75, 1.0))
    elapsed = time.perf_counter() - t0
    ok = hand_err <= 1e-9 and worst <= 1e-9 and arithmetic and elapsed < 10
    assert criterion("A4", ok, f"5/6 example err {hand_err:.1e}, 200 random max err {worst:.1e}, "
                               f"P/R arithmetic {'exact' if arithmetic else 'WRONG'}, {elapsed:.2f}s")


# ---------------------------------------------------------------- A5

def overfit_config(manifest, out_dir, anchors):
    # overfit setting: no augmentation, lr 0.05, heavier box term
    return RunConfig(
        network=NetworkConfig(input_size=160, width_multiple=0.25, depth_multiple=0.34, anchors=anchors),
        loss=LossWeights(box=0.2),
        augment=AugmentConfig.disabled(),
        optimizer=OptimizerConfig(lr=0.05, epochs=300, batch_size=4),
        train_manifest=str(manifest),
        out_dir=str(out_dir),
        eval_interval=50,
    )


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    t0 = time.perf_counter()
    manifest = cmd_synth(root / "data", 8, seed=0)
    anchors = cmd_anchors(manifest, k=9, seed=0).as_list()
    cfg = overfit_config(manifest, root / "run", anchors)
    summary = cmd_train(cfg)
    return {"root": root, "manifest": manifest, "cfg": cfg, "summary": summary,
            "train_seconds": time.perf_counter() - t0}


def test_a5_overfit_end_to_end(criterion, overfit_run):
    t0 = time.perf_counter()
    manifest, cfg = overfit_run["manifest"], overfit_run["cfg"]
    final = overfit_run["root"] / "run" / "last"
    (report,) = cmd_eval([final], manifest)
    samples = load_dataset(manifest)
    images = [p for p, _ in read_manifest(manifest)]
    records, failures = cmd_detect(final, images)
    worst_iou = 1.0
    for path, (_, ann) in zip(images, samples):
        dets = [r for r in records if r["image"] == str(path)]
        for box, cls in ann.objects:
            name = cfg.classes[cls]
            best = max((iou(Box.from_corners(*r["box"]), box) for r in dets if r["class"] == name), default=0.0)
            worst_iou = min(worst_iou, best)
    elapsed = overfit_run["train_seconds"] + time.perf_counter() - t0
    ok = report.mAP >= 0.9 and worst_iou >= 0.8 and not failures and elapsed < 30 * 60
    assert criterion("A5", ok, f"final mAP@0.5 {report.mAP:.4f} (P {report.precision:.3f} R {report.recall:.3f}), "
                               f"worst gt IoU {worst_iou:.3f} over {sum(len(a.objects) for _, a in samples)} objects, "
                               f"{elapsed / 60:.1f} min")


def test_trained_model_beats_random_weights_on_held_out_scenes(overfit_run, tmp_path):
    held_out = cmd_synth(tmp_path / "held_out", 8, seed=1)
    cfg = overfit_run["cfg"]
    save_checkpoint(build(cfg.network), tmp_path / "random", extra={"classes": list(cfg.classes)})
    trained, random_weights = cmd_eval([overfit_run["root"] / "run" / "last", tmp_path / "random"], held_out)
    assert trained.mAP > random_weights.mAP


# ---------------------------------------------------------------- A6

def test_a6_se_mechanism(criterion):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 6, 5, 7))
    squeeze_err = float(np.abs(ops.global_avg_pool(Tensor(x)).data.reshape(2, 6, 1, 1)
                               - channel_means_loops(x)).max())
    se = hand_se()
    xin = np.stack([np.full((3, 4), 1.0), np.full((3, 4), 3.0)])[None]
    s_expected = np.array([1 / (1 + math.exp(1.25)), 1 / (1 + math.exp(-1.25))])
    hand_err = float(np.abs(se.excitation(Tensor(xin)).data[0] - s_expected).max())

    model = build(NetworkConfig(input_size=64, width_multiple=0.125, depth_multiple=0.33)).train()
    non_degenerate = all(np.abs(p.data).max() > 0 for p in model.se.parameters())
    xb = Tensor(np.random.default_rng(0).uniform(size=(2, 3, 64, 64)))
    with no_grad():
        on = model(xb, use_se=True)
        off = model(xb, use_se=False)
        on_again = model(xb, use_se=True)
    diff = max(float(np.abs(a.data - b.data).max()) for a, b in zip(on, off))
    repeat = max(float(np.abs(a.data - b.data).max()) for a, b in zip(on, on_again))
    ok = squeeze_err <= 1e-12 and hand_err <= 1e-12 and non_degenerate and diff > 0 and repeat == 0
    assert criterion("A6", ok, f"squeeze err {squeeze_err:.1e}, 2-channel example err {hand_err:.1e}, "
                               f"SE on/off max output diff {diff:.3e}")


# ---------------------------------------------------------------- A7

def _pipeline(root: Path):
    """Run synth, train and eval under ``root``; return {relative path: bytes}."""
    manifest = cmd_synth(root / "data", 4, seed=3)
    cfg = RunConfig(
        network=NetworkConfig(input_size=64, width_multiple=0.125, depth_multiple=0.33),
        augment=AugmentConfig(mosaic_prob=0.5, degrees=5),
        optimizer=OptimizerConfig(epochs=2, batch_size=2),
        train_manifest=str(manifest),
        out_dir=str(root / "run"),
        seed=3,
    )
    cmd_train(cfg)
    cmd_eval([root / "run" / "best"], manifest, out_dir=root / "eval")
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_a7_pipeline_determinism(criterion, tmp_path):
    # same paths both times, so recorded configs match too
    work = tmp_path / "work"
    first = _pipeline(work)
    shutil.rmtree(work)
    second = _pipeline(work)
    differing = sorted(str(f) for f in set(first) | set(second) if first.get(f) != second.get(f))
    n_ckpt = sum(1 for f in first if f.parts[0] == "run" and f.parts[1] in ("best", "last"))
    n_report = sum(1 for f in first if f.parts[0] == "eval")
    ok = not differing and n_ckpt > 0 and n_report > 0
    assert criterion("A7", ok, f"{len(first)} files compared ({n_ckpt} checkpoint, {n_report} report), "
                               f"{len(differing)} differ {differing[:3]}")


# ---------------------------------------------------------------- A8

def test_a8_anchor_clustering(criterion, tmp_path):
    centers = np.array([[8.0, 12.0], [40.0, 30.0], [120.0, 200.0]])
    rng = np.random.default_rng(1)
    boxes = []
    for c in centers:
        # symmetric integer offsets keep each cluster mean exactly at its center
        for d in rng.integers(1, 3, size=(6, 2)):
            boxes += [c + d, c - d]
    got = kmeans_anchors(np.array(boxes), k=3, seed=0).anchors
    exact = np.array_equal(got, centers)

    manifest = cmd_synth(tmp_path / "data", 20, seed=0)
    wh = [(b.w, b.h) for _, ann in load_dataset(manifest) for b in ann.boxes]
    adapted = distortion(wh, cmd_anchors(manifest, k=9, seed=0).anchors)
    default = distortion(wh, DEFAULT_ANCHORS)
    ok = exact and adapted < default
    assert criterion("A8", ok, f"3-cluster centers exact: {exact}, distortion adapted {adapted:.4f} "
                               f"< default {default:.4f}")
