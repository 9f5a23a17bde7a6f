import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import greedy_nms_reference, raster_iou
from sedet.boxes import Box, DecodedPrediction, iou
from sedet.model import NetworkConfig, build
from sedet.postprocess import (
    Detection,
    NMSConfig,
    confidence_filter,
    detect,
    detections_from_json,
    detections_to_json,
    nms,
)
from sedet.tensor import Tensor


def pred(objectness, class_scores, box=Box(10, 10, 4, 4)):
    return DecodedPrediction(box, objectness, np.asarray(class_scores, dtype=float), 0, (0, 0), 0)


def random_candidates(rng, n, n_classes, coarse_scores=True):
    out = []
    for _ in range(n):
        x1, x2 = sorted(rng.integers(0, 65, 2))
        y1, y2 = sorted(rng.integers(0, 65, 2))
        # two-decimal scores force plenty of ties
        s = round(float(rng.uniform()), 2) if coarse_scores else float(rng.uniform())
        out.append(((int(x1), int(y1), int(x2), int(y2)), int(rng.integers(n_classes)), s))
    return out


def as_candidates(raw):
    return [(Box.from_corners(*c), cl, s) for c, cl, s in raw]


def kept_indices(raw, dets):
    """Map detections back to input positions (candidates are matched by identity of fields)."""
    remaining = list(range(len(raw)))
    idx = []
    for d in dets:
        for i in remaining:
            c, cl, s = raw[i]
            if cl == d.class_id and s == d.score and tuple(Box.from_corners(*c).as_array()) == tuple(d.box.as_array()):
                idx.append(i)
                remaining.remove(i)
                break
    return idx


# ---------------------------------------------------------------- confidence filter

def test_zero_objectness_removed():
    assert confidence_filter([pred(0.0, [1.0, 0.5])], NMSConfig(score_threshold=1e-9)) == []


def test_one_hot_class_gives_full_score():
    (box, cls, score), = confidence_filter([pred(1.0, [0.0, 1.0, 0.0])], NMSConfig())
    assert cls == 1 and score == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_filter_equals_direct_refilter(seed, thr):
    rng = np.random.default_rng(seed)
    preds = [pred(rng.uniform(), rng.uniform(size=4)) for _ in range(30)]
    got = confidence_filter(preds, NMSConfig(score_threshold=thr))
    expected = []
    for p in preds:
        best = max(range(4), key=lambda k: (p.class_scores[k], -k))
        s = p.objectness * p.class_scores[best]
        if s >= thr:
            expected.append((best, s))
    assert [(c, s) for _, c, s in got] == expected


def test_config_validation():
    with pytest.raises(ValueError):
        NMSConfig(iou_threshold=1.5)
    with pytest.raises(ValueError):
        NMSConfig(score_threshold=-0.1)


# ---------------------------------------------------------------- NMS

def test_identical_boxes_same_class_keep_higher():
    b = Box(5, 5, 4, 4)
    out = nms([(b, 0, 0.8), (b, 0, 0.9)], NMSConfig())
    assert [(d.class_id, d.score) for d in out] == [(0, 0.9)]


def test_identical_boxes_different_classes_both_kept():
    b = Box(5, 5, 4, 4)
    assert len(nms([(b, 0, 0.9), (b, 1, 0.8)], NMSConfig())) == 2


def test_tie_prefers_smaller_box_then_input_order():
    small, big = Box(10, 10, 4, 4), Box(10, 10, 5, 5)
    out = nms([(big, 0, 0.5), (small, 0, 0.5)], NMSConfig())
    assert [d.box for d in out] == [small]
    twin = Box(10, 10, 4, 4)
    out = nms([(small, 0, 0.5), (twin, 1, 0.5)], NMSConfig())
    assert [d.class_id for d in out] == [0, 1]


def test_threshold_is_strict():
    # IoU exactly 1/3: kept at threshold 1/3, suppressed just below
    a, b = Box.from_corners(0, 0, 2, 1), Box.from_corners(1, 0, 3, 1)
    assert iou(a, b) == 1 / 3
    assert len(nms([(a, 0, 0.9), (b, 0, 0.8)], NMSConfig(iou_threshold=1 / 3))) == 2
    assert len(nms([(a, 0, 0.9), (b, 0, 0.8)], NMSConfig(iou_threshold=0.33))) == 1


def test_empty_input():
    assert nms([], NMSConfig()) == []


@pytest.mark.parametrize("seed", range(100))
def test_matches_brute_force_reference(seed):
    rng = np.random.default_rng(seed)
    raw = random_candidates(rng, 50, 3)
    cfg = NMSConfig(iou_threshold=float(rng.uniform(0.1, 0.9)), max_detections=int(rng.integers(1, 60)))
    got = kept_indices(raw, nms(as_candidates(raw), cfg))
    assert got == greedy_nms_reference(raw, cfg.iou_threshold, cfg.max_detections, raster_iou)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.integers(0, 7))
def test_nms_invariants(seed, thr, n_classes_minus):
    rng = np.random.default_rng(seed)
    raw = random_candidates(rng, int(rng.integers(0, 40)), n_classes_minus + 1)
    cands = as_candidates(raw)
    cfg = NMSConfig(iou_threshold=thr)
    out = nms(cands, cfg)
    # subset of the input
    assert len(kept_indices(raw, out)) == len(out)
    by_class = {}
    for d in out:
        by_class.setdefault(d.class_id, []).append(d)
    for dets in by_class.values():
        scores = [d.score for d in dets]
        assert scores == sorted(scores, reverse=True)
        for i in range(len(dets)):
            for j in range(i + 1, len(dets)):
                assert iou(dets[i].box, dets[j].box) <= thr
    # idempotent
    again = nms([(d.box, d.class_id, d.score) for d in out], cfg)
    assert again == out


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(5)))
def test_class_relabeling_commutes(seed, perm):
    rng = np.random.default_rng(seed)
    raw = random_candidates(rng, 30, 5, coarse_scores=False)
    cfg = NMSConfig()
    out = nms(as_candidates(raw), cfg)
    relabeled = nms(as_candidates([(c, perm[cl], s) for c, cl, s in raw]), cfg)
    assert [(d.box, perm[d.class_id], d.score) for d in out] == [(d.box, d.class_id, d.score) for d in relabeled]


def test_max_detections_truncates_by_score():
    rng = np.random.default_rng(0)
    cands = [(Box(i * 10.0, 0, 2, 2), i % 3, float(rng.uniform())) for i in range(20)]
    out = nms(cands, NMSConfig(max_detections=5))
    assert [d.score for d in out] == sorted((c[2] for c in cands), reverse=True)[:5]


# ---------------------------------------------------------------- detect

def toy():
    return NetworkConfig(input_size=64, width_multiple=0.125, depth_multiple=0.33)


def test_untrained_model_with_suppressed_objectness_detects_nothing():
    model = build(toy())
    for h in model.heads:
        b = h.bias.data.reshape(3, -1)
        b[:, 4] = -1e3
    x = Tensor(np.random.default_rng(0).uniform(size=(3, 64, 64)))
    assert detect(model, x, NMSConfig(score_threshold=1e-6)) == []


def test_detect_respects_max_detections():
    model = build(toy())
    for h in model.heads:
        b = h.bias.data.reshape(3, -1)
        b[:, 4:] = 1e3
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 64, 64)))
    out = detect(model, x, NMSConfig(score_threshold=0.0, iou_threshold=1.0, max_detections=17))
    assert len(out) == 17
    assert all(0 <= d.score <= 1 for d in out)


def test_detect_preserves_model_mode():
    model = build(toy()).train()
    detect(model, Tensor(np.zeros((1, 3, 64, 64))), NMSConfig())
    assert model.training


# ---------------------------------------------------------------- JSON

def test_json_round_trip():
    names = ["a", "b"]
    dets = [Detection(Box.from_corners(1, 2, 5, 9), 1, 0.75), Detection(Box.from_corners(0, 0, 3, 3), 0, 0.5)]
    text = detections_to_json([d.to_record("img.ppm", names) for d in dets])
    rec = json.loads(text)[0]
    assert rec == {"image": "img.ppm", "class": "b", "score": 0.75, "box": [1.0, 2.0, 5.0, 9.0]}
    back = detections_from_json(text, names)
    assert [d for _, d in back] == dets


def test_json_class_names_need_vocabulary():
    text = detections_to_json([Detection(Box(1, 1, 1, 1), 0, 0.5).to_record("x", ["a"])])
    with pytest.raises(ValueError):
        detections_from_json(text)
