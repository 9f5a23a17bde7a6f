import json
import math

import numpy as np
import pytest

from sedet.cli import (
    EXIT_DATA,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_USAGE,
    DataError,
    UsageError,
    cmd_anchors,
    cmd_detect,
    cmd_eval,
    cmd_synth,
    cmd_train,
    main,
)
from sedet.data.anchors import distortion
from sedet.data.dataset import load_dataset, read_manifest
from sedet.data.synth import SceneConfig
from sedet.data.transforms import AugmentConfig
from sedet.model import DEFAULT_ANCHORS, NetworkConfig, build
from sedet.postprocess import NMSConfig
from sedet.train import LOG_COLUMNS, OptimizerConfig, RunConfig, learning_rate, train

TINY_SCENE = SceneConfig(width=64, height=64, min_size=10, max_size=24, min_objects=1, max_objects=2)


def tiny_cfg(manifest, out, **opt):
    opt.setdefault("epochs", 1)
    opt.setdefault("batch_size", 2)
    return RunConfig(
        network=NetworkConfig(input_size=64, width_multiple=0.125, depth_multiple=0.33),
        augment=AugmentConfig(mosaic_prob=0.5),
        optimizer=OptimizerConfig(**opt),
        train_manifest=str(manifest),
        out_dir=str(out),
    )


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    return cmd_synth(root / "data", 3, seed=1, scene=TINY_SCENE)


@pytest.fixture(scope="module")
def tiny_run(tiny_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cmd_train(tiny_cfg(tiny_data, out, epochs=2))
    return out


# ---------------------------------------------------------------- synth / anchors

def test_synth_zero_gives_empty_manifest(tmp_path):
    m = cmd_synth(tmp_path, 0)
    assert m.read_text() == ""


def test_synth_rejects_negative(tmp_path):
    with pytest.raises(UsageError):
        cmd_synth(tmp_path, -1)


@pytest.mark.slow
def test_synth_hundred_all_parseable(tmp_path):
    m = cmd_synth(tmp_path, 100, seed=3)
    assert len(read_manifest(m)) == 100
    assert len(load_dataset(m)) == 100


def test_anchors_uniform_dataset_gives_identical_anchors(tmp_path):
    forced = SceneConfig(width=64, height=64, min_size=16, max_size=16, max_aspect=1.0, min_objects=3,
                         max_objects=3)
    m = cmd_synth(tmp_path / "d", 4, seed=0, scene=forced)
    a = cmd_anchors(m, k=9, seed=0, out_path=tmp_path / "anchors.json")
    assert np.all(a.anchors == 16.0)
    saved = json.loads((tmp_path / "anchors.json").read_text())
    assert saved["anchors"] == a.as_list()


def test_anchors_beat_defaults_and_are_seeded(tiny_data, tmp_path):
    m = cmd_synth(tmp_path / "d", 10, seed=2)
    a = cmd_anchors(m, seed=5)
    b = cmd_anchors(m, seed=5)
    assert np.array_equal(a.anchors, b.anchors)
    wh = [(bx.w, bx.h) for _, ann in load_dataset(m) for bx in ann.boxes]
    assert distortion(wh, a.anchors) < distortion(wh, DEFAULT_ANCHORS)


def test_anchors_too_few_boxes(tiny_data):
    with pytest.raises(DataError):
        cmd_anchors(tiny_data, k=9)


# ---------------------------------------------------------------- training

def test_learning_rate_schedule():
    opt = OptimizerConfig(lr=0.1, epochs=10, warmup_epochs=2, final_lr_factor=0.01)
    cosine = lambda e: 0.001 + 0.099 * 0.5 * (1 + math.cos(math.pi * e / 10))
    assert learning_rate(opt, 0.0) == 0.0
    # warmup ramps the cosine value linearly
    assert learning_rate(opt, 1.0) == pytest.approx(0.5 * cosine(1.0), abs=1e-15)
    assert learning_rate(opt, 2.0) == pytest.approx(cosine(2.0), abs=1e-15)
    assert learning_rate(opt, 10.0) == pytest.approx(0.001, abs=1e-15)


def test_zero_learning_rate_leaves_parameters(tiny_data, tmp_path):
    cfg = tiny_cfg(tiny_data, tmp_path, lr=0.0)
    model = build(cfg.network)
    before = [p.data.copy() for p in model.parameters()]
    train(cfg, model=model)
    for b, p in zip(before, model.parameters()):
        np.testing.assert_array_equal(b, p.data)


def test_training_log_columns(tiny_run):
    lines = (tiny_run / "train_log.csv").read_text().splitlines()
    assert lines[0].split(",") == list(LOG_COLUMNS)
    assert LOG_COLUMNS[:3] == ("epoch", "precision", "recall")
    assert len(lines) == 3
    for line in lines[1:]:
        assert all(math.isfinite(float(v)) for v in line.split(","))
    assert (tiny_run / "best" / "config.json").exists() and (tiny_run / "last" / "config.json").exists()
    meta = json.loads((tiny_run / "last" / "meta.json").read_text())
    assert meta["classes"][0] == "uphead"


def test_training_reduces_loss_on_tiny_set(tiny_data, tmp_path):
    cfg = tiny_cfg(tiny_data, tmp_path, epochs=6, lr=0.05)
    cfg.augment = AugmentConfig.disabled()
    cfg.eval_interval = 0
    train(cfg)
    rows = [list(map(float, ln.split(","))) for ln in (tmp_path / "train_log.csv").read_text().splitlines()[1:]]
    total = LOG_COLUMNS.index("total")
    assert rows[-1][total] < rows[0][total]


def test_config_round_trip_and_unknown_keys(tmp_path):
    cfg = tiny_cfg("m.txt", tmp_path)
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    back = RunConfig.load(tmp_path / "c.json")
    assert back.network == cfg.network and back.optimizer == cfg.optimizer
    assert back.train_manifest == str(tmp_path / "m.txt")
    with pytest.raises(ValueError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        OptimizerConfig(epochs=0)


# ---------------------------------------------------------------- eval / detect

def test_eval_writes_reports(tiny_run, tiny_data, tmp_path):
    (rep,) = cmd_eval([tiny_run / "last"], tiny_data, out_dir=tmp_path)
    d = json.loads((tmp_path / "report.json").read_text())
    assert d["mAP"] == rep.mAP
    assert (tmp_path / "pr_curves.csv").read_text().startswith("class,recall,precision,confidence")
    assert "mAP" in (tmp_path / "ap_table.txt").read_text()


def test_eval_two_checkpoints_writes_comparison(tiny_run, tiny_data, tmp_path):
    reports = cmd_eval([tiny_run / "last", tiny_run / "best"], tiny_data, out_dir=tmp_path)
    assert len(reports) == 2
    assert (tmp_path / "run_0" / "report.json").exists() and (tmp_path / "run_1" / "report.json").exists()
    assert "delta" in (tmp_path / "comparison.txt").read_text()


def test_eval_rejects_empty_manifest(tiny_run, tmp_path):
    m = cmd_synth(tmp_path, 0)
    with pytest.raises(DataError):
        cmd_eval([tiny_run / "last"], m)


def test_eval_rejects_vocabulary_mismatch(tiny_run, tmp_path):
    m = cmd_synth(tmp_path / "d", 1, classes=["a", "b", "c", "d", "e", "f", "g"])
    with pytest.raises((DataError, ValueError)):
        cmd_eval([tiny_run / "last"], m)


def test_detect_zero_images(tiny_run, tmp_path):
    records, failures = cmd_detect(tiny_run / "last", [], out_dir=tmp_path)
    assert records == [] and failures == []
    assert json.loads((tmp_path / "detections.json").read_text()) == []


def test_detect_same_image_twice_identical(tiny_run, tiny_data, tmp_path):
    img = read_manifest(tiny_data)[0][0]
    records, _ = cmd_detect(tiny_run / "last", [img, img], NMSConfig(score_threshold=0.0, max_detections=5),
                            out_dir=tmp_path, draw=True)
    half = len(records) // 2
    assert half > 0 and records[:half] == records[half:]
    assert (tmp_path / "annotated" / f"{img.stem}.ppm").exists()


def test_detect_continues_past_unreadable(tiny_run, tiny_data, tmp_path):
    img = read_manifest(tiny_data)[0][0]
    (tmp_path / "broken.ppm").write_bytes(b"garbage")
    records, failures = cmd_detect(tiny_run / "last", [tmp_path / "broken.ppm", img], out_dir=tmp_path)
    assert len(failures) == 1 and "broken.ppm" in str(failures[0])


# ---------------------------------------------------------------- main / exit codes

def test_main_exit_codes(tiny_run, tiny_data, tmp_path, capsys):
    assert main(["--out", str(tmp_path / "s"), "synth", "--count", "1"]) == EXIT_OK
    with pytest.raises(SystemExit) as e:
        main(["bogus-verb"])
    assert e.value.code == EXIT_USAGE
    assert main(["detect", str(tmp_path / "missing-ckpt")]) == EXIT_DATA
    assert main(["eval", str(tiny_run / "last"), "--manifest", str(tmp_path / "nope.txt")]) == EXIT_DATA
    assert main(["--config", str(tmp_path / "absent.json"), "train"]) == EXIT_DATA
    (tmp_path / "bad.json").write_text(json.dumps({"network": {"input_size": 100}}))
    assert main(["--config", str(tmp_path / "bad.json"), "train"]) == EXIT_USAGE
    assert main(["detect", str(tiny_run / "last"), "--iou-threshold", "2"]) == EXIT_USAGE


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_main_numeric_failure(tiny_data, tmp_path):
    # batch norm absorbs merely large steps; this one overflows the weights
    cfg = tiny_cfg(tiny_data, tmp_path / "run")
    cfg.augment = AugmentConfig.disabled()
    cfg.optimizer = OptimizerConfig(lr=1e300, epochs=3, batch_size=1, warmup_epochs=0)
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert main(["--config", str(tmp_path / "c.json"), "train"]) == EXIT_NUMERIC


def test_main_detect_prints_json(tiny_run, tiny_data, capsys):
    img = read_manifest(tiny_data)[0][0]
    assert main(["detect", str(tiny_run / "last"), str(img)]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert isinstance(out, list)


def test_main_compare(tiny_run, tiny_data, tmp_path, capsys):
    cmd_eval([tiny_run / "last"], tiny_data, out_dir=tmp_path / "a")
    cmd_eval([tiny_run / "best"], tiny_data, out_dir=tmp_path / "b")
    assert main(["compare", str(tmp_path / "a" / "report.json"), str(tmp_path / "b" / "report.json")]) == EXIT_OK
    assert "mAP" in capsys.readouterr().out
