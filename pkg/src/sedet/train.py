"""Run configuration, SGD with momentum, and the training / evaluation loops."""

from __future__ import annotations

import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data.annotations import Annotation, ClassVocabulary
from .data.dataset import load_dataset
from .data.image_io import to_tensor
from .data.transforms import AugmentConfig, letterbox, prepare_sample
from .loss import LossWeights, assign_batch, detection_loss
from .metrics import EvalReport, evaluate
from .model import DetectorModel, NetworkConfig, build, save_checkpoint
from .postprocess import NMSConfig, detect_batch
from .tensor import no_grad

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "precision", "recall", "mAP@0.5", "box", "obj", "cls", "total", "lr")


class NumericError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    momentum: float = 0.937
    nesterov: bool = True
    weight_decay: float = 5e-4
    epochs: int = 100
    batch_size: int = 4
    warmup_epochs: float = 3.0
    final_lr_factor: float = 0.01

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("invalid optimizer hyper-parameters")


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(input_size=160))
    loss: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    nms: NMSConfig = field(default_factory=NMSConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train_manifest: str = ""
    val_manifest: str = ""
    classes: List[str] = field(default_factory=lambda: list(ClassVocabulary().names))
    seed: int = 0
    out_dir: str = "runs/train"
    eval_interval: int = 1
    eval_nms: Optional[NMSConfig] = None
    recalibrate_bn: bool = True

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        cfg = cls(
            network=NetworkConfig.from_dict(d.pop("network", {"input_size": 160})),
            loss=LossWeights(**d.pop("loss", {})),
            augment=AugmentConfig(**d.pop("augment", {})),
            nms=NMSConfig(**d.pop("nms", {})),
            optimizer=OptimizerConfig(**d.pop("optimizer", {})),
            eval_nms=NMSConfig(**d.pop("eval_nms")) if d.get("eval_nms") else None,
            **{k: v for k, v in d.items() if k != "eval_nms"},
        )
        if base_dir is not None:
            for name in ("train_manifest", "val_manifest"):
                p = getattr(cfg, name)
                if p and not Path(p).is_absolute():
                    setattr(cfg, name, str(Path(base_dir) / p))
        if len(cfg.classes) != cfg.network.num_classes:
            raise ValueError(f"{len(cfg.classes)} class names for num_classes={cfg.network.num_classes}")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.eval_nms is None:
            d.pop("eval_nms")
        return d


class SGD:
    """Momentum SGD (optionally Nesterov); decay applies to weights with ndim > 1."""

    def __init__(self, params, lr, momentum=0.937, weight_decay=5e-4, nesterov=True):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.data.ndim > 1:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            update = g + self.momentum * v if self.nesterov else v
            p.data = p.data - self.lr * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def learning_rate(opt: OptimizerConfig, epoch_progress: float) -> float:
    """Linear warmup over ``warmup_epochs`` then cosine decay to ``lr * final_lr_factor``."""
    base = opt.lr
    final = base * opt.final_lr_factor
    cosine = final + (base - final) * 0.5 * (1 + math.cos(math.pi * min(epoch_progress / opt.epochs, 1.0)))
    if opt.warmup_epochs > 0 and epoch_progress < opt.warmup_epochs:
        return cosine * (epoch_progress / opt.warmup_epochs)
    return cosine


def evaluate_model(model: DetectorModel, samples: Sequence[Tuple[np.ndarray, Annotation]],
                   nms_cfg: NMSConfig, class_names: Sequence[str], iou_threshold: float = 0.5,
                   batch_size: int = 8) -> EvalReport:
    """Detect on original images (letterboxed in, mapped back out) and score them."""
    size = model.config.input_size
    pairs = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        boxed = [letterbox(img, ann, size) for img, ann in chunk]
        dets = detect_batch(model, to_tensor([b[0] for b in boxed]), nms_cfg, [b[2] for b in boxed])
        pairs += [(d, ann.objects) for d, (_, ann) in zip(dets, chunk)]
    return evaluate(pairs, class_names, iou_threshold)


def recalibrate_batchnorm(model: DetectorModel, samples: Sequence[Tuple[np.ndarray, Annotation]],
                          batch_size: int = 8) -> None:
    """Replace BN running statistics by the mean of per-batch statistics over ``samples``.

    The exponential running averages trail weights that are still moving;
    recomputing them from the current weights before evaluation removes the
    train/inference mismatch. Parameters are untouched.
    """
    size = model.config.input_size
    bns = [m for _, m in model.named_modules() if hasattr(m, "running_mean")]
    saved = [m.momentum for m in bns]
    was_training = model.training
    model.train()
    try:
        for k, start in enumerate(range(0, len(samples), batch_size)):
            chunk = samples[start:start + batch_size]
            for m in bns:
                m.momentum = 1.0 / (k + 1)  # cumulative mean over batches
            with no_grad():
                model(to_tensor([letterbox(img, ann, size)[0] for img, ann in chunk]))
    finally:
        for m, mom in zip(bns, saved):
            m.momentum = mom
        model.train(was_training)


def _format_row(values: dict) -> str:
    out = []
    for k in LOG_COLUMNS:
        v = values[k]
        out.append(str(v) if k == "epoch" else f"{v:.6g}")
    return ",".join(out)


def train(cfg: RunConfig, model: Optional[DetectorModel] = None, samples=None, val_samples=None,
          out_dir=None) -> dict:
    """Train and write ``best/`` + ``last/`` checkpoints and ``train_log.csv``.

    Returns a summary with the best validation mAP and the final loss values.
    Validation falls back to the training images when no validation set is
    configured.
    """
    out_dir = Path(out_dir or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = ClassVocabulary(tuple(cfg.classes))
    if samples is None:
        samples = load_dataset(cfg.train_manifest, vocab)
    if val_samples is None:
        val_samples = load_dataset(cfg.val_manifest, vocab) if cfg.val_manifest else samples
    if not samples:
        raise ValueError("training set is empty")
    model = model or build(cfg.network)
    model.train()
    opt_cfg = cfg.optimizer
    opt = SGD(model.parameters(), opt_cfg.lr, opt_cfg.momentum, opt_cfg.weight_decay, opt_cfg.nesterov)
    eval_nms = cfg.eval_nms or cfg.nms
    size = cfg.network.input_size
    n = len(samples)
    steps_per_epoch = math.ceil(n / opt_cfg.batch_size)

    (out_dir / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    log_path = out_dir / "train_log.csv"
    log_lines = [",".join(LOG_COLUMNS)]
    best_map, best_epoch = -1.0, -1
    last = {}
    for epoch in range(opt_cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        sums = np.zeros(4)
        for step in range(steps_per_epoch):
            idx = order[step * opt_cfg.batch_size:(step + 1) * opt_cfg.batch_size]
            batch = [prepare_sample(int(i), samples, cfg.augment, size,
                                    seed=int(rng.integers(2 ** 31))) for i in idx]
            images = to_tensor([b[0] for b in batch])
            targets = assign_batch([b[1].objects for b in batch], cfg.network)
            opt.lr = learning_rate(opt_cfg, epoch + step / steps_per_epoch)
            raw = model(images)
            losses = detection_loss(raw, targets, cfg.network, cfg.loss)
            vals = losses.values()
            if not all(math.isfinite(v) for v in vals.values()):
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}: {vals}")
            losses.total.backward()
            opt.step()
            opt.zero_grad()
            sums += [vals["box"], vals["obj"], vals["cls"], vals["total"]]
        means = sums / steps_per_epoch
        row = {"epoch": epoch, "box": means[0], "obj": means[1], "cls": means[2], "total": means[3],
               "lr": opt.lr, "precision": float("nan"), "recall": float("nan"), "mAP@0.5": float("nan")}
        last_epoch = epoch == opt_cfg.epochs - 1
        if cfg.recalibrate_bn and (last_epoch or (cfg.eval_interval > 0 and (epoch + 1) % cfg.eval_interval == 0)):
            recalibrate_batchnorm(model, samples, opt_cfg.batch_size)
        if cfg.eval_interval > 0 and ((epoch + 1) % cfg.eval_interval == 0 or last_epoch):
            report = evaluate_model(model, val_samples, eval_nms, cfg.classes)
            model.train()
            row.update(precision=report.precision, recall=report.recall, **{"mAP@0.5": report.mAP})
            if report.mAP > best_map:
                best_map, best_epoch = report.mAP, epoch
                meta = {"epoch": epoch, "mAP@0.5": report.mAP, "classes": list(cfg.classes)}
                save_checkpoint(model, out_dir / "best", extra=meta)
        log_lines.append(_format_row(row))
        log_path.write_text("\n".join(log_lines) + "\n")
        log.info("epoch %d  box %.4f obj %.4f cls %.4f  P %.3f R %.3f mAP %.3f", epoch, row["box"],
                 row["obj"], row["cls"], row["precision"], row["recall"], row["mAP@0.5"])
        last = row
    save_checkpoint(model, out_dir / "last", extra={"epoch": opt_cfg.epochs - 1, "classes": list(cfg.classes)})
    if best_epoch < 0:
        shutil.copytree(out_dir / "last", out_dir / "best", dirs_exist_ok=True)
    return {"best_mAP": best_map, "best_epoch": best_epoch, "last": last, "model": model}
