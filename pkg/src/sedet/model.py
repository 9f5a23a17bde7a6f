"""Detector assembly: focus stem, CSP backbone with SE, SPPF, FPN+PAN neck, heads."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import ops
from .blocks import CBS, CSP, SE, SPPF, Module, conv_params
from .ops import ShapeError
from .serialize import load_module, save_module
from .tensor import Tensor

DEFAULT_ANCHORS = [
    [10, 13], [16, 30], [33, 23],
    [30, 61], [62, 45], [59, 119],
    [116, 90], [156, 198], [373, 326],
]
BASE_WIDTHS = (64, 128, 256, 512, 1024)
BACKBONE_DEPTHS = (1, 2, 3, 1)
NECK_DEPTH = 1


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    input_size: int = 640
    num_classes: int = 7
    anchors_per_scale: int = 3
    anchors: List[List[float]] = field(default_factory=lambda: [list(a) for a in DEFAULT_ANCHORS])
    strides: List[int] = field(default_factory=lambda: [8, 16, 32])
    width_multiple: float = 1.0
    depth_multiple: float = 1.0
    se_enabled: bool = True
    se_position: int = 4  # SE follows backbone stage 1..4
    se_reduction: int = 16
    seed: int = 0

    def validate(self) -> "NetworkConfig":
        if self.input_size <= 0 or self.input_size % 32:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if len(self.strides) != 3:
            raise ConfigError(f"exactly 3 scales required, got strides {self.strides}")
        if len(self.anchors) != 3 * self.anchors_per_scale:
            raise ConfigError(
                f"anchor list length {len(self.anchors)} != 3 * anchors_per_scale ({self.anchors_per_scale})")
        if any(len(a) != 2 or a[0] <= 0 or a[1] <= 0 for a in self.anchors):
            raise ConfigError("every anchor must be a positive (w, h) pair")
        if self.width_multiple <= 0 or self.depth_multiple <= 0:
            raise ConfigError("width/depth multipliers must be > 0")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if not 1 <= self.se_position <= 4:
            raise ConfigError(f"se_position must be a backbone stage in 1..4, got {self.se_position}")
        if self.se_reduction < 1:
            raise ConfigError(f"se_reduction must be >= 1, got {self.se_reduction}")
        return self

    @property
    def grid_sizes(self) -> List[int]:
        return [self.input_size // s for s in self.strides]

    @property
    def head_channels(self) -> int:
        return self.anchors_per_scale * (5 + self.num_classes)

    def anchor_array(self) -> np.ndarray:
        """Anchors as a (3, A, 2) array in pixels."""
        return np.asarray(self.anchors, dtype=np.float64).reshape(3, self.anchors_per_scale, 2)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**known).validate()


def scaled_width(base: int, multiple: float) -> int:
    return max(8, int(math.ceil(base * multiple / 8) * 8))


def scaled_depth(n: int, multiple: float) -> int:
    return max(1, int(math.ceil(n * multiple - 1e-9)))


class Stage(Module):
    kind = "Stage"

    def __init__(self, rng, c_in, c_out, n):
        super().__init__()
        self.down = CBS(rng, c_in, c_out, 3, 2)
        self.csp = CSP(rng, c_out, c_out, n, shortcut=True)

    def forward(self, x):
        return self.csp(self.down(x))


class DetectorModel(Module):
    kind = "Detector"

    def __init__(self, config: NetworkConfig):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = [scaled_width(b, config.width_multiple) for b in BASE_WIDTHS]
        d = [scaled_depth(n, config.depth_multiple) for n in BACKBONE_DEPTHS]
        nd = scaled_depth(NECK_DEPTH, config.depth_multiple)
        self.widths = c

        self.stem = CBS(rng, 12, c[0], 3)
        self.stages = [Stage(rng, c[i], c[i + 1], d[i]) for i in range(4)]
        self.se = SE(rng, c[config.se_position], config.se_reduction)
        self.sppf = SPPF(rng, c[4], c[4])

        self.lat5 = CBS(rng, c[4], c[3], 1)
        self.top4 = CSP(rng, 2 * c[3], c[3], nd, shortcut=False)
        self.lat4 = CBS(rng, c[3], c[2], 1)
        self.out3 = CSP(rng, 2 * c[2], c[2], nd, shortcut=False)
        self.down3 = CBS(rng, c[2], c[2], 3, 2)
        self.out4 = CSP(rng, 2 * c[2], c[3], nd, shortcut=False)
        self.down4 = CBS(rng, c[3], c[3], 3, 2)
        self.out5 = CSP(rng, 2 * c[3], c[4], nd, shortcut=False)

        self.head3 = conv_params(rng, c[2], config.head_channels, 1, bias=True)
        self.head4 = conv_params(rng, c[3], config.head_channels, 1, bias=True)
        self.head5 = conv_params(rng, c[4], config.head_channels, 1, bias=True)
        self._init_head_priors()

    def _init_head_priors(self):
        # objectness prior ~8 objects per image, near-uniform class prior
        cfg = self.config
        for head, stride in zip(self.heads, cfg.strides):
            b = head.bias.data.reshape(cfg.anchors_per_scale, 5 + cfg.num_classes)
            b[:, 4] += math.log(8.0 / (cfg.input_size / stride) ** 2)
            b[:, 5:] += math.log(0.6 / max(cfg.num_classes - 0.99, 0.01))

    @property
    def heads(self):
        return [self.head3, self.head4, self.head5]

    def stem_forward(self, x: Tensor) -> Tensor:
        return self.stem(ops.space_to_depth(x))

    def forward(self, images: Tensor, use_se: Optional[bool] = None) -> List[Tensor]:
        """Return raw head maps ordered by stride (8, 16, 32).

        ``use_se`` overrides ``config.se_enabled`` for ablation runs.
        """
        s = self.config.input_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (s, s):
            raise ShapeError(f"expected images of shape N x 3 x {s} x {s}, got {images.shape}")
        se_on = self.config.se_enabled if use_se is None else use_se
        x = self.stem_forward(images)
        feats = []
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if se_on and i == self.config.se_position:
                x = self.se(x)
            feats.append(x)
        p3, p4 = feats[1], feats[2]
        p5 = self.sppf(x)

        h5 = self.lat5(p5)
        t4 = self.top4(ops.concat_channels([ops.upsample_nearest2x(h5), p4]))
        h4 = self.lat4(t4)
        n3 = self.out3(ops.concat_channels([ops.upsample_nearest2x(h4), p3]))
        n4 = self.out4(ops.concat_channels([self.down3(n3), h4]))
        n5 = self.out5(ops.concat_channels([self.down4(n4), h5]))
        return [ops.conv2d(f, head) for f, head in zip((n3, n4, n5), self.heads)]


def build(config: NetworkConfig) -> DetectorModel:
    return DetectorModel(config)


def save_checkpoint(model: DetectorModel, directory, extra: Optional[dict] = None) -> Path:
    directory = Path(directory)
    save_module(model, directory)
    (directory / "config.json").write_text(model.config.to_json() + "\n")
    if extra is not None:
        (directory / "meta.json").write_text(json.dumps(extra, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> DetectorModel:
    directory = Path(directory)
    cfg = NetworkConfig.from_dict(json.loads((directory / "config.json").read_text()))
    model = build(cfg)
    load_module(model, directory)
    model.eval()
    return model


def count_convolutions(model: DetectorModel) -> int:
    return sum(1 for name, _ in model.named_parameters() if name.endswith("conv.weight")) + len(model.heads)
