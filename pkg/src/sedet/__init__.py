"""A small single-stage object detector with squeeze-and-excitation attention.

Everything runs on a float64 numpy reverse-mode autodiff engine
(:mod:`sedet.tensor`).
"""

from .boxes import Box, ciou, iou
from .metrics import EvalReport, average_precision, evaluate
from .model import DetectorModel, NetworkConfig, build, load_checkpoint, save_checkpoint
from .postprocess import Detection, NMSConfig, detect, nms
from .tensor import Tensor, no_grad

__version__ = "0.1.0"
