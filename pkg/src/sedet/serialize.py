"""Tensor binary files and plain-text parameter manifests.

Binary layout (all little-endian): uint64 ndim, ndim x uint64 dims, then
prod(dims) float64 values in row-major order.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

PathLike = Union[str, os.PathLike]

MANIFEST_NAME = "manifest.txt"


def tensor_to_bytes(array) -> bytes:
    # ascontiguousarray would promote 0-d input to 1-d
    arr = np.require(np.asarray(array, dtype="<f8"), requirements="C")
    header = struct.pack(f"<{arr.ndim + 1}Q", arr.ndim, *arr.shape)
    return header + arr.tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise ValueError("tensor file truncated: missing dimension count")
    (ndim,) = struct.unpack_from("<Q", buf, 0)
    head = 8 * (ndim + 1)
    if len(buf) < head:
        raise ValueError(f"tensor file truncated: expected {ndim} dimension sizes")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 8)
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(buf) != head + 8 * count:
        raise ValueError(f"tensor file size {len(buf)} does not match shape {shape}")
    return np.frombuffer(buf, dtype="<f8", offset=head, count=count).reshape(shape).astype(np.float64)


def write_tensor(path: PathLike, array) -> None:
    Path(path).write_bytes(tensor_to_bytes(array))


def read_tensor(path: PathLike) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def save_module(module, directory: PathLike) -> Path:
    """Write every parameter and buffer of ``module`` plus a manifest.

    Manifest lines: ``name<TAB>block kind<TAB>comma-separated shape<TAB>file``,
    in module traversal order.
    """
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    # pre-order reversed visits descendants before ancestors, so the deepest owner wins
    kinds = {}
    for mname, m in reversed(list(module.named_modules())):
        prefix = f"{mname}." if mname else ""
        for pname, _ in m.named_parameters(prefix):
            kinds.setdefault(pname, m.kind)
        for bname, _ in m.named_buffers(prefix):
            kinds.setdefault(bname, m.kind)
    lines = []
    for name, arr in module.state_dict().items():
        fname = f"tensors/{name}.bin"
        write_tensor(directory / fname, arr)
        shape = ",".join(str(d) for d in np.shape(arr))
        lines.append(f"{name}\t{kinds.get(name, module.kind)}\t{shape}\t{fname}")
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    return directory


def load_state(directory: PathLike) -> dict:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    state = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{manifest}:{lineno}: expected 4 tab-separated fields")
        name, _kind, shape, fname = parts
        arr = read_tensor(directory / fname)
        expected = tuple(int(d) for d in shape.split(",")) if shape else ()
        if arr.shape != expected:
            raise ValueError(f"{manifest}:{lineno}: {name} has shape {arr.shape}, manifest says {expected}")
        state[name] = arr
    return state


def load_module(module, directory: PathLike):
    module.load_state_dict(load_state(directory))
    return module
