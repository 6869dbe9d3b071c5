"""Binary tensor and checkpoint containers.

Two tiny little-endian formats cover all on-disk arrays:

``LSRT`` -- a single tensor::

    magic "LSRT" | version u32 | dtype u8 | rank u8 | dims u32 * rank | payload

``LSRC`` -- a named-tensor container used for checkpoints::

    magic "LSRC" | version u32 | count u32 |
    per tensor: name_len u16 | name utf-8 | dtype u8 | rank u8 | dims u32 * rank | payload

dtype codes: 0 = float32, 1 = int32. Checkpoints carry a JSON sidecar at
``<path>.json`` recording architecture hyperparameters and the training seed.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ShapeError

TENSOR_MAGIC = b"LSRT"
CHECKPOINT_MAGIC = b"LSRC"
FORMAT_VERSION = 1

_DTYPE_TO_CODE = {np.dtype("<f4"): 0, np.dtype("<i4"): 1}
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<i4")}


def _coerce(array) -> np.ndarray:
    arr = np.asarray(array)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f4")
    elif arr.dtype.kind in "iub":
        arr = arr.astype("<i4")
    else:
        raise ShapeError(f"unsupported dtype {arr.dtype} (float32/int32 only)")
    # ascontiguousarray would promote 0-d scalars to 1-d; keep rank as-is
    return arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)


def _pack_tensor(arr: np.ndarray) -> bytes:
    code = _DTYPE_TO_CODE[arr.dtype]
    if arr.ndim > 255:
        raise ShapeError("tensor rank exceeds 255")
    head = struct.pack("<BB", code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + arr.tobytes()


def _unpack_tensor(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    code, rank = struct.unpack_from("<BB", buf, offset)
    offset += 2
    if code not in _CODE_TO_DTYPE:
        raise ShapeError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    dtype = _CODE_TO_DTYPE[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    nbytes = count * dtype.itemsize
    if offset + nbytes > len(buf):
        raise ShapeError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims)
    return arr.copy(), offset + nbytes


def write_tensor(path, array, sidecar: dict = None) -> Path:
    """Write a single array as an LSRT file (float arrays as float32,
    integer/bool arrays as int32), plus an optional ``<path>.json`` sidecar."""
    path = Path(path)
    arr = _coerce(array)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(_pack_tensor(arr))
    if sidecar is not None:
        sidecar_path(path).write_text(json.dumps(sidecar, indent=2,
                                                 sort_keys=True))
    return path


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != TENSOR_MAGIC:
        raise ShapeError(f"{path}: bad magic {buf[:4]!r}, expected LSRT")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise ShapeError(f"{path}: unsupported LSRT version {version}")
    arr, end = _unpack_tensor(buf, 8)
    if end != len(buf):
        raise ShapeError(f"{path}: {len(buf) - end} trailing bytes")
    return arr


def write_checkpoint(path, tensors: dict, sidecar: dict) -> Path:
    """Write named tensors as an LSRC container plus a ``<path>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, array in tensors.items():
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ShapeError(f"tensor name too long: {name[:40]}...")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(_pack_tensor(_coerce(array)))
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    """Read an LSRC container; returns (tensors, sidecar)."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ShapeError(f"{path}: bad magic {buf[:4]!r}, expected LSRC")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ShapeError(f"{path}: unsupported LSRC version {version}")
    offset = 12
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset : offset + name_len].decode("utf-8")
        offset += name_len
        tensors[name], offset = _unpack_tensor(buf, offset)
    if offset != len(buf):
        raise ShapeError(f"{path}: {len(buf) - offset} trailing bytes")
    side = sidecar_path(path)
    sidecar = json.loads(side.read_text()) if side.exists() else {}
    return tensors, sidecar


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")
