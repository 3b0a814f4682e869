"""Reader/writer for the HSZ raster container.

Layout (little-endian)::

    b"HSZ1" | u8 dtype code | u8 ndim | ndim x u32 dims | row-major payload

dtype code 1 is float32, 2 is int32.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"HSZ1"
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<i4")}
_DTYPE_TO_CODE = {np.dtype("<f4"): 1, np.dtype("<i4"): 2}


class HszFormatError(ValueError):
    """Bad magic, unknown dtype code or malformed header."""


class HszTruncationError(HszFormatError):
    """Payload length disagrees with the header."""


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f4", copy=False)
    elif arr.dtype.kind in "iub":
        arr = arr.astype("<i4", copy=False)
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    header = MAGIC + struct.pack("<BB", _DTYPE_TO_CODE[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise HszFormatError("not an HSZ1 container (bad magic)")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in _CODES:
        raise HszFormatError(f"unknown dtype code {code}")
    off = 6 + 4 * ndim
    if len(buf) < off:
        raise HszTruncationError("header truncated")
    shape = struct.unpack_from(f"<{ndim}I", buf, 6)
    dtype = _CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off != expected:
        raise HszTruncationError(
            f"payload is {len(buf) - off} bytes, header {shape} needs {expected}"
        )
    return np.frombuffer(buf, dtype=dtype, offset=off).reshape(shape).copy()


def save(path: str | os.PathLike, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def save_cube(path, cube: np.ndarray) -> None:
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ValueError(f"cube must be (rows, cols, bands), got shape {cube.shape}")
    save(path, cube.astype(np.float32))


def load_cube(path) -> np.ndarray:
    cube = load(path)
    if cube.ndim != 3 or cube.dtype.kind != "f":
        raise HszFormatError(f"{path}: expected a float32 3-D cube, got {cube.dtype} {cube.shape}")
    return cube


def save_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("label map must be 2-D")
    save(path, labels.astype(np.int32))


def load_labels(path) -> np.ndarray:
    labels = load(path)
    if labels.ndim != 2 or labels.dtype.kind != "i":
        raise HszFormatError(f"{path}: expected an int32 2-D label map")
    return labels


def split_to_json(split) -> str:
    doc = {
        "seed": int(split.seed),
        "train": [[int(r), int(c)] for r, c in split.train],
        "val": [[int(r), int(c)] for r, c in split.val],
        "test": [[int(r), int(c)] for r, c in split.test],
    }
    return json.dumps(doc, separators=(",", ":"))


def save_split(path, split) -> None:
    with open(path, "w") as fh:
        fh.write(split_to_json(split))


def load_split(path):
    from .datapipe import SplitSpec

    with open(path) as fh:
        doc = json.load(fh)
    as_arr = lambda key: np.asarray(doc[key], dtype=np.int64).reshape(-1, 2)
    return SplitSpec(seed=doc["seed"], train=as_arr("train"), val=as_arr("val"), test=as_arr("test"))
