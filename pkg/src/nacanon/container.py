"""Versioned binary container for model files.

Layout (all little-endian)::

    magic      4 bytes   e.g. b"NACQ"
    version    u32
    meta_len   u32, then meta_len bytes of UTF-8 ``key=value`` lines
    n_tensors  u32, then per tensor:
        name_len u16, name (UTF-8), dtype u8 (0 = f32, 1 = i32), ndim u8,
        dims u32 * ndim, row-major data

Reading then writing a file reproduces it byte for byte.
"""

from __future__ import annotations

import struct

import numpy as np

FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}


class ContainerError(ValueError):
    pass


def write_container(path, magic: bytes, meta: dict, tensors: dict) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    meta_bytes = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
    parts = [magic, struct.pack("<II", FORMAT_VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = 1 if np.issubdtype(arr.dtype, np.integer) else 0
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_b)) + name_b + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(data.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_container(path, magic: bytes) -> tuple:
    """Return ``(meta, tensors)``; f32 tensors come back as float64, i32 as int64."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != magic:
        raise ContainerError(f"{path}: expected magic {magic!r}, found {buf[:4]!r}")
    try:
        version, meta_len = struct.unpack_from("<II", buf, 4)
        if version != FORMAT_VERSION:
            raise ContainerError(f"{path}: unsupported format version {version}")
        pos = 12
        meta = {}
        for line in buf[pos : pos + meta_len].decode("utf-8").splitlines():
            key, value = line.split("=", 1)
            meta[key] = value
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + name_len].decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            dtype = _DTYPES[code]
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(buf, dtype=dtype, count=n, offset=pos).reshape(shape)
            pos += n * dtype.itemsize
            tensors[name] = arr.astype(np.int64 if code == 1 else np.float64)
    except (struct.error, KeyError, ValueError) as exc:
        if isinstance(exc, ContainerError):
            raise
        raise ContainerError(f"{path}: corrupt container ({exc})") from exc
    if pos != len(buf):
        raise ContainerError(f"{path}: {len(buf) - pos} trailing bytes")
    return meta, tensors


def f32_round(x: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value while keeping float64 storage."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)
