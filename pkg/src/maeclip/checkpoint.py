"""MCLP checkpoint files: a flat list of named little-endian tensors.

Layout: magic ``MCLP``, u32 format version, u32 tensor count, then per tensor
u32 name length, UTF-8 name, u32 ndim, u32 dims, u8 dtype tag (0=f32, 1=f64)
and the raw data. Optimizer moments live under ``opt/``, the RNG state under
``rng/state`` and the resolved run config (as byte values) under
``meta/config``.
"""

from __future__ import annotations

import hashlib
import os
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"MCLP"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointFormatError(ValueError):
    """The file is not a well-formed MCLP checkpoint."""


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write atomically (temp file then rename)."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in _TAGS:
                raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            tag = _TAGS[arr.dtype]
            fh.write(struct.pack("<B", tag))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    os.replace(tmp, path)


def _take(fh: BinaryIO, n: int, field: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(f"truncated while reading {field}")
    return buf


def read_tensors(path) -> dict[str, np.ndarray]:
    """Parse the whole file before returning anything."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if _take(fh, 4, "magic") != MAGIC:
            raise CheckpointFormatError("bad magic (expected MCLP)")
        version, count = struct.unpack("<II", _take(fh, 8, "header"))
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported format version {version}")
        for i in range(count):
            (nlen,) = struct.unpack("<I", _take(fh, 4, f"name length of tensor #{i}"))
            name = _take(fh, nlen, f"name of tensor #{i}").decode("utf-8")
            (ndim,) = struct.unpack("<I", _take(fh, 4, f"ndim of '{name}'"))
            dims = struct.unpack(f"<{ndim}I", _take(fh, 4 * ndim, f"dims of '{name}'"))
            (tag,) = struct.unpack("<B", _take(fh, 1, f"dtype tag of '{name}'"))
            if tag not in _DTYPES:
                raise CheckpointFormatError(f"unknown dtype tag {tag} for '{name}'")
            dt = _DTYPES[tag]
            n = int(np.prod(dims)) if ndim else 1
            data = _take(fh, n * dt.itemsize, f"data of '{name}'")
            out[name] = np.frombuffer(data, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        if fh.read(1):
            raise CheckpointFormatError("trailing bytes after the last tensor")
    return out


def encode_rng_state(rng: np.random.Generator) -> np.ndarray:
    """PCG64 state as float64 values holding 32-bit chunks (exactly representable)."""
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise TypeError("only PCG64 generators are supported")
    words = []
    for big in (st["state"]["state"], st["state"]["inc"]):
        words.extend((big >> (32 * k)) & 0xFFFFFFFF for k in range(4))
    words.append(st["has_uint32"])
    words.append(st["uinteger"])
    return np.asarray(words, dtype=np.float64)


def decode_rng_state(arr: np.ndarray) -> np.random.Generator:
    words = [int(w) for w in np.asarray(arr)]
    if len(words) != 10:
        raise CheckpointFormatError("rng/state must hold 10 words")
    state = sum(w << (32 * k) for k, w in enumerate(words[0:4]))
    inc = sum(w << (32 * k) for k, w in enumerate(words[4:8]))
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": state, "inc": inc},
        "has_uint32": words[8],
        "uinteger": words[9],
    }
    return np.random.Generator(bg)


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8).tolist()).decode("utf-8")


def params_digest(state: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name]).tobytes())
    return h.hexdigest()
