"""Binary checkpoint container: a JSON header plus named float32 tensors.

Layout (all integers little-endian uint32 unless noted):

    magic         8 bytes  b"MSNCKPT1"
    header_len    u32
    header        UTF-8 JSON (sorted keys)
    n_tensors     u32
    per tensor:   name_len u32, name UTF-8, ndim u32, dims u32...,
                  data as little-endian float32

Tensors are written in sorted name order, so identical contents produce
byte-identical files; float32 payloads round-trip bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError

MAGIC = b"MSNCKPT1"
FORMAT_VERSION = 1


def write_tensor_file(path: Path | str, header: dict, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    header = dict(header)
    header.setdefault("format_version", FORMAT_VERSION)
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    return path


def read_tensor_file(path: Path | str) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint file not found: {path}")
    try:
        blob = path.read_bytes()
        offset = 0

        def take(n: int) -> bytes:
            nonlocal offset
            if offset + n > len(blob):
                raise CheckpointError(f"truncated checkpoint file: {path}")
            out = blob[offset:offset + n]
            offset += n
            return out

        if take(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
        (header_len,) = struct.unpack("<I", take(4))
        header = json.loads(take(header_len).decode("utf-8"))
        (n_tensors,) = struct.unpack("<I", take(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", take(4))
            name = take(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            data = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
            tensors[name] = data.copy()
        if offset != len(blob):
            raise CheckpointError(f"trailing bytes in checkpoint file: {path}")
        return header, tensors
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint file {path}: {exc}") from exc
