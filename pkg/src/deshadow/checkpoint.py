"""Versioned binary container for network weights and optimizer state.

Layout::

    magic      8 bytes   b"DSHWCKPT"
    version    u32 LE
    arch hash  64 bytes  ascii sha256 hex of the architecture description
    hdr_len    u32 LE
    header     hdr_len bytes of UTF-8 JSON (architecture, metadata, tensor table)
    blob       raw little-endian tensors in tensor-table order

The tensor table lists ``(section, name, dtype, shape)``; sections are
``weights``, ``adam_m``, ``adam_v`` and ``ema``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DSHWCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_container(path: str | Path, arch: dict, arch_hash: str,
                   sections: dict[str, dict[str, np.ndarray]], meta: dict | None = None) -> None:
    table = []
    chunks = []
    for section, tensors in sections.items():
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            dt = arr.dtype.newbyteorder("<")
            table.append([section, name, dt.str, list(arr.shape)])
            chunks.append(arr.astype(dt, copy=False).tobytes())
    header = json.dumps({"arch": arch, "meta": meta or {}, "tensors": table},
                        sort_keys=True).encode("utf-8")
    if len(arch_hash) != 64:
        raise ValueError("arch_hash must be a 64-character hex digest")
    payload = b"".join([MAGIC, struct.pack("<I", VERSION), arch_hash.encode("ascii"),
                        struct.pack("<I", len(header)), header, *chunks])
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def load_container(path: str | Path, expect_hash: str | None = None):
    """Return ``(arch, arch_hash, sections, meta)``."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte offset 0")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    arch_hash = buf[12:76].decode("ascii")
    if expect_hash is not None and arch_hash != expect_hash:
        raise CheckpointError(f"{path}: architecture hash mismatch ({arch_hash[:12]} != {expect_hash[:12]})")
    (hdr_len,) = struct.unpack_from("<I", buf, 76)
    header = json.loads(buf[80 : 80 + hdr_len].decode("utf-8"))
    pos = 80 + hdr_len
    sections: dict[str, dict[str, np.ndarray]] = {}
    for section, name, dtype, shape in header["tensors"]:
        dt = np.dtype(dtype)
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dt.itemsize
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: tensor {section}/{name} truncated at byte offset {pos}")
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape)
        sections.setdefault(section, {})[name] = arr.astype(dt.newbyteorder("="))
        pos += nbytes
    return header["arch"], arch_hash, sections, header["meta"]
