"""LFCK binary checkpoints: metadata text block plus named f32 tensors.

Layout (little-endian):
    magic 'LFCK', version u32
    meta_len u32, then meta_len bytes of UTF-8 'key=value' lines
    tensor_count u32
    per tensor: name_len u16, name UTF-8, rank u8, dims u32 each, f32 payload

Tensors are written in sorted name order and cast to float32, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

CHECKPOINT_MAGIC = b"LFCK"
CHECKPOINT_VERSION = 1


def encode_metadata(meta: dict) -> bytes:
    lines = []
    for key in meta:
        value = str(meta[key])
        if "\n" in key or "=" in key:
            raise FormatError(f"metadata key {key!r} may not contain '=' or newlines")
        if "\n" in value:
            raise FormatError(f"metadata value for {key!r} may not contain newlines")
        lines.append(f"{key}={value}\n")
    return "".join(lines).encode("utf-8")


def decode_metadata(blob: bytes) -> dict:
    meta = {}
    for line in blob.decode("utf-8").splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        meta[key] = value
    return meta


def save_checkpoint(path, tensors: dict, metadata: dict) -> str:
    meta_blob = encode_metadata(metadata)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            # asarray keeps 0-d tensors 0-d (ascontiguousarray would not)
            arr = np.asarray(tensors[name], dtype="<f4", order="C")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())
    return str(path)


def load_checkpoint(path):
    """Returns (tensors, metadata); rejects bad magic, version, or lengths."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise FormatError("checkpoint truncated")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    magic, version = take("<4sI")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = take("<I")
    if off + meta_len > len(blob):
        raise FormatError("checkpoint truncated in metadata")
    metadata = decode_metadata(blob[off:off + meta_len])
    off += meta_len
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = take("<B")
        dims = [take("<I")[0] for _ in range(rank)]
        numel = int(np.prod(dims)) if dims else 1
        payload = numel * 4
        if off + payload > len(blob):
            raise FormatError(f"checkpoint truncated in tensor {name!r}")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=numel,
                                      offset=off).reshape(dims).copy()
        off += payload
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after tensors")
    return tensors, metadata
