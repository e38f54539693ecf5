"""Versioned binary checkpoint container.

Layout: 8-byte magic, u32 version, u64 header length, UTF-8 JSON header,
then every parameter array as raw little-endian float64 in header order.
The header carries config, tokenizer state, free-form metadata and an
index of (name, shape, byte offset) entries.
"""

import hashlib
import json
import struct

import numpy as np

MAGIC = b"RISKCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, arrays, config=None, tokenizer=None, metadata=None):
    """Write ``arrays`` (name -> ndarray) and return the file's sha256."""
    index, offset = [], 0
    blobs = []
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8", order="C")
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"config": config, "tokenizer": tokenizer, "metadata": metadata or {},
                         "index": index}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    return file_hash(path)


def load(path):
    """Returns (arrays, header) where header holds config/tokenizer/metadata."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if len(raw) < 20:
        raise CheckpointError(f"{path}: truncated header")
    version, n = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20:20 + n])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    body = raw[20 + n:]
    arrays = {}
    for entry in header["index"]:
        size = 8 * int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + size > len(body):
            raise CheckpointError(f"{path}: truncated data for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=start).reshape(
            entry["shape"]).astype(np.float64)
    return arrays, header


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def array_digest(arrays):
    """Order-independent sha256 over named arrays (bytes + shapes)."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8", order="C")
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
