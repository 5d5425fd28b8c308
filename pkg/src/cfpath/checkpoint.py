"""Versioned binary container for named float32 tensors.

Layout (all integers little-endian)::

    8 bytes   magic b"CFPCKPT\\0"
    u32       format version (1)
    u32       header length H
    H bytes   UTF-8 JSON: {"config": ..., "meta": ..., "tensors": [
                  {"name", "shape", "offset", "count"}, ...]}
    ...       tensor payload, little-endian float32, row-major,
              ``offset``/``count`` in elements from the payload start
"""
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import DataError

MAGIC = b"CFPCKPT\0"
VERSION = 1


def save_checkpoint(path, tensors, config=None, meta=None):
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(
            t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t),
            dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"config": config or {}, "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Return (tensors, config, meta); tensors are float32 torch tensors."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    payload = np.frombuffer(data, dtype="<f4", offset=16 + hlen)
    tensors = {}
    for e in header["tensors"]:
        arr = payload[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return tensors, header["config"], header["meta"]


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
