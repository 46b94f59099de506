"""``.vmd`` checkpoint files.

Layout (all little-endian)::

    b"VMD1"  uint32 version
    uint32 n, n bytes of UTF-8 JSON  {"spec": ..., "seed": ..., "meta": ...}
    uint32 array count
    per array: uint16 name length, name, uint8 ndim, ndim x uint32 shape, float32 data (C order)

Arrays appear in network declaration order.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .network import NetworkParams, NetworkSpec

MAGIC = b"VMD1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write(path, data: bytes):
    """Write to a temp file in the same directory, then rename over ``path``."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(params: NetworkParams, meta: dict | None = None) -> bytes:
    header = json.dumps({"spec": params.spec.to_dict(), "seed": params.seed, "meta": meta or {}},
                        sort_keys=True).encode()
    arrays = list(params.arrays())
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(arrays))]
    for layer, key, arr in arrays:
        name = f"{layer}/{key}".encode()
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> tuple[NetworkParams, dict]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("checkpoint is truncated")
        out = buf[pos:pos + n]
        pos += n
        return out

    version, hlen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(take(hlen))
    spec = NetworkSpec.from_dict(header["spec"])
    (count,) = struct.unpack("<I", take(4))
    layers: dict = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        layer, key = take(nlen).decode().split("/")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape))
        layers.setdefault(layer, {})[key] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint data")
    expected = {name for name, _, _ in spec.layers()}
    if set(layers) != expected:
        raise CheckpointError("checkpoint arrays do not match its network spec")
    for name, ls, c_in in spec.layers():
        if layers[name]["W"].shape != (ls.fms, c_in) + ls.kernel:
            raise CheckpointError(f"kernel shape of {name} does not match its network spec")
    return NetworkParams(spec, layers, header.get("seed")), header.get("meta", {})


def save(params: NetworkParams, path, meta: dict | None = None):
    atomic_write(path, encode(params, meta))


def load(path) -> tuple[NetworkParams, dict]:
    with open(path, "rb") as f:
        return decode(f.read())
