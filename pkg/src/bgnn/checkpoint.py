"""Versioned binary checkpoints: magic "BGNN", u32 version, step counter,
a JSON config snapshot, then length-prefixed named fp64 arrays.  All
integers little-endian; round-trips are bit-exact."""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ContractError

MAGIC = b"BGNN"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], config_snapshot: dict,
                    step: int):
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<Q", step)
    config_bytes = json.dumps(config_snapshot, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(config_bytes))
    blob += config_bytes
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise ContractError(f"parameter name too long: {name!r}")
        blob += struct.pack("<H", len(name_bytes))
        blob += name_bytes
        arr = np.asarray(arr, dtype="<f8")
        blob += struct.pack("<B", arr.ndim)
        for extent in arr.shape:
            blob += struct.pack("<I", extent)
        blob += arr.tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, int]:
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise ContractError("not a checkpoint file (bad magic)")
    offset = 4
    (version,) = struct.unpack_from("<I", view, offset)
    offset += 4
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    (step,) = struct.unpack_from("<Q", view, offset)
    offset += 8
    (config_len,) = struct.unpack_from("<I", view, offset)
    offset += 4
    config_snapshot = json.loads(bytes(view[offset:offset + config_len]))
    offset += config_len
    (n_arrays,) = struct.unpack_from("<I", view, offset)
    offset += 4
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", view, offset)
        offset += 2
        name = bytes(view[offset:offset + name_len]).decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", view, offset)
        offset += 1
        shape = []
        for _ in range(ndim):
            (extent,) = struct.unpack_from("<I", view, offset)
            offset += 4
            shape.append(extent)
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(view, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        arrays[name] = arr.reshape(shape).astype(np.float64)
    if offset != len(blob):
        raise ContractError("trailing bytes in checkpoint")
    return arrays, config_snapshot, step
