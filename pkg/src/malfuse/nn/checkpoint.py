"""Binary model checkpoints.

Layout: magic ``DLMD`` | version u16 LE | header length u32 LE | JSON header
(architecture descriptor, best validation log loss, epoch, tensor names and
shapes) | per-tensor float32 little-endian payloads in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import CorruptCheckpoint, VersionMismatch
from .layers import Sequential, build_from_descriptor

MAGIC = b"DLMD"
VERSION = 1


@dataclass
class Checkpoint:
    descriptor: list
    arrays: list               # (name, float32 ndarray) in model state order
    best_val_logloss: float
    epoch: int


def checkpoint_from_model(model: Sequential, best_val_logloss=float("inf"), epoch=-1):
    arrays = [(name, arr.astype("<f4")) for name, arr in model.state_arrays()]
    return Checkpoint(descriptor=model.descriptor(), arrays=arrays,
                      best_val_logloss=float(best_val_logloss), epoch=int(epoch))


def model_from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> Sequential:
    model = build_from_descriptor(ckpt.descriptor, dtype=dtype)
    model.load_state_arrays([arr for _, arr in ckpt.arrays])
    return model


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    header = json.dumps({
        "descriptor": ckpt.descriptor,
        "best_val_logloss": ckpt.best_val_logloss,
        "epoch": ckpt.epoch,
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in ckpt.arrays],
    }, sort_keys=True).encode("utf-8")
    blob = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(header)), header]
    for _, arr in ckpt.arrays:
        blob.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(blob)


def loads_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 10 or data[:4] != MAGIC:
        raise CorruptCheckpoint("bad magic")
    version = struct.unpack("<H", data[4:6])[0]
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    header_len = struct.unpack("<I", data[6:10])[0]
    if len(data) < 10 + header_len:
        raise CorruptCheckpoint("truncated header")
    try:
        header = json.loads(data[10:10 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from exc
    offset = 10 + header_len
    arrays = []
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * 4
        if len(data) < offset + nbytes:
            raise CorruptCheckpoint(f"truncated tensor {spec['name']}")
        arr = np.frombuffer(data[offset:offset + nbytes], dtype="<f4").reshape(spec["shape"])
        arrays.append((spec["name"], arr.copy()))
        offset += nbytes
    if offset != len(data):
        raise CorruptCheckpoint("trailing bytes after last tensor")
    return Checkpoint(descriptor=header["descriptor"], arrays=arrays,
                      best_val_logloss=float(header["best_val_logloss"]),
                      epoch=int(header["epoch"]))


def save_checkpoint(ckpt: Checkpoint, path):
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
