"""Binary checkpoint files.

Layout (little endian)::

    8 bytes   magic b"HDKDCKPT"
    1 byte    format version
    32 bytes  sha256 of the canonical config JSON
    u64       training step
    u32 + ..  config JSON
    u32 + ..  metrics JSON
    u32       number of tensors, then per tensor:
              u16 + name, u8 dtype code, u8 ndim, u32 * ndim shape, raw C-order data

Serialisation is canonical (sorted JSON keys, insertion-ordered tensors), so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from hetdistill.ecg import config_hash
from hetdistill.errors import ContractError

MAGIC = b"HDKDCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


@dataclass
class Checkpoint:
    params: dict
    config: dict
    step: int = 0
    metrics: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def copy(self) -> "Checkpoint":
        return Checkpoint(params={k: v.copy() for k, v in self.params.items()},
                          config=json.loads(json.dumps(self.config)), step=self.step,
                          metrics=json.loads(json.dumps(self.metrics)))


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<B", VERSION))
    out.write(bytes.fromhex(ckpt.config_hash))
    out.write(struct.pack("<Q", int(ckpt.step)))
    for blob in (_json_bytes(ckpt.config), _json_bytes(ckpt.metrics)):
        out.write(struct.pack("<I", len(blob)))
        out.write(blob)
    out.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise ContractError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode()
        out.write(struct.pack("<H", len(raw_name)))
        out.write(raw_name)
        out.write(struct.pack("<BB", code, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return out.getvalue()


def from_bytes(blob: bytes, expected_hash: str | None = None) -> Checkpoint:
    buf = io.BytesIO(blob)

    def read(n):
        chunk = buf.read(n)
        if len(chunk) != n:
            raise ContractError("truncated checkpoint")
        return chunk

    if read(8) != MAGIC:
        raise ContractError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<B", read(1))
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    stored_hash = read(32).hex()
    if expected_hash is not None and stored_hash != expected_hash:
        raise ContractError("checkpoint was written under a different config")
    (step,) = struct.unpack("<Q", read(8))
    docs = []
    for _ in range(2):
        (n,) = struct.unpack("<I", read(4))
        docs.append(json.loads(read(n)))
    config, metrics = docs
    if config_hash(config) != stored_hash:
        raise ContractError("checkpoint config does not match its stored hash")
    (count,) = struct.unpack("<I", read(4))
    params = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", read(2))
        name = read(n).decode()
        code, ndim = struct.unpack("<BB", read(2))
        shape = struct.unpack(f"<{ndim}I", read(4 * ndim))
        dtype = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        params[name] = np.frombuffer(read(size), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return Checkpoint(params=params, config=config, step=step, metrics=metrics)


def save(ckpt: Checkpoint, path) -> str:
    path = os.fspath(path)
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))
    return path


def load(path, expected_hash: str | None = None) -> Checkpoint:
    with open(os.fspath(path), "rb") as fh:
        return from_bytes(fh.read(), expected_hash)
