"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"ICAE" | u32 version | u32 n_tensors
    per tensor: u32 name_len | name utf-8 | u8 dtype tag | u32 rank | u64 * rank | f64 payload
    u32 n_frozen | per name: u32 len | utf-8
    u32 meta_len | meta JSON (sorted keys)
    32-byte SHA-256 of everything above

Tensors are written in sorted name order so equal stores give equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .model import ParamStore

MAGIC = b"ICAE"
VERSION = 1
_F64 = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(store: ParamStore, meta: dict | None = None) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(store))]
    for name, t in store.items():
        nb = name.encode("utf-8")
        data = np.ascontiguousarray(t.data, dtype="<f8")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<BI", _F64, data.ndim))
        out.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        out.append(data.tobytes())
    frozen = sorted(store.frozen)
    out.append(struct.pack("<I", len(frozen)))
    for name in frozen:
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb)
    mb = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(mb)) + mb)
    body = b"".join(out)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def parse_checkpoint(data: bytes) -> tuple[ParamStore, dict]:
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(data) < 12 + 32:
        raise CheckpointError("truncated checkpoint")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body, digest = data[:-32], data[-32:]
    r = _Reader(body)
    r.take(8)
    try:
        (count,) = r.unpack("<I")
        tensors = {}
        for _ in range(count):
            name = r.name()
            tag, rank = r.unpack("<BI")
            if tag != _F64:
                raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
            shape = r.unpack(f"<{rank}Q")
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
            tensors[name] = arr
        (nf,) = r.unpack("<I")
        frozen = [r.name() for _ in range(nf)]
        (ml,) = r.unpack("<I")
        meta = json.loads(r.take(ml).decode("utf-8"))
    except CheckpointError:
        if hashlib.sha256(body).digest() != digest:
            raise CheckpointError("truncated or corrupted checkpoint") from None
        raise
    except (UnicodeDecodeError, json.JSONDecodeError, ValueError):
        raise CheckpointError("checkpoint checksum mismatch") from None
    if r.pos != len(body):
        raise CheckpointError("trailing bytes before checksum")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    unknown = set(frozen) - set(tensors)
    if unknown:
        raise CheckpointError(f"frozen manifest names missing tensors: {sorted(unknown)}")
    store = ParamStore()
    for name, arr in tensors.items():
        store.add(name, Tensor(arr), frozen=name in frozen)
    return store, meta


def save_checkpoint(store: ParamStore, path: str | Path, meta: dict | None = None) -> str:
    """Write atomically; returns the SHA-256 hex digest of the file."""
    data = checkpoint_bytes(store, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FileNotFoundError(f"cannot read checkpoint {path}: {e.strerror}") from None
    return parse_checkpoint(data)


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
