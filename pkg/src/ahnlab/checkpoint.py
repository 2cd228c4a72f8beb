"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes  b"AHNCKPT\\0"
    version    u32
    cfg_len    u32, then cfg_len bytes of UTF-8 key=value config text
    cfg_hash   32 bytes (sha256 of the architecture fields)
    n_arrays   u32
    index      n_arrays entries:
                 name_len u16, name bytes, dtype u8 (0=f32, 1=f64), flags u8 (bit0 = AHN-owned),
                 ndim u8, shape u32 * ndim, offset u64 (from file start), nbytes u64
    payloads   raw little-endian array data
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

MAGIC = b"AHNCKPT\0"
VERSION = 1
FLAG_AHN = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class ArrayRecord:
    name: str
    array: np.ndarray
    ahn: bool = False


@dataclass
class CheckpointData:
    config_text: str
    config_hash: str
    arrays: dict[str, ArrayRecord]


def atomic_write_bytes(path: str, payload: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(config_text: str, config_hash: str, records: list[ArrayRecord]) -> bytes:
    cfg = config_text.encode("utf-8")
    head = bytearray(MAGIC + struct.pack("<II", VERSION, len(cfg)) + cfg + bytes.fromhex(config_hash))
    head += struct.pack("<I", len(records))
    entries = []
    for r in records:
        arr = np.asarray(r.array)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {r.name}")
        name = r.name.encode("utf-8")
        entries.append((name, arr))
    index_size = sum(2 + len(n) + 3 + 4 * a.ndim + 16 for n, a in entries)
    offset = len(head) + index_size
    index = bytearray()
    payload = bytearray()
    for (name, arr), r in zip(entries, records):
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
        index += struct.pack("<H", len(name)) + name
        index += struct.pack("<BBB", _CODES[arr.dtype], FLAG_AHN if r.ahn else 0, arr.ndim)
        index += struct.pack(f"<{arr.ndim}I", *arr.shape)
        index += struct.pack("<QQ", offset + len(payload), len(data))
        payload += data
    return bytes(head + index + payload)


def decode(blob: bytes) -> CheckpointData:
    def take(fmt, pos):
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError("truncated checkpoint header")
        return struct.unpack_from(fmt, blob, pos), pos + size

    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic: not an AHN checkpoint")
    (version, cfg_len), pos = take("<II", 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if pos + cfg_len + 32 > len(blob):
        raise CheckpointError("truncated checkpoint header")
    config_text = blob[pos:pos + cfg_len].decode("utf-8")
    pos += cfg_len
    config_hash = blob[pos:pos + 32].hex()
    pos += 32
    (count,), pos = take("<I", pos)
    arrays = {}
    for _ in range(count):
        (name_len,), pos = take("<H", pos)
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (code, flags, ndim), pos = take("<BBB", pos)
        shape, pos = take(f"<{ndim}I", pos)
        (offset, nbytes), pos = take("<QQ", pos)
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        if offset + nbytes > len(blob):
            raise CheckpointError(f"truncated payload for {name}")
        dtype = _DTYPES[code]
        if int(np.prod(shape)) * dtype.itemsize != nbytes:
            raise CheckpointError(f"size mismatch for {name}")
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=offset).reshape(shape)
        arrays[name] = ArrayRecord(name, arr.astype(dtype.newbyteorder("="), copy=True), bool(flags & FLAG_AHN))
    return CheckpointData(config_text, config_hash, arrays)


def save_arrays(path: str, config_text: str, config_hash: str, records: list[ArrayRecord]):
    atomic_write_bytes(path, encode(config_text, config_hash, records))


def load_arrays(path: str) -> CheckpointData:
    with open(path, "rb") as fh:
        return decode(fh.read())


def save_checkpoint(model, path: str):
    ahn = set(model.ahn_names())
    records = [ArrayRecord(n, t.data, n in ahn) for n, t in model.params.items()]
    save_arrays(path, model.cfg.to_text(), model.cfg.arch_hash(), records)


def load_checkpoint(path: str):
    from .model import Model, ModelConfig

    data = load_arrays(path)
    cfg = ModelConfig.from_text(data.config_text)
    if cfg.arch_hash() != data.config_hash:
        raise CheckpointError("config hash does not match embedded config")
    model = Model(cfg)
    _assign(model, data, only_ahn=False)
    return model


def load_into(model, path: str, only_ahn: bool = False):
    """Copy arrays from ``path`` into ``model``; with ``only_ahn`` the base stays untouched."""
    data = load_arrays(path)
    if data.config_hash != model.cfg.arch_hash():
        raise CheckpointError("checkpoint config hash does not match the model")
    _assign(model, data, only_ahn)
    return model


def _assign(model, data: CheckpointData, only_ahn: bool):
    for name, rec in data.arrays.items():
        if name not in model.params:
            raise CheckpointError(f"unknown array {name!r}")
        if only_ahn and not rec.ahn:
            continue
        target = model.params[name]
        if target.data.shape != rec.array.shape:
            raise CheckpointError(f"shape mismatch for {name}: {rec.array.shape} vs {target.data.shape}")
        target.data = rec.array.astype(target.data.dtype, copy=True)
