"""Standalone writer/checker for the embedding record wire format.

Layout (little-endian), kept in lockstep with the consumer toolkit:

    "DKVB" | u32 version=1 | u32 dtype(0=f32) | u32 t | u32 h | u8 cls_flag
    | u64 count, then per record: u64 id_hash | u32 label | u32 task_id |
    u32 domain_id | u32 valid_tokens | t*h float32 row-major.

The writer streams batches and patches the record count on close, so exports
never hold more than one batch of embeddings in memory.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

MAGIC = b"DKVB"
VERSION = 1
DTYPE_F32 = 0
HEADER = struct.Struct("<4sIIIIBQ")
RECORD_META = struct.Struct("<QIIII")


def hash_sample_id(sample_id: str) -> int:
    return int.from_bytes(
        hashlib.blake2b(sample_id.encode(), digest_size=8).digest(), "little")


class RecordWriter:
    """Append-only record file writer with a count patched at close."""

    def __init__(self, path, t: int, h: int, cls_flag: bool):
        self.path = path
        self.t, self.h, self.cls_flag = t, h, cls_flag
        self.count = 0
        self._f = open(path, "wb")
        self._f.write(HEADER.pack(MAGIC, VERSION, DTYPE_F32, t, h,
                                  int(cls_flag), 0))

    def append(self, sample_id: str, z: np.ndarray, label: int, task_id: int,
               domain_id: int, valid_tokens: int) -> None:
        z = np.ascontiguousarray(z, dtype="<f4")
        if z.shape != (self.t, self.h):
            raise ValueError(f"embedding shape {z.shape} != ({self.t}, {self.h})")
        if not np.isfinite(z).all():
            raise ValueError(f"sample {sample_id!r}: non-finite embedding")
        if not (1 <= valid_tokens <= self.t):
            raise ValueError(f"sample {sample_id!r}: valid_tokens {valid_tokens} "
                             f"outside [1, {self.t}]")
        self._f.write(RECORD_META.pack(hash_sample_id(sample_id), label,
                                       task_id, domain_id, valid_tokens))
        self._f.write(z.tobytes())
        self.count += 1

    def close(self) -> None:
        self._f.seek(21)
        self._f.write(struct.pack("<Q", self.count))
        self._f.close()

    def abort(self) -> None:
        # leave the header count at 0 so the trailing partial payload makes
        # the file fail its size check instead of parsing as a short export
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()


def write_manifest(path, *, name: str, split: str, encoder: str, data_file,
                   t: int, h: int, cls_flag: bool, count: int) -> None:
    rel = os.path.basename(data_file)
    with open(path, "w") as f:
        f.write(json.dumps({
            "name": name, "split": split, "count": count, "t": t, "h": h,
            "cls_flag": bool(cls_flag), "encoder": encoder, "file": rel,
        }, sort_keys=True) + "\n")


def check_file(path, *, expect_h: int | None = None):
    """Per-field checks against the format contract. Returns a list of
    (check, ok, detail) without raising, so callers can print a report."""
    checks = []

    def add(name, ok, detail=""):
        checks.append((name, bool(ok), detail))
        return ok

    if not add("exists", os.path.exists(path), path):
        return checks
    size = os.path.getsize(path)
    if not add("header size", size >= HEADER.size, f"{size} bytes"):
        return checks
    with open(path, "rb") as f:
        magic, version, dtype, t, h, cls_flag, count = HEADER.unpack(
            f.read(HEADER.size))
        add("magic", magic == MAGIC, repr(magic))
        add("version", version == VERSION, str(version))
        add("dtype", dtype == DTYPE_F32, str(dtype))
        add("dims", (t > 0 and h > 0) or count == 0, f"t={t} h={h}")
        if expect_h is not None:
            add("hidden size", h == expect_h, f"{h} (expected {expect_h})")
        stride = RECORD_META.size + 4 * t * h
        add("payload size", size == HEADER.size + count * stride,
            f"{size} bytes for {count} records of stride {stride}")
        if not all(ok for _, ok, _ in checks):
            return checks
        read = 0
        finite = True
        valid_ok = True
        for i in range(count):
            meta = f.read(RECORD_META.size)
            if len(meta) < RECORD_META.size:
                break
            _, _, _, _, valid = RECORD_META.unpack(meta)
            payload = f.read(4 * t * h)
            if len(payload) < 4 * t * h:
                break
            z = np.frombuffer(payload, dtype="<f4")
            finite &= bool(np.isfinite(z).all())
            valid_ok &= 1 <= valid <= t
            read += 1
        add("record count", read == count, f"read {read} of {count}")
        add("valid_tokens bounds", valid_ok)
        add("finite payload", finite)
    return checks
