"""Frozen-embedding dataset layer: binary record files, manifests, toy encoder.

Record file layout (little-endian):

    offset  size  field
    0       4     magic b"DKVB"
    4       4     u32 version (1)
    8       4     u32 dtype code (0 = float32)
    12      4     u32 t  (token dimension)
    16      4     u32 h  (hidden dimension)
    20      1     u8  cls_flag (1 if row 0 is a sequence-level special token)
    21      8     u64 record count
    29      ...   records, each: u64 id_hash | u32 label | u32 task_id |
                  u32 domain_id | u32 valid_tokens | t*h float32 row-major

Every record in a file shares (t, h, cls_flag), so the payload has a fixed
stride and can be memory-mapped. Reads are fail-closed: any header or size
mismatch raises FormatError naming the byte offset, and no partial records are
returned.

Manifests are JSON-lines text, one line per referenced record file; all lines
must agree on (t, h, cls_flag).
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidInputError
from .numkit import RngStream

MAGIC = b"DKVB"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIIIIBQ")  # magic, version, dtype, t, h, cls_flag, count
HEADER_SIZE = _HEADER.size  # 29

_HEX16 = re.compile(r"^[0-9a-f]{16}$")


def hash_sample_id(sample_id: str) -> int:
    """Stable u64 identity for a sample-ID string.

    Canonical 16-hex-digit IDs (what read_records reconstructs) parse back to
    their own value, so file roundtrips preserve identity exactly.
    """
    if _HEX16.match(sample_id):
        return int(sample_id, 16)
    return int.from_bytes(hashlib.blake2b(sample_id.encode(), digest_size=8).digest(), "little")


@dataclass
class EmbeddingRecord:
    """One sample: frozen encoding z (t x h float32) plus labels and metadata.

    Equality compares the persisted identity (id hash, not the raw string) and
    the exact z payload bytes.
    """

    sample_id: str
    z: np.ndarray
    label: int
    task_id: int = 0
    domain_id: int = 0
    valid_tokens: int = 0

    def __post_init__(self):
        self.z = np.ascontiguousarray(self.z, dtype=np.float32)
        if self.z.ndim != 2:
            raise InvalidInputError(f"record z must be 2-D, got shape {self.z.shape}")
        if self.valid_tokens == 0:
            self.valid_tokens = self.z.shape[0]
        if not (1 <= self.valid_tokens <= self.z.shape[0]):
            raise InvalidInputError(
                f"valid_tokens {self.valid_tokens} outside [1, {self.z.shape[0]}]")
        if self.label < 0:
            raise InvalidInputError("label must be >= 0")

    @property
    def id_hash(self) -> int:
        return hash_sample_id(self.sample_id)

    @property
    def t(self) -> int:
        return self.z.shape[0]

    @property
    def h(self) -> int:
        return self.z.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (self.id_hash == other.id_hash
                and self.label == other.label
                and self.task_id == other.task_id
                and self.domain_id == other.domain_id
                and self.valid_tokens == other.valid_tokens
                and self.z.shape == other.z.shape
                and self.z.tobytes() == other.z.tobytes())


def _record_dtype(t: int, h: int) -> np.dtype:
    return np.dtype([
        ("id", "<u8"), ("label", "<u4"), ("task", "<u4"),
        ("domain", "<u4"), ("valid", "<u4"), ("z", "<f4", (t, h)),
    ])


def write_records(records, path, *, t: int | None = None, h: int | None = None,
                  cls_flag: bool = False) -> None:
    """Write records to `path`. Dimensions are inferred from the first record;
    pass t/h explicitly only for an empty file."""
    records = list(records)
    if records:
        t, h = records[0].t, records[0].h
        for r in records:
            if (r.t, r.h) != (t, h):
                raise InvalidInputError(
                    f"record {r.sample_id!r} has shape {(r.t, r.h)}, expected {(t, h)}")
            if not np.isfinite(r.z).all():
                raise InvalidInputError(f"record {r.sample_id!r} has non-finite entries")
    else:
        t = t or 0
        h = h or 0
    dt = _record_dtype(t, h)
    arr = np.zeros(len(records), dtype=dt)
    for i, r in enumerate(records):
        arr[i] = (r.id_hash, r.label, r.task_id, r.domain_id, r.valid_tokens, r.z)
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, t, h, int(cls_flag), len(records))
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())


def read_header(path) -> tuple[int, int, bool, int]:
    """Validated (t, h, cls_flag, count) from a record file's header."""
    with open(path, "rb") as f:
        raw = f.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header, {len(raw)} bytes < {HEADER_SIZE}")
    magic, version, dtype, t, h, cls_flag, count = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype} at offset 8")
    if count > 0 and (t == 0 or h == 0):
        raise FormatError(f"{path}: zero dimension t={t} h={h} at offset 12 with count {count}")
    return t, h, bool(cls_flag), count


def read_records(path, *, mmap: bool = False) -> list[EmbeddingRecord]:
    """Read all records; z arrays are read-only views (memory-mapped if asked)."""
    t, h, cls_flag, count = read_header(path)
    stride = 24 + 4 * t * h  # plain int: header fields may be corrupt/huge
    expected = HEADER_SIZE + count * stride
    actual = os.path.getsize(path)
    if actual != expected:
        raise FormatError(
            f"{path}: payload size mismatch, expected {expected} bytes, got {actual} "
            f"(records start at offset {HEADER_SIZE}, stride {stride})")
    if count == 0:
        return []
    if stride >= 2 ** 31:
        raise FormatError(f"{path}: record stride {stride} exceeds the supported size")
    dt = _record_dtype(t, h)
    if mmap:
        arr = np.memmap(path, dtype=dt, mode="r", offset=HEADER_SIZE, shape=(count,))
    else:
        with open(path, "rb") as f:
            f.seek(HEADER_SIZE)
            arr = np.frombuffer(f.read(), dtype=dt, count=count)
    out = []
    for i in range(count):
        row = arr[i]
        valid = int(row["valid"])
        if not (1 <= valid <= t):
            raise FormatError(
                f"{path}: record {i} valid_tokens {valid} outside [1, {t}] "
                f"at offset {HEADER_SIZE + i * stride + 20}")
        rec = EmbeddingRecord.__new__(EmbeddingRecord)
        rec.sample_id = f"{int(row['id']):016x}"
        rec.z = row["z"]
        rec.label = int(row["label"])
        rec.task_id = int(row["task"])
        rec.domain_id = int(row["domain"])
        rec.valid_tokens = valid
        out.append(rec)
    return out


# --- manifests ---------------------------------------------------------------


@dataclass
class DatasetManifest:
    """Describes one split of a dataset as a list of record files.

    `files` are stored relative to the manifest location; `counts` mirrors the
    per-file record counts for cheap N_k queries.
    """

    name: str
    split: str
    t: int
    h: int
    cls_flag: bool
    encoder: str
    files: list = field(default_factory=list)
    counts: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return sum(self.counts)


def manifest_for_file(path, *, name: str, split: str, encoder: str) -> DatasetManifest:
    t, h, cls_flag, count = read_header(path)
    return DatasetManifest(name=name, split=split, t=t, h=h, cls_flag=cls_flag,
                           encoder=encoder, files=[os.path.basename(path)], counts=[count])


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w") as f:
        for file, count in zip(manifest.files, manifest.counts):
            f.write(json.dumps({
                "name": manifest.name, "split": manifest.split, "count": count,
                "t": manifest.t, "h": manifest.h, "cls_flag": manifest.cls_flag,
                "encoder": manifest.encoder, "file": file,
            }, sort_keys=True) + "\n")


def read_manifest(path, *, check_files: bool = True) -> DatasetManifest:
    base = os.path.dirname(os.path.abspath(path))
    manifest = None
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: not valid JSON: {e}") from e
            keys = {"name", "split", "count", "t", "h", "cls_flag", "encoder", "file"}
            if not keys <= rec.keys():
                raise FormatError(f"{path}:{lineno}: missing fields {sorted(keys - rec.keys())}")
            if manifest is None:
                manifest = DatasetManifest(name=rec["name"], split=rec["split"], t=rec["t"],
                                           h=rec["h"], cls_flag=bool(rec["cls_flag"]),
                                           encoder=rec["encoder"])
            elif (rec["t"], rec["h"], bool(rec["cls_flag"])) != (manifest.t, manifest.h, manifest.cls_flag):
                raise FormatError(f"{path}:{lineno}: (t, h, cls_flag) disagrees with first entry")
            manifest.files.append(rec["file"])
            manifest.counts.append(rec["count"])
    if manifest is None:
        raise FormatError(f"{path}: empty manifest")
    if check_files:
        for file, count in zip(manifest.files, manifest.counts):
            full = os.path.join(base, file)
            if not os.path.exists(full):
                raise FormatError(f"{path}: referenced file {file} does not exist")
            t, h, cls_flag, n = read_header(full)
            if (t, h, cls_flag, n) != (manifest.t, manifest.h, manifest.cls_flag, count):
                raise FormatError(f"{path}: header of {file} disagrees with manifest entry")
    return manifest


def load_manifest_records(manifest: DatasetManifest, manifest_path, *,
                          mmap: bool = False) -> list[EmbeddingRecord]:
    base = os.path.dirname(os.path.abspath(manifest_path))
    records = []
    for file in manifest.files:
        records.extend(read_records(os.path.join(base, file), mmap=mmap))
    return records


# --- toy encoder --------------------------------------------------------------


@dataclass(frozen=True)
class ToyEncoderSpec:
    """Deterministic stand-in for a frozen text encoder.

    Token IDs map through a seeded hash to fixed pseudo-random rows; an optional
    averaging window of +-`window` positions adds weak contextualization. With
    `cls` set, row 0 is a fixed per-spec sentinel.
    """

    seed: int
    vocab_hash_bits: int = 16
    t: int = 16
    h: int = 32
    window: int = 0
    cls: bool = False

    def __post_init__(self):
        if self.t <= 0 or self.h <= 0:
            raise InvalidInputError("toy encoder needs t, h > 0")


def _toy_row(spec: ToyEncoderSpec, namespace: int, bucket: int) -> np.ndarray:
    gen = np.random.default_rng((spec.seed, namespace, bucket))
    return gen.standard_normal(spec.h).astype(np.float32)


def toy_encode(token_ids, spec: ToyEncoderSpec) -> tuple[np.ndarray, int]:
    """Encode a token-ID sequence to a (t, h) float32 matrix, returning
    (z, valid_tokens). Long sequences truncate; short ones zero-pad."""
    token_ids = list(token_ids)
    if not token_ids:
        raise InvalidInputError("toy_encode: empty token sequence")
    mask = (1 << spec.vocab_hash_bits) - 1
    capacity = spec.t - (1 if spec.cls else 0)
    kept = token_ids[:capacity]
    raw = np.stack([
        _toy_row(spec, 7, int.from_bytes(
            hashlib.blake2b(int(tok).to_bytes(8, "little", signed=True),
                            digest_size=8).digest(), "little") & mask)
        for tok in kept
    ])
    if spec.window > 0:
        smoothed = np.empty_like(raw)
        for i in range(len(kept)):
            lo, hi = max(0, i - spec.window), min(len(kept), i + spec.window + 1)
            smoothed[i] = raw[lo:hi].mean(axis=0)
        raw = smoothed
    z = np.zeros((spec.t, spec.h), dtype=np.float32)
    offset = 0
    if spec.cls:
        z[0] = _toy_row(spec, 11, 0)
        offset = 1
    z[offset:offset + len(kept)] = raw
    return z, offset + len(kept)


def subsample_per_class(records, per_class: int, rng: RngStream) -> list[EmbeddingRecord]:
    """Keep at most `per_class` records per label (seeded choice, original order).

    Used to build low-resource manifests for single-head runs.
    """
    by_label: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_label.setdefault(r.label, []).append(i)
    keep = set()
    for label in sorted(by_label):
        idx = by_label[label]
        order = rng.permutation(len(idx))
        keep.update(idx[j] for j in order[:per_class])
    return [r for i, r in enumerate(records) if i in keep]
