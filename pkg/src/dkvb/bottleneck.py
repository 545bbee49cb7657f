"""Discrete key-value bottleneck core.

Encodings are split into per-head slices, each slice is quantized to its
nearest key (L2) in that head's codebook, and the paired trainable value rows
are retrieved and aggregated into the representation handed to a decoder.
Keys are initialized by streaming EMA cluster updates and then frozen; no
gradient ever reaches them. Every forward pass reports the exact set of
(head, key) pairs it touched so the optimizer can stay row-local.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, InvalidInputError, StateError
from .heads import ParametricDecoder, pool
from .numkit import RngStream

try:
    import numba
    _HAS_NUMBA = True
except ImportError:  # pure-numpy fallback keeps results identical
    _HAS_NUMBA = False

EMA_COUNT_EPS = 1e-6

# below this many candidate scores the numpy path wins (no jit warmup)
_NUMBA_MIN_SCORES = 1 << 21


@dataclass
class BottleneckConfig:
    segmentation: str = "hidden"          # "hidden" | "token"
    d_key: int = 12
    n_keys: int = 4096
    d_value: int | None = None            # None: class count (NP) / d_key (P)
    pooling_mode: str = "mean"            # "mean" | "cls"
    pooling_position: str = "after"       # "before" | "after"
    decoder: str = "nonparametric"        # "parametric" | "nonparametric"
    ema_decay: float = 0.2
    init_epochs: int = 3

    def validate(self, t: int, h: int, cls_flag: bool) -> None:
        if self.segmentation not in ("hidden", "token"):
            raise ConfigError(f"unknown segmentation {self.segmentation!r}")
        if self.pooling_mode not in ("mean", "cls"):
            raise ConfigError(f"unknown pooling mode {self.pooling_mode!r}")
        if self.pooling_position not in ("before", "after"):
            raise ConfigError(f"unknown pooling position {self.pooling_position!r}")
        if self.decoder not in ("parametric", "nonparametric"):
            raise ConfigError(f"unknown decoder kind {self.decoder!r}")
        if self.d_key <= 0 or self.n_keys <= 0:
            raise ConfigError("d_key and n_keys must be positive")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ConfigError(f"ema decay must be in [0, 1), got {self.ema_decay}")
        if self.segmentation == "hidden" and h % self.d_key != 0:
            raise ConfigError(f"hidden size {h} not divisible by d_key {self.d_key}")
        if self.segmentation == "token" and self.pooling_position != "after":
            raise ConfigError("token segmentation requires pooling after the bottleneck")
        if self.pooling_position == "before" and self.segmentation != "hidden":
            raise ConfigError("pooling before the bottleneck requires hidden segmentation")
        if self.segmentation == "token" and t // self.d_key == 0:
            raise ConfigError(f"token axis {t} shorter than d_key {self.d_key}")
        if self.pooling_mode == "cls" and not cls_flag:
            raise ConfigError("cls pooling requires a dataset with a sequence-level token")

    def head_count(self, t: int, h: int) -> int:
        if self.segmentation == "hidden":
            return h // self.d_key
        return t // self.d_key

    def rep_rows(self, t: int, h: int) -> int:
        """Number of rows in the representation handed to the decoder."""
        if self.segmentation == "token" and self.pooling_mode == "cls" \
                and self.pooling_position == "after":
            return 1
        return self.head_count(t, h)


class Codebooks:
    """All heads' key/value tables plus EMA accumulators.

    keys: (C, K, d_key), values: (C, K, d_value). Keys are trainable only
    during EMA init; `freeze` records a hash of the key table that
    `verify_keys` re-checks, making accidental key mutation detectable.
    """

    def __init__(self, keys, values, ema_count=None, ema_sum=None,
                 frozen: bool = False, key_hash: str | None = None):
        self.keys = keys
        self.values = values
        self.ema_count = np.zeros(keys.shape[:2]) if ema_count is None else ema_count
        self.ema_sum = np.zeros_like(keys, dtype=np.float64) if ema_sum is None else ema_sum
        self.frozen = frozen
        self.key_hash = key_hash

    @classmethod
    def build(cls, n_heads: int, n_keys: int, d_key: int, d_value: int,
              rng: RngStream, dtype=np.float32) -> "Codebooks":
        bound = 1.0 / np.sqrt(d_key)
        keys = rng.derive("keys").uniform(n_heads * n_keys * d_key, -bound, bound)
        values = rng.derive("values").normal((n_heads, n_keys, d_value), scale=0.02)
        return cls(keys.reshape(n_heads, n_keys, d_key).astype(dtype),
                   values.astype(dtype))

    @property
    def n_heads(self) -> int:
        return self.keys.shape[0]

    @property
    def n_keys(self) -> int:
        return self.keys.shape[1]

    @property
    def d_key(self) -> int:
        return self.keys.shape[2]

    @property
    def d_value(self) -> int:
        return self.values.shape[2]

    @property
    def values_flat(self) -> np.ndarray:
        """(C*K, d_value) view sharing memory with `values`; row index = c*K + k."""
        return self.values.reshape(-1, self.d_value)

    def compute_key_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.keys).tobytes()).hexdigest()

    def freeze(self) -> None:
        self.frozen = True
        self.key_hash = self.compute_key_hash()

    def verify_keys(self) -> bool:
        """True iff the key table still matches the hash recorded at freeze."""
        return self.frozen and self.key_hash == self.compute_key_hash()

    def reopen_for_init(self) -> None:
        """Unfreeze for another EMA phase: accumulators reset, key positions and
        values kept as they are."""
        self.frozen = False
        self.key_hash = None
        self.ema_count[:] = 0.0
        self.ema_sum[:] = 0.0


def _exact_argmin(query, keys) -> int:
    diff = keys.astype(np.float64) - query.astype(np.float64)
    return int(np.argmin((diff * diff).sum(axis=1)))


def _score_dtype(queries, keys):
    """Scores are computed in float32 only when both inputs already are (no
    information is discarded), with a correspondingly wider fixup margin."""
    if queries.dtype == np.float32 and keys.dtype == np.float32:
        return np.float32, 1e-4
    return np.float64, 1e-9


def _risky_rows(scores, idx, scale, rel_tol):
    """Rows whose winner is within floating-point tolerance of the runner-up.

    `scores` is the reduced objective (|k|^2 - 2 q.k), whose pairwise margins
    equal true squared-distance margins; its rounding error scales with the
    squared input norms, covered by `scale`.
    """
    n, k = scores.shape
    if k == 1:
        return np.empty(0, dtype=np.int64)
    rows = np.arange(n)
    best = scores[rows, idx].copy()
    scores[rows, idx] = np.inf
    second = scores.min(axis=1)
    scores[rows, idx] = best
    tol = rel_tol * (1.0 + scale)
    return np.where(second.astype(np.float64) - best.astype(np.float64) <= tol)[0]


if _HAS_NUMBA:
    @numba.njit(parallel=True, cache=True)
    def _nb_argmin_heads(q, keys, rel_tol, idx, risky):
        """Fused distance+argmin per (head, instance): exact f64 squared
        differences, tracking the runner-up margin for the tie fixup."""
        c_use, n, d = q.shape
        K = keys.shape[1]
        for c in numba.prange(c_use):
            kn_max = 0.0
            for kk in range(K):
                kn = 0.0
                for j in range(d):
                    kn += keys[c, kk, j] * keys[c, kk, j]
                if kn > kn_max:
                    kn_max = kn
            for i in range(n):
                qn = 0.0
                for j in range(d):
                    qn += q[c, i, j] * q[c, i, j]
                best = np.inf
                second = np.inf
                bi = 0
                for kk in range(K):
                    s = 0.0
                    for j in range(d):
                        diff = q[c, i, j] - keys[c, kk, j]
                        s += diff * diff
                    if s < best:
                        second = best
                        best = s
                        bi = kk
                    elif s < second:  # exact later tie lands here: margin 0
                        second = s
                idx[c, i] = bi
                risky[c, i] = (second - best) <= rel_tol * (1.0 + qn + kn_max)


def _argmin_heads_numba(q, k, rel_tol):
    """numba backend over (C_use, n, d) queries; returns (idx, risky) arrays.
    Scores use exact f64 arithmetic, so agreement with the numpy backend is
    guaranteed outside the shared fixup tolerance and inside it by the shared
    exact re-decision."""
    c_use, n, _ = q.shape
    idx = np.empty((c_use, n), dtype=np.int64)
    risky = np.empty((c_use, n), dtype=np.bool_)
    _nb_argmin_heads(q.astype(np.float64), k.astype(np.float64),
                     rel_tol, idx, risky)
    return idx, risky


def nearest_keys(queries, keys) -> np.ndarray:
    """Index of the L2-nearest key for each query row; ties go to the lowest
    index. argmin ||q - k||^2 is reduced to argmin(|k|^2 - 2 q.k) and computed
    via BLAS (or a fused numba kernel at scale); near-tied rows are re-decided
    with exact squared differences in float64, so the result always equals a
    direct brute-force argmin over the given values."""
    queries = np.asarray(queries)
    keys = np.asarray(keys)
    if keys.shape[0] == 0:
        raise StateError("empty codebook")
    dtype, rel_tol = _score_dtype(queries, keys)
    q = queries.astype(dtype, copy=False)
    k = keys.astype(dtype, copy=False)
    n, K = q.shape[0], k.shape[0]
    if _HAS_NUMBA and n * K >= _NUMBA_MIN_SCORES:
        idx, risky = _argmin_heads_numba(q[None, :, :], k[None, :, :], rel_tol)
        for i in np.where(risky[0])[0]:
            idx[0, i] = _exact_argmin(q[i], k)
        return idx[0]
    out = np.empty(n, dtype=np.int64)
    q_norm = (q.astype(np.float64) ** 2).sum(axis=1)
    k_norm = (k.astype(np.float64) ** 2).sum(axis=1)
    k_norm_max = float(k_norm.max())
    kt = np.ascontiguousarray(k.T)
    k_norm_cast = k_norm.astype(dtype)
    chunk = max(1, int(8e6) // max(1, K))
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        scores = q[lo:hi] @ kt
        scores *= -2.0
        scores += k_norm_cast[None, :]
        idx = np.argmin(scores, axis=1)
        scale = q_norm[lo:hi] + k_norm_max
        for i in _risky_rows(scores, idx, scale, rel_tol):
            idx[i] = _exact_argmin(q[lo + i], k)
        out[lo:hi] = idx
    return out


def nearest_keys_all_heads(queries, keys) -> np.ndarray:
    """Batched nearest_keys over every head at once: queries (I, C_use, d)
    against keys (C, K, d) -> selections (I, C_use). One batched matmul per
    chunk replaces C_use separate searches; the same exact fixup applies."""
    I, c_use, d = queries.shape
    if keys.shape[1] == 0:
        raise StateError("empty codebook")
    sel = np.empty((I, c_use), dtype=np.int64)
    if I == 0 or c_use == 0:
        return sel
    dtype, rel_tol = _score_dtype(queries, keys)
    q = np.ascontiguousarray(queries.transpose(1, 0, 2), dtype=dtype)  # (C_use, I, d)
    k = keys[:c_use].astype(dtype, copy=False)                         # (C_use, K, d)
    if _HAS_NUMBA and I * c_use * keys.shape[1] >= _NUMBA_MIN_SCORES:
        idx, risky = _argmin_heads_numba(q, k, rel_tol)
        for c, i in zip(*np.where(risky)):
            idx[c, i] = _exact_argmin(q[c, i], k[c])
        return np.ascontiguousarray(idx.T)
    kt = np.ascontiguousarray(k.transpose(0, 2, 1))
    q_norm = (q.astype(np.float64) ** 2).sum(axis=2)                   # (C_use, I)
    k_norm = (k.astype(np.float64) ** 2).sum(axis=2)                   # (C_use, K)
    k_norm_max = k_norm.max(axis=1)
    k_norm_cast = k_norm.astype(dtype)
    K = k.shape[1]
    chunk = max(1, int(16e6) // max(1, c_use * K))
    for lo in range(0, I, chunk):
        hi = min(I, lo + chunk)
        scores = np.matmul(q[:, lo:hi], kt)                   # (C_use, n, K)
        scores *= -2.0
        scores += k_norm_cast[:, None, :]
        idx = np.argmin(scores, axis=2)                       # (C_use, n)
        for c in range(c_use):
            scale = q_norm[c, lo:hi] + float(k_norm_max[c])
            for i in _risky_rows(scores[c], idx[c], scale, rel_tol):
                idx[c, i] = _exact_argmin(q[c, lo + i], k[c])
        sel[lo:hi] = idx.T
    return sel


def quantize(head_input, codebook) -> int:
    """Nearest-key index for a single head input against one head's key table."""
    keys = getattr(codebook, "keys", codebook)
    keys = np.asarray(keys)
    if keys.ndim == 3:  # whole Codebooks passed: use head 0
        keys = keys[0]
    head_input = np.asarray(head_input, dtype=np.float64).reshape(1, -1)
    if head_input.shape[1] != keys.shape[1]:
        raise InvalidInputError(
            f"query dim {head_input.shape[1]} != key dim {keys.shape[1]}")
    return int(nearest_keys(head_input, keys)[0])


def segment(x, config: BottleneckConfig, valid_tokens: int) -> np.ndarray:
    """Slice an encoding into per-instance, per-head query vectors.

    Returns (I, C_use, d_key) in the input's float dtype. hidden: one instance
    per valid token, heads are contiguous slices of the hidden axis. token:
    one instance per hidden channel, heads are contiguous d_key-length slices
    of the first floor(valid/d_key)*d_key token positions (remainder dropped).
    With pooling before the bottleneck, `x` is the pooled h-vector and there
    is a single instance.
    """
    x = np.asarray(x)
    if x.dtype != np.float32:
        x = x.astype(np.float64, copy=False)
    d = config.d_key
    if config.pooling_position == "before":
        if x.ndim != 1:
            raise InvalidInputError("pooling before the bottleneck expects an h-vector")
        if x.size % d != 0:
            raise ConfigError(f"hidden size {x.size} not divisible by d_key {d}")
        return x.reshape(1, -1, d)
    if x.ndim != 2:
        raise InvalidInputError(f"expected a (t, h) matrix, got shape {x.shape}")
    t, h = x.shape
    if not (1 <= valid_tokens <= t):
        raise InvalidInputError(f"valid_tokens {valid_tokens} outside [1, {t}]")
    if config.segmentation == "hidden":
        if h % d != 0:
            raise ConfigError(f"hidden size {h} not divisible by d_key {d}")
        return x[:valid_tokens].reshape(valid_tokens, h // d, d)
    n_slices = valid_tokens // d
    if n_slices == 0:
        return np.zeros((h, 0, d))
    sub = x[:n_slices * d, :]                      # (n_slices*d, h)
    return sub.T.reshape(h, n_slices, d)           # per channel, contiguous slices


@dataclass
class ForwardResult:
    """Representation plus the bookkeeping needed for value gradients.

    sel[i, c] is the key picked by instance i in head c; weights[i, c] is that
    pick's contribution factor to rep[rep_row[c]]. touched_rows are the unique
    flat (head * K + key) rows selected anywhere in the pass.
    """

    rep: np.ndarray
    sel: np.ndarray
    heads: np.ndarray
    weights: np.ndarray
    rep_row: np.ndarray
    touched_rows: np.ndarray

    @property
    def touched_pairs(self) -> set:
        return {(int(r) // self._n_keys, int(r) % self._n_keys) for r in self.touched_rows}

    _n_keys: int = 0


def retrieve(sel, codebooks: Codebooks, config: BottleneckConfig,
             n_rep_rows: int) -> ForwardResult:
    """Gather value rows for the selected keys and aggregate them per head.

    Aggregation: mean over instances (pooling after + mean); the instance at
    token position 0 (pooling after + cls on the hidden axis); channel-mean of
    the head covering token position 0 (pooling after + cls on the token
    axis); pass-through for pooling before. Also returns the touched set.
    """
    sel = np.asarray(sel, dtype=np.int64)
    I, c_use = sel.shape
    K, d_value = codebooks.n_keys, codebooks.d_value
    if sel.size and (sel.min() < 0 or sel.max() >= K):
        raise InvalidInputError("selected key index out of range")
    rep = np.zeros((n_rep_rows, d_value))
    weights = np.zeros((I, c_use))
    token_cls = (config.segmentation == "token" and config.pooling_mode == "cls"
                 and config.pooling_position == "after")
    if token_cls:
        rep_row = np.zeros(c_use, dtype=np.int64)
        if I > 0 and c_use > 0:
            weights[:, 0] = 1.0 / I
    else:
        rep_row = np.arange(c_use, dtype=np.int64)
        if I > 0:
            if config.pooling_position == "before" or I == 1:
                weights[:] = 1.0
            elif config.pooling_mode == "mean":
                weights[:] = 1.0 / I
            else:  # cls on the hidden axis: instance index == token position
                weights[0, :] = 1.0
    for c in range(c_use):
        picked = codebooks.values[c, sel[:, c]].astype(np.float64)  # (I, d_value)
        rep[rep_row[c]] += weights[:, c] @ picked if I else 0.0
    heads = np.arange(c_use, dtype=np.int64)
    flat = (heads[None, :] * K + sel).ravel() if sel.size else np.empty(0, dtype=np.int64)
    result = ForwardResult(rep=rep, sel=sel, heads=heads, weights=weights,
                           rep_row=rep_row, touched_rows=np.unique(flat))
    result._n_keys = K
    return result


def forward(z, config: BottleneckConfig, codebooks: Codebooks,
            valid_tokens: int | None = None, *, cls_flag: bool = False) -> ForwardResult:
    """segment -> quantize -> retrieve for one encoding. Codebooks must be frozen."""
    if not codebooks.frozen:
        raise StateError("forward requires frozen codebooks")
    z = np.asarray(z)
    valid = z.shape[0] if valid_tokens is None else valid_tokens
    if config.pooling_position == "before":
        x = pool(z, config.pooling_mode, valid, cls_flag=cls_flag)
    else:
        x = z
    queries = segment(x, config, valid)
    sel = nearest_keys_all_heads(queries, codebooks.keys)
    n_rep = config.rep_rows(z.shape[0], z.shape[1])
    return retrieve(sel, codebooks, config, n_rep)


def value_backward(result: ForwardResult, drep, n_keys: int):
    """Aggregate dloss/drep into sparse value-row gradients.

    Returns (rows, grads): unique flat value rows (head * n_keys + key) and one
    gradient row per entry. Rows touched with zero weight appear with zero
    gradient so the optimizer's touched set matches the forward pass.
    """
    drep = np.asarray(drep, dtype=np.float64)
    if result.sel.size == 0:
        return np.empty(0, dtype=np.int64), np.empty((0, drep.shape[-1]))
    flat = (result.heads[None, :] * n_keys + result.sel).ravel()
    contrib = result.weights[:, :, None] * drep[result.rep_row][None, :, :]
    contrib = contrib.reshape(-1, drep.shape[-1])
    rows, inverse = np.unique(flat, return_inverse=True)
    grads = np.zeros((rows.size, drep.shape[-1]))
    np.add.at(grads, inverse, contrib)
    return rows, grads


def _as_z_valid(item):
    if hasattr(item, "z"):
        return item.z, item.valid_tokens
    z, valid = item
    return z, valid


def ema_init(stream, codebooks: Codebooks, config: BottleneckConfig, rng: RngStream,
             *, gamma: float | None = None, epochs: int | None = None,
             batch_size: int = 256, cls_flag: bool = False) -> Codebooks:
    """Move keys toward streaming cluster means, then freeze them.

    Per batch and head: assign inputs to their nearest current keys, update
    count and sum accumulators as new = gamma*old + (1-gamma)*batch, and move
    every key with accumulated count above a small epsilon to sum/count. Keys
    that never win an assignment stay at their initialization.
    """
    if codebooks.frozen:
        raise StateError("codebooks already frozen; reopen_for_init first")
    gamma = config.ema_decay if gamma is None else gamma
    epochs = config.init_epochs if epochs is None else epochs
    items = list(stream)
    K = codebooks.n_keys
    for _ in range(epochs):
        order = rng.permutation(len(items))
        for lo in range(0, len(items), batch_size):
            batch = [items[i] for i in order[lo:lo + batch_size]]
            chunks = []
            for item in batch:
                z, valid = _as_z_valid(item)
                x = pool(z, config.pooling_mode, valid, cls_flag=cls_flag) \
                    if config.pooling_position == "before" else z
                queries = segment(x, config, valid)
                if queries.shape[0] and queries.shape[1]:
                    chunks.append(queries)
            if not chunks:
                continue
            # records share the head count (token-axis widths can differ when
            # valid_tokens differ, so group by width); all assignments use the
            # batch-start keys, then each head gets exactly one EMA update
            per_head_idx: list[list] = [[] for _ in range(codebooks.n_heads)]
            per_head_q: list[list] = [[] for _ in range(codebooks.n_heads)]
            for c_use in sorted({q.shape[1] for q in chunks}):
                group = [q for q in chunks if q.shape[1] == c_use]
                q_all = np.concatenate(group, axis=0)        # (N, c_use, d)
                sel = nearest_keys_all_heads(q_all, codebooks.keys)
                for c in range(c_use):
                    per_head_idx[c].append(sel[:, c])
                    per_head_q[c].append(q_all[:, c, :].astype(np.float64))
            for c in range(codebooks.n_heads):
                if not per_head_idx[c]:
                    continue
                idx = np.concatenate(per_head_idx[c])
                q = np.concatenate(per_head_q[c], axis=0)
                n_k = np.bincount(idx, minlength=K).astype(np.float64)
                sums = np.zeros((K, codebooks.d_key))
                np.add.at(sums, idx, q)
                codebooks.ema_count[c] = gamma * codebooks.ema_count[c] \
                    + (1 - gamma) * n_k
                codebooks.ema_sum[c] = gamma * codebooks.ema_sum[c] \
                    + (1 - gamma) * sums
                alive = codebooks.ema_count[c] > EMA_COUNT_EPS
                moved = (codebooks.ema_sum[c][alive]
                         / codebooks.ema_count[c][alive, None])
                codebooks.keys[c][alive] = moved.astype(codebooks.keys.dtype)
    codebooks.freeze()
    return codebooks


# --- checkpoint format ---------------------------------------------------------

CKPT_MAGIC = b"DKVC"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIIIB32s")
DECODER_MAGIC = b"DECP"


def save_codebooks(codebooks: Codebooks, path, decoders: dict | None = None) -> None:
    """Write the codebook checkpoint, with per-task parametric decoders as an
    optional trailer. Decoder dict keys are task IDs (None = single head)."""
    key_hash = bytes.fromhex(codebooks.key_hash) if codebooks.key_hash else b"\x00" * 32
    header = _CKPT_HEADER.pack(
        CKPT_MAGIC, CKPT_VERSION, codebooks.n_heads, codebooks.n_keys,
        codebooks.d_key, codebooks.d_value, int(codebooks.frozen), key_hash)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(codebooks.keys, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(codebooks.values, dtype="<f4").tobytes())
        if decoders:
            f.write(DECODER_MAGIC)
            f.write(struct.pack("<I", len(decoders)))
            for task_id, dec in sorted(decoders.items(),
                                       key=lambda kv: -1 if kv[0] is None else kv[0]):
                tid = -1 if task_id is None else int(task_id)
                f.write(struct.pack("<qIIf", tid, dec.in_dim, dec.n_classes,
                                    dec.dropout_rate))
                f.write(np.ascontiguousarray(dec.W, dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(dec.b, dtype="<f4").tobytes())


def load_codebooks(path) -> tuple[Codebooks, dict]:
    """Read a codebook checkpoint; verifies the stored key hash when frozen."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, C, K, d_key, d_value, frozen, key_hash = \
        _CKPT_HEADER.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} at offset 4")
    offset = _CKPT_HEADER.size
    n_key_bytes = C * K * d_key * 4
    n_val_bytes = C * K * d_value * 4
    if len(raw) < offset + n_key_bytes + n_val_bytes:
        raise FormatError(f"{path}: truncated payload at offset {offset}")
    keys = np.frombuffer(raw, dtype="<f4", count=C * K * d_key,
                         offset=offset).reshape(C, K, d_key).copy()
    offset += n_key_bytes
    values = np.frombuffer(raw, dtype="<f4", count=C * K * d_value,
                           offset=offset).reshape(C, K, d_value).copy()
    offset += n_val_bytes
    cb = Codebooks(keys, values, frozen=bool(frozen),
                   key_hash=key_hash.hex() if frozen else None)
    if frozen and cb.compute_key_hash() != key_hash.hex():
        raise FormatError(f"{path}: key table does not match stored hash")
    decoders: dict = {}
    if offset < len(raw):
        if raw[offset:offset + 4] != DECODER_MAGIC:
            raise FormatError(f"{path}: unknown trailer at offset {offset}")
        offset += 4
        (count,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        for _ in range(count):
            tid, in_dim, n_classes, dropout = struct.unpack_from("<qIIf", raw, offset)
            offset += struct.calcsize("<qIIf")
            W = np.frombuffer(raw, dtype="<f4", count=in_dim * n_classes,
                              offset=offset).reshape(in_dim, n_classes).copy()
            offset += in_dim * n_classes * 4
            b = np.frombuffer(raw, dtype="<f4", count=n_classes, offset=offset).copy()
            offset += n_classes * 4
            decoders[None if tid < 0 else tid] = ParametricDecoder(
                W=W, b=b, dropout_rate=float(dropout))
    return cb, decoders
