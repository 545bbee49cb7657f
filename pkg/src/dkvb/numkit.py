"""Minimal numeric kernel: stable softmax, cross-entropy with analytic gradient,
inverted dropout, a counter-based RNG stream, and a lazy row-wise AdamW step.

Parameter tables are plain 2-D numpy arrays (float32 in normal use, float64 in
test builds). Reductions are carried out in float64 regardless of storage dtype.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvalidInputError


def _tag_to_int(tag: str) -> int:
    return int.from_bytes(hashlib.blake2b(tag.encode(), digest_size=8).digest(), "little")


class RngStream:
    """Deterministic random stream keyed by (seed, counter).

    Every draw derives a fresh generator from (seed, counter) and bumps the
    counter, so identical (seed, counter) pairs reproduce identical values on
    any platform. `derive` spawns an independent child stream from a string tag.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def _next(self) -> np.random.Generator:
        gen = np.random.default_rng((self.seed, self.counter))
        self.counter += 1
        return gen

    def derive(self, tag: str) -> "RngStream":
        return RngStream(self.seed ^ _tag_to_int(tag), 0)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._next().uniform(low, high, size=n)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._next().normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, n: int | None = None):
        return self._next().integers(low, high, size=n)

    def permutation(self, n: int) -> np.ndarray:
        return self._next().permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, counter={self.counter})"


def softmax(v) -> np.ndarray:
    """Probability vector from logits, computed with max-subtraction.

    -inf entries are allowed (used for class masking) and map to probability 0;
    NaN or +inf raise.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise InvalidInputError("softmax: empty logit vector")
    if np.isnan(v).any() or np.isposinf(v).any():
        raise InvalidInputError("softmax: logits must not contain NaN or +inf")
    m = np.max(v)
    if not np.isfinite(m):
        raise InvalidInputError("softmax: all logits are -inf")
    e = np.exp(v - m)
    return e / e.sum()


def cross_entropy_with_grad(logits, target: int) -> tuple[float, np.ndarray]:
    """Return (loss, dloss/dlogits) for -log softmax(logits)[target].

    The gradient is softmax(logits) - one_hot(target). Masked (-inf) logits get
    zero probability and zero gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not (0 <= target < logits.size):
        raise IndexError(f"cross_entropy: target {target} out of range for {logits.size} logits")
    p = softmax(logits)
    m = np.max(logits)
    # loss = -(x_t - m - log sum exp(x - m)); stable even with -inf entries
    loss = float(np.log(np.sum(np.exp(logits - m))) - (logits[target] - m))
    grad = p.copy()
    grad[target] -= 1.0
    return loss, grad


def dropout_mask(n: int, rate: float, rng: RngStream) -> np.ndarray:
    """Inverted-dropout scale vector: 0 with probability `rate`, else 1/(1-rate).

    Each entry has expectation 1, so evaluation is a pure pass-through with no
    rescaling. rate 0 returns all ones without consuming randomness.
    """
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(n)
    keep = rng.uniform(n) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


@dataclass
class OptimState:
    """Per-table AdamW state with per-row step counters.

    Weight decay is decoupled and, like the moment updates, applied only to the
    rows touched in a step; untouched rows keep their exact bytes.
    """

    m: np.ndarray
    v: np.ndarray
    steps: np.ndarray
    lr: float
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_table(cls, table: np.ndarray, lr: float, weight_decay: float = 0.01,
                  beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "OptimState":
        return cls(
            m=np.zeros_like(table, dtype=np.float64),
            v=np.zeros_like(table, dtype=np.float64),
            steps=np.zeros(table.shape[0], dtype=np.int64),
            lr=lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=eps,
        )


def lazy_step(params: np.ndarray, grads: np.ndarray, state: OptimState, rows) -> None:
    """One AdamW step restricted to `rows`, in place.

    `grads` holds one gradient row per entry of `rows` (same order). Rows not
    listed are left bit-identical, including their moments and step counters.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        return
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != state.m.shape:
        raise InvalidInputError("lazy_step: state shape does not match parameter table")
    if grads.shape != (rows.size, params.shape[1]):
        raise InvalidInputError(
            f"lazy_step: grads shape {grads.shape} does not match ({rows.size}, {params.shape[1]})")
    if rows.min() < 0 or rows.max() >= params.shape[0]:
        raise InvalidInputError("lazy_step: touched row index out of range")
    if np.unique(rows).size != rows.size:
        raise InvalidInputError("lazy_step: touched rows must be unique")

    state.steps[rows] += 1
    t = state.steps[rows].astype(np.float64)[:, None]
    b1, b2 = state.beta1, state.beta2

    m = state.m[rows] * b1 + (1.0 - b1) * grads
    v = state.v[rows] * b2 + (1.0 - b2) * grads * grads
    state.m[rows] = m
    state.v[rows] = v

    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    update = m_hat / (np.sqrt(v_hat) + state.eps)

    p = params[rows].astype(np.float64)
    p -= state.lr * (update + state.weight_decay * p)
    params[rows] = p.astype(params.dtype)
