"""Pooling, the two decoders on top of retrieved value codes, and task routing.

The parametric decoder is a dropout + linear layer over the concatenated value
rows; the non-parametric decoder mean-pools value rows so that logits are the
per-class averages (d_value must equal the class count). Multi-head routing
dispatches to a per-task decoder (parametric) or masks logits outside the
task's class set (non-parametric).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RoutingError
from .numkit import RngStream, dropout_mask


def pool(z, mode: str, valid_tokens: int, *, cls_flag: bool = False) -> np.ndarray:
    """Sequence-level h-vector: token average over the valid rows, or row 0."""
    z = np.asarray(z)
    if valid_tokens < 1 or valid_tokens > z.shape[0]:
        raise ConfigError(f"valid_tokens {valid_tokens} outside [1, {z.shape[0]}]")
    if mode == "mean":
        return z[:valid_tokens].astype(np.float64).mean(axis=0)
    if mode == "cls":
        if not cls_flag:
            raise ConfigError("cls pooling requires a dataset with a sequence-level token")
        return z[0].astype(np.float64)
    raise ConfigError(f"unknown pooling mode {mode!r}")


@dataclass
class ParametricDecoder:
    """Linear layer over the flattened representation, preceded by dropout."""

    W: np.ndarray  # (in_dim, n_classes)
    b: np.ndarray  # (n_classes,)
    dropout_rate: float = 0.1

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def n_classes(self) -> int:
        return self.W.shape[1]

    @classmethod
    def init(cls, in_dim: int, n_classes: int, rng: RngStream, *,
             dropout_rate: float = 0.1, dtype=np.float32) -> "ParametricDecoder":
        W = rng.normal((in_dim, n_classes), scale=0.02).astype(dtype)
        return cls(W=W, b=np.zeros(n_classes, dtype=dtype), dropout_rate=dropout_rate)


def decode_parametric(rep, decoder: ParametricDecoder, rng: RngStream | None = None,
                      train: bool = False):
    """logits = W^T . dropout(concat(rep)) + b. Returns (logits, cache) where the
    cache feeds parametric_backward."""
    rep = np.asarray(rep, dtype=np.float64)
    x = rep.ravel()
    if x.size != decoder.in_dim:
        raise ConfigError(
            f"decoder expects {decoder.in_dim} inputs, representation has {x.size}")
    if train and decoder.dropout_rate > 0.0:
        if rng is None:
            raise ConfigError("training-mode parametric decode needs an rng for dropout")
        mask = dropout_mask(x.size, decoder.dropout_rate, rng)
    else:
        mask = None
    xd = x if mask is None else x * mask
    logits = decoder.W.astype(np.float64).T @ xd + decoder.b.astype(np.float64)
    return logits, (xd, mask, rep.shape)


def parametric_backward(dlogits, cache, decoder: ParametricDecoder):
    """Gradients (dW, db, drep) of a scalar loss given dloss/dlogits."""
    xd, mask, rep_shape = cache
    dlogits = np.asarray(dlogits, dtype=np.float64)
    dW = np.outer(xd, dlogits)
    db = dlogits.copy()
    dx = decoder.W.astype(np.float64) @ dlogits
    if mask is not None:
        dx *= mask
    return dW, db, dx.reshape(rep_shape)


def decode_nonparametric(rep) -> np.ndarray:
    """logits = per-class mean of the value rows (one row per head)."""
    rep = np.asarray(rep, dtype=np.float64)
    if rep.ndim != 2:
        raise ConfigError(f"representation must be 2-D, got shape {rep.shape}")
    return rep.mean(axis=0)


def nonparametric_backward(dlogits, n_heads: int) -> np.ndarray:
    """drep for decode_nonparametric: every head row gets dlogits / n_heads."""
    dlogits = np.asarray(dlogits, dtype=np.float64)
    return np.tile(dlogits / n_heads, (n_heads, 1))


def mask_logits(logits, class_indices) -> np.ndarray:
    """Copy of `logits` with everything outside `class_indices` at -inf."""
    logits = np.asarray(logits, dtype=np.float64)
    masked = np.full_like(logits, -np.inf)
    idx = np.asarray(class_indices, dtype=np.int64)
    masked[idx] = logits[idx]
    return masked


@dataclass
class HeadRegistry:
    """Task-ID -> decoder (parametric) or class-index mask (non-parametric).

    In single-head mode exactly one decoder/mask spans the global class set and
    task IDs must not be supplied at routing time.
    """

    single_head: bool
    kind: str  # "parametric" | "nonparametric"
    n_classes: int
    decoders: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)

    def _check_task(self, task_id):
        if self.single_head:
            if task_id is not None:
                raise RoutingError("single-head registry does not accept a task_id")
            return None
        if task_id is None:
            raise RoutingError("multi-head registry requires a task_id")
        return task_id

    def decoder_for(self, task_id) -> ParametricDecoder:
        key = self._check_task(task_id)
        if key not in self.decoders:
            raise RoutingError(f"no decoder registered for task {key!r}")
        return self.decoders[key]

    def mask_for(self, task_id) -> np.ndarray:
        key = self._check_task(task_id)
        if self.single_head:
            return np.arange(self.n_classes)
        if key not in self.masks:
            raise RoutingError(f"no class mask registered for task {key!r}")
        return self.masks[key]


def route(x, task_id, registry: HeadRegistry, *, rng: RngStream | None = None,
          train: bool = False) -> np.ndarray:
    """Task-scoped logits. Parametric registries decode `x` (a representation)
    with the task's decoder; non-parametric registries mask `x` (global logits)
    to the task's class set; single-head is the identity over all classes."""
    if registry.kind == "parametric":
        decoder = registry.decoder_for(task_id)
        logits, _ = decode_parametric(x, decoder, rng=rng, train=train)
        return logits
    mask = registry.mask_for(task_id)
    x = np.asarray(x, dtype=np.float64)
    if x.size != registry.n_classes:
        raise ConfigError(f"expected {registry.n_classes} global logits, got {x.size}")
    if registry.single_head:
        return x.copy()
    return mask_logits(x, mask)
