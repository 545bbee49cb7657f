"""Frozen-encoder baselines: a linear probe trained naively (NCL), with an EWC
penalty, or with DER++ replay. All of them read mean-pooled embeddings and
never modify the embeddings themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvalidInputError, RoutingError
from .heads import pool
from .numkit import OptimState, RngStream, cross_entropy_with_grad, lazy_step


@dataclass
class LinearProbe:
    W: np.ndarray  # (h, n_classes)
    b: np.ndarray  # (n_classes,)

    @classmethod
    def init(cls, h: int, n_classes: int, rng: RngStream, dtype=np.float32) -> "LinearProbe":
        return cls(W=rng.normal((h, n_classes), scale=0.02).astype(dtype),
                   b=np.zeros(n_classes, dtype=dtype))

    def logits(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.W.astype(np.float64) \
            + self.b.astype(np.float64)


@dataclass
class ProbeOptimizer:
    state_W: OptimState
    state_b: OptimState

    @classmethod
    def for_probe(cls, probe: LinearProbe, lr: float, weight_decay: float = 0.01) -> "ProbeOptimizer":
        return cls(OptimState.for_table(probe.W, lr=lr, weight_decay=weight_decay),
                   OptimState.for_table(probe.b.reshape(1, -1), lr=lr,
                                        weight_decay=weight_decay))

    def step(self, probe: LinearProbe, dW, db) -> None:
        lazy_step(probe.W, dW, self.state_W, np.arange(probe.W.shape[0]))
        lazy_step(probe.b.reshape(1, -1), np.asarray(db).reshape(1, -1),
                  self.state_b, np.array([0]))


def _batch_grads(batch, probe: LinearProbe):
    """Mean CE loss and gradients over [(x, target), ...]."""
    dW = np.zeros(probe.W.shape)
    db = np.zeros(probe.b.shape)
    loss = 0.0
    for x, target in batch:
        l, dlogits = cross_entropy_with_grad(probe.logits(x), target)
        loss += l
        dW += np.outer(x, dlogits)
        db += dlogits
    n = len(batch)
    return loss / n, dW / n, db / n


def ncl_step(batch, probe: LinearProbe, optimizer: ProbeOptimizer) -> float:
    """One plain cross-entropy gradient step on the probe."""
    if not batch:
        return 0.0
    loss, dW, db = _batch_grads(batch, probe)
    optimizer.step(probe, dW, db)
    return loss


@dataclass
class FisherDiag:
    """Diagonal empirical Fisher plus the anchor parameters it was taken at."""

    F_W: np.ndarray
    F_b: np.ndarray
    W_ref: np.ndarray
    b_ref: np.ndarray


def fisher_estimate(data, probe: LinearProbe, sample_count: int | None = None) -> FisherDiag:
    """Mean of squared per-sample CE gradients at the probe's current parameters."""
    data = list(data)
    if not data:
        raise InvalidInputError("fisher_estimate: empty task data")
    if sample_count is not None:
        data = data[:sample_count]
    F_W = np.zeros(probe.W.shape)
    F_b = np.zeros(probe.b.shape)
    for x, target in data:
        _, dlogits = cross_entropy_with_grad(probe.logits(x), target)
        gW = np.outer(x, dlogits)
        F_W += gW * gW
        F_b += dlogits * dlogits
    n = len(data)
    return FisherDiag(F_W / n, F_b / n,
                      probe.W.astype(np.float64).copy(),
                      probe.b.astype(np.float64).copy())


def ewc_loss(probe: LinearProbe, anchors, lam: float) -> float:
    """(lam / 2) * sum over anchors of F * (theta - theta_ref)^2."""
    total = 0.0
    W = probe.W.astype(np.float64)
    b = probe.b.astype(np.float64)
    for a in anchors:
        if a.F_W.shape != W.shape or a.F_b.shape != b.shape:
            raise ConfigError("ewc anchor shape does not match probe")
        total += float((a.F_W * (W - a.W_ref) ** 2).sum())
        total += float((a.F_b * (b - a.b_ref) ** 2).sum())
    return 0.5 * lam * total


def ewc_grads(probe: LinearProbe, anchors, lam: float):
    """Gradient of ewc_loss with respect to (W, b)."""
    gW = np.zeros(probe.W.shape)
    gb = np.zeros(probe.b.shape)
    W = probe.W.astype(np.float64)
    b = probe.b.astype(np.float64)
    for a in anchors:
        gW += lam * a.F_W * (W - a.W_ref)
        gb += lam * a.F_b * (b - a.b_ref)
    return gW, gb


def ewc_step(batch, probe: LinearProbe, optimizer: ProbeOptimizer, anchors,
             lam: float) -> float:
    """CE step with the quadratic anchor penalty added to the loss."""
    if not batch:
        return 0.0
    loss, dW, db = _batch_grads(batch, probe)
    if anchors and lam != 0.0:
        gW, gb = ewc_grads(probe, anchors, lam)
        dW = dW + gW
        db = db + gb
        loss += ewc_loss(probe, anchors, lam)
    optimizer.step(probe, dW, db)
    return loss


class ReplayBuffer:
    """Reservoir-sampled store of (x, target, logits[, head key]) triples."""

    def __init__(self, capacity: int = 256):
        if capacity < 0:
            raise ConfigError("buffer capacity must be >= 0")
        self.capacity = capacity
        self.items: list = []
        self.seen = 0

    def __len__(self) -> int:
        return len(self.items)

    def add(self, item, rng: RngStream) -> None:
        self.seen += 1
        if len(self.items) < self.capacity:
            self.items.append(item)
        else:
            j = int(rng.integers(0, self.seen))
            if j < self.capacity:
                self.items[j] = item

    def sample(self, k: int, rng: RngStream) -> list:
        k = min(k, len(self.items))
        if k == 0:
            return []
        idx = rng.permutation(len(self.items))[:k]
        return [self.items[i] for i in idx]


def derpp_step(batch, buffer: ReplayBuffer, probe: LinearProbe,
               optimizer: ProbeOptimizer, rng: RngStream, *, alpha: float = 0.5,
               beta: float = 0.5, sample_count: int = 16) -> float:
    """CE on the batch plus logit distillation (MSE vs stored logits) and
    replayed CE on one reservoir draw; the batch then enters the buffer with
    its post-step logits."""
    if not batch:
        return 0.0
    loss, dW, db = _batch_grads(batch, probe)
    replay = buffer.sample(sample_count, rng) if sample_count > 0 else []
    if replay:
        n = len(replay)
        width = probe.b.shape[0]
        for x, target, stored_logits in replay:
            logits = probe.logits(x)
            if alpha != 0.0:
                diff = logits - stored_logits
                loss += alpha * float((diff * diff).mean()) / n
                dl = alpha * 2.0 * diff / (width * n)
                dW += np.outer(x, dl)
                db += dl
            if beta != 0.0:
                ce, dlogits = cross_entropy_with_grad(logits, target)
                loss += beta * ce / n
                dW += beta * np.outer(x, dlogits) / n
                db += beta * dlogits / n
    optimizer.step(probe, dW, db)
    for x, target in batch:
        buffer.add((x, target, probe.logits(x)), rng)
    return loss


class ProbeModel:
    """Harness-facing wrapper running NCL, EWC, or DER++ over a linear probe.

    Multi-head mode keeps one probe per task (logits over that task's classes);
    single-head mode trains one probe over the global class set. EWC keeps one
    (Fisher, anchor) pair per completed task by default; `ewc_mode="running"`
    merges them into a single consolidated anchor instead.
    """

    def __init__(self, variant: str, h: int, classes, single_head: bool, hyper,
                 rng: RngStream, dtype=np.float32, ewc_mode: str = "additive"):
        if variant not in ("ncl", "ewc", "derpp"):
            raise ConfigError(f"unknown baseline variant {variant!r}")
        if ewc_mode not in ("additive", "running"):
            raise ConfigError(f"unknown ewc mode {ewc_mode!r}")
        self.variant = variant
        self.h = h
        self.classes = tuple(classes)
        self.class_to_index = {c: i for i, c in enumerate(self.classes)}
        self.single_head = single_head
        self.hyper = hyper
        self.dtype = dtype
        self.ewc_mode = ewc_mode
        self._rng_init = rng.derive("probe-init")
        self._rng_replay = rng.derive("replay")
        self.probes: dict = {}
        self.optimizers: dict = {}
        self.anchors: dict = {}
        self._task_classes: dict = {}
        self.buffer = ReplayBuffer(hyper.replay_capacity) if variant == "derpp" else None
        if single_head:
            self._add_probe(None, len(self.classes))

    def _add_probe(self, key, n_classes: int) -> None:
        probe = LinearProbe.init(self.h, n_classes, self._rng_init, self.dtype)
        self.probes[key] = probe
        self.optimizers[key] = ProbeOptimizer.for_probe(
            probe, lr=self.hyper.decoder_lr, weight_decay=self.hyper.weight_decay)
        self.anchors[key] = []

    def begin_task(self, task) -> None:
        if self.single_head:
            return
        self._task_classes.setdefault(task.task_id, tuple(task.classes))
        if task.task_id not in self.probes:
            self._add_probe(task.task_id, len(task.classes))

    def _key(self, task_id):
        if self.single_head:
            if task_id is not None:
                raise RoutingError("single-head baseline does not accept a task_id")
            return None
        if task_id not in self.probes:
            raise RoutingError(f"no probe for task {task_id!r}")
        return task_id

    def _target(self, label: int, task_id) -> int:
        if self.single_head:
            return self.class_to_index[label]
        return self._task_classes[task_id].index(label)

    def _xy(self, records, task_id):
        return [(pool(r.z, "mean", r.valid_tokens), self._target(r.label, task_id))
                for r in records]

    def train_batch(self, records, task_id=None) -> float:
        if not records:
            return 0.0
        key = self._key(task_id)
        probe, opt = self.probes[key], self.optimizers[key]
        batch = self._xy(records, task_id)
        if self.variant == "ncl":
            return ncl_step(batch, probe, opt)
        if self.variant == "ewc":
            return ewc_step(batch, probe, opt, self.anchors[key],
                            self.hyper.ewc_lambda)
        return self._derpp_batch(batch, key, probe, opt)

    def _derpp_batch(self, batch, key, probe, opt) -> float:
        # shared reservoir across tasks; replayed items route to the probe they
        # were stored under, so distillation also reaches earlier heads
        loss, dW, db = _batch_grads(batch, probe)
        alpha, beta = self.hyper.derpp_alpha, self.hyper.derpp_beta
        replay = self.buffer.sample(self.hyper.replay_count, self._rng_replay) \
            if (alpha != 0.0 or beta != 0.0) else []
        extra: dict = {}
        if replay:
            n = len(replay)
            for x, target, stored_logits, stored_key in replay:
                rp = self.probes[stored_key]
                gW, gb = extra.setdefault(
                    stored_key, (np.zeros(rp.W.shape), np.zeros(rp.b.shape)))
                logits = rp.logits(x)
                if alpha != 0.0:
                    diff = logits - stored_logits
                    loss += alpha * float((diff * diff).mean()) / n
                    dl = alpha * 2.0 * diff / (rp.b.shape[0] * n)
                    gW += np.outer(x, dl)
                    gb += dl
                if beta != 0.0:
                    ce, dlogits = cross_entropy_with_grad(logits, target)
                    loss += beta * ce / n
                    gW += beta * np.outer(x, dlogits) / n
                    gb += beta * dlogits / n
        if key in extra:
            gW, gb = extra.pop(key)
            dW = dW + gW
            db = db + gb
        opt.step(probe, dW, db)
        for stored_key, (gW, gb) in sorted(extra.items(),
                                           key=lambda kv: (kv[0] is None, kv[0])):
            self.optimizers[stored_key].step(self.probes[stored_key], gW, gb)
        for x, target in batch:
            self.buffer.add((x, target, probe.logits(x), key), self._rng_replay)
        return loss

    def end_task(self, task) -> None:
        if self.variant != "ewc":
            return
        key = self._key(None if self.single_head else task.task_id)
        data = self._xy(task.train, None if self.single_head else task.task_id)
        anchor = fisher_estimate(data, self.probes[key], self.hyper.fisher_samples)
        if self.ewc_mode == "running" and self.anchors[key]:
            merged = self.anchors[key][0]
            merged.F_W += anchor.F_W
            merged.F_b += anchor.F_b
            merged.W_ref = anchor.W_ref
            merged.b_ref = anchor.b_ref
        else:
            self.anchors[key].append(anchor)

    def predict(self, records, task_id=None) -> np.ndarray:
        key = self._key(task_id)
        probe = self.probes[key]
        out = np.empty(len(records), dtype=np.int64)
        for i, r in enumerate(records):
            j = int(np.argmax(probe.logits(pool(r.z, "mean", r.valid_tokens))))
            out[i] = self.classes[j] if self.single_head else self._task_classes[task_id][j]
        return out
