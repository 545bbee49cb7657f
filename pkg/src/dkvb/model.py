"""Trainable bottleneck classifier: frozen codebook keys, value rows updated
only where a batch touched them, and a parametric or non-parametric decoder
with optional task-ID routing.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .bottleneck import (BottleneckConfig, Codebooks, ema_init, forward,
                         load_codebooks, retrieve, value_backward)
from .errors import ConfigError, RoutingError
from .heads import (HeadRegistry, ParametricDecoder, decode_nonparametric,
                    decode_parametric, mask_logits, nonparametric_backward,
                    parametric_backward)
from .numkit import OptimState, RngStream, cross_entropy_with_grad, lazy_step


@dataclasses.dataclass
class HyperParams:
    epochs: int = 10
    batch_size: int = 16
    values_lr: float = 1e-2
    decoder_lr: float = 1e-3
    dropout: float = 0.1
    weight_decay: float = 0.01
    ewc_lambda: float = 5000.0
    derpp_alpha: float = 0.5
    derpp_beta: float = 0.5
    replay_capacity: int = 256
    replay_count: int = 16
    fisher_samples: int | None = None


class DkvbModel:
    """Bottleneck + decoder over frozen embeddings for one scenario.

    `classes` is the global sorted label tuple. In multi-head mode routing goes
    by task_id: the parametric variant keeps one decoder per task, the
    non-parametric one masks global logits to the task's class set. The
    bottleneck (keys, values) is shared across tasks either way.
    """

    def __init__(self, config: BottleneckConfig, t: int, h: int, cls_flag: bool,
                 classes, single_head: bool, hyper: HyperParams, rng: RngStream,
                 dtype=np.float32, cache_quantization: bool = True):
        config.validate(t, h, cls_flag)
        self.config = config
        self.t, self.h, self.cls_flag = t, h, cls_flag
        self.classes = tuple(classes)
        self.class_to_index = {c: i for i, c in enumerate(self.classes)}
        self.single_head = single_head
        self.hyper = hyper
        self.dtype = dtype
        self._task_classes: dict = {}
        # keys are frozen between init phases, so a record's selections are a
        # pure function of its ID; cache them per key-table hash
        self.cache_quantization = cache_quantization
        self._sel_cache: dict = {}
        self._sel_cache_hash = None

        n_classes = len(self.classes)
        if config.decoder == "nonparametric":
            if config.d_value is not None and config.d_value != n_classes:
                raise ConfigError(
                    f"non-parametric decoder forces d_value == {n_classes} classes, "
                    f"got {config.d_value}")
            d_value = n_classes
        else:
            d_value = config.d_value if config.d_value is not None else config.d_key
        self.d_value = d_value

        n_heads = config.head_count(t, h)
        self.n_rep_rows = config.rep_rows(t, h)
        self.codebooks = Codebooks.build(n_heads, config.n_keys, config.d_key,
                                         d_value, rng.derive("codebooks"), dtype)
        self.values_state = OptimState.for_table(
            self.codebooks.values_flat, lr=hyper.values_lr,
            weight_decay=hyper.weight_decay)
        self.registry = HeadRegistry(single_head=single_head, kind=config.decoder,
                                     n_classes=n_classes)
        self._decoder_states: dict = {}
        self._rng_decoder = rng.derive("decoder-init")
        self._rng_dropout = rng.derive("dropout")
        self.touched_union = np.zeros(n_heads * config.n_keys, dtype=bool)

        if config.decoder == "parametric" and single_head:
            self._add_decoder(None, n_classes)

    # -- setup ------------------------------------------------------------

    def _add_decoder(self, key, n_classes: int) -> None:
        dec = ParametricDecoder.init(self.n_rep_rows * self.d_value, n_classes,
                                     self._rng_decoder,
                                     dropout_rate=self.hyper.dropout,
                                     dtype=self.dtype)
        self.registry.decoders[key] = dec
        self._decoder_states[key] = (
            OptimState.for_table(dec.W, lr=self.hyper.decoder_lr,
                                 weight_decay=self.hyper.weight_decay),
            OptimState.for_table(dec.b.reshape(1, -1), lr=self.hyper.decoder_lr,
                                 weight_decay=self.hyper.weight_decay),
        )

    def begin_task(self, task) -> None:
        if self.single_head:
            return
        self._task_classes.setdefault(task.task_id, tuple(task.classes))
        if self.config.decoder == "parametric":
            if task.task_id not in self.registry.decoders:
                self._add_decoder(task.task_id, len(task.classes))
        else:
            self.registry.masks.setdefault(task.task_id, np.asarray(
                [self.class_to_index[c] for c in task.classes], dtype=np.int64))

    def end_task(self, task) -> None:
        pass

    def init_keys(self, records, rng: RngStream, *, gamma: float | None = None,
                  epochs: int | None = None, batch_size: int = 256) -> None:
        ema_init(records, self.codebooks, self.config, rng, gamma=gamma,
                 epochs=epochs, batch_size=batch_size, cls_flag=self.cls_flag)

    def reopen_keys(self) -> None:
        self.codebooks.reopen_for_init()

    def load_codebooks_from(self, path) -> None:
        """Replace the codebooks with a checkpointed (typically frozen) set;
        the value optimizer state starts fresh."""
        cb, _ = load_codebooks(path)
        mine = self.codebooks
        if (cb.n_heads, cb.n_keys, cb.d_key, cb.d_value) != \
                (mine.n_heads, mine.n_keys, mine.d_key, mine.d_value):
            raise ConfigError(
                f"checkpoint shape (C={cb.n_heads}, K={cb.n_keys}, d_key={cb.d_key}, "
                f"d_value={cb.d_value}) does not match the model")
        self.codebooks = cb
        self.values_state = OptimState.for_table(
            cb.values_flat, lr=self.hyper.values_lr,
            weight_decay=self.hyper.weight_decay)

    # -- forward / training -------------------------------------------------

    def _parametric_multi(self) -> bool:
        return self.config.decoder == "parametric" and not self.single_head

    def _target_index(self, label: int, task_id) -> int:
        if self._parametric_multi():
            try:
                return self._task_classes[task_id].index(label)
            except (KeyError, ValueError):
                raise RoutingError(f"label {label} not in task {task_id!r} classes")
        return self.class_to_index[label]

    def _forward_result(self, record):
        if not self.cache_quantization:
            return forward(record.z, self.config, self.codebooks,
                           record.valid_tokens, cls_flag=self.cls_flag)
        cb = self.codebooks
        if self._sel_cache_hash != cb.key_hash:
            self._sel_cache = {}
            self._sel_cache_hash = cb.key_hash
        sel = self._sel_cache.get(record.id_hash)
        if sel is None:
            fres = forward(record.z, self.config, cb, record.valid_tokens,
                           cls_flag=self.cls_flag)
            self._sel_cache[record.id_hash] = fres.sel.astype(np.int32)
            return fres
        n_rep = self.config.rep_rows(record.z.shape[0], record.z.shape[1])
        return retrieve(sel, cb, self.config, n_rep)

    def _forward_logits(self, record, task_id, train: bool):
        """Returns (forward result, task-scoped logits, parametric cache or None)."""
        fres = self._forward_result(record)
        if self.config.decoder == "nonparametric":
            logits = decode_nonparametric(fres.rep)
            if not self.single_head:
                logits = mask_logits(logits, self.registry.mask_for(task_id))
            return fres, logits, None
        decoder = self.registry.decoder_for(None if self.single_head else task_id)
        logits, cache = decode_parametric(fres.rep, decoder,
                                          rng=self._rng_dropout, train=train)
        return fres, logits, (decoder, cache)

    def train_batch(self, records, task_id=None) -> float:
        """One optimizer step on a minibatch; returns the mean CE loss.

        Gradients are averaged over the batch; the lazy optimizer receives the
        union of rows touched by any sample in the batch.
        """
        if not records:
            return 0.0
        value_grads: dict[int, np.ndarray] = {}
        dec_dW = dec_db = None
        loss_sum = 0.0
        for record in records:
            fres, logits, pcache = self._forward_logits(record, task_id, train=True)
            target = self._target_index(record.label, task_id)
            loss, dlogits = cross_entropy_with_grad(logits, target)
            loss_sum += loss
            if pcache is None:
                drep = nonparametric_backward(dlogits, fres.rep.shape[0])
            else:
                decoder, cache = pcache
                dW, db, drep = parametric_backward(dlogits, cache, decoder)
                if dec_dW is None:
                    dec_dW, dec_db = np.zeros_like(dW), np.zeros_like(db)
                dec_dW += dW
                dec_db += db
            rows, grads = value_backward(fres, drep, self.codebooks.n_keys)
            for row, g in zip(rows.tolist(), grads):
                acc = value_grads.get(row)
                if acc is None:
                    value_grads[row] = g.copy()
                else:
                    acc += g
            self.touched_union[rows] = True

        n = len(records)
        rows = np.array(sorted(value_grads), dtype=np.int64)
        grads = np.stack([value_grads[int(r)] for r in rows]) / n if rows.size \
            else np.empty((0, self.d_value))
        lazy_step(self.codebooks.values_flat, grads, self.values_state, rows)
        if dec_dW is not None:
            key = None if self.single_head else task_id
            decoder = self.registry.decoders[key]
            state_w, state_b = self._decoder_states[key]
            lazy_step(decoder.W, dec_dW / n, state_w, np.arange(decoder.W.shape[0]))
            lazy_step(decoder.b.reshape(1, -1), dec_db.reshape(1, -1) / n,
                      state_b, np.array([0]))
        return loss_sum / n

    def predict(self, records, task_id=None) -> np.ndarray:
        """Predicted global labels (task-scoped when a task_id routes)."""
        out = np.empty(len(records), dtype=np.int64)
        for i, record in enumerate(records):
            _, logits, pcache = self._forward_logits(record, task_id, train=False)
            j = int(np.argmax(logits))
            if pcache is not None and not self.single_head:
                out[i] = self._task_classes[task_id][j]
            else:
                out[i] = self.classes[j]
        return out
