"""Sequential scenario execution, evaluation metrics, and run outputs.

A run trains one model task by task, filling row i of the result matrix R with
the test accuracy of tasks 1..i after finishing task i. The headline number is
the mean of the final row; backward transfer compares that row to the
diagonal. Single-head class-incremental runs additionally evaluate on the full
test set after every increment (the progressive curve).

Per-run outputs: R.txt (the matrix), metrics.jsonl (deterministic metric
records), timings.jsonl (wall-clock per epoch, kept separate so metric records
stay byte-reproducible), progressive.txt when applicable.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time

import numpy as np

from .baselines import ProbeModel
from .bottleneck import BottleneckConfig
from .errors import ConfigError, InvalidInputError, MetricError, StateError
from .model import DkvbModel, HyperParams
from .numkit import RngStream

METHODS = ("dkvb-np", "dkvb-p", "ncl", "ewc", "derpp")


# --- metrics -------------------------------------------------------------------


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.size == 0 or preds.shape != labels.shape:
        raise InvalidInputError(
            f"accuracy: need equal-length non-empty inputs, got {preds.shape} vs {labels.shape}")
    return float(np.mean(preds == labels))


def macro_f1(preds, labels) -> float:
    """Unweighted mean of per-class F1 over classes present in preds or labels;
    a class with zero precision+recall denominator scores 0."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.size == 0 or preds.shape != labels.shape:
        raise InvalidInputError("macro_f1: need equal-length non-empty inputs")
    classes = sorted(set(labels.tolist()) | set(preds.tolist()))
    scores = []
    for c in classes:
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(scores))


def bwt(R) -> float:
    """Backward transfer: mean over earlier tasks of (final-row accuracy minus
    the accuracy right after that task was learned)."""
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise MetricError(f"bwt: R must be square, got shape {R.shape}")
    T = R.shape[0]
    if T < 2:
        raise MetricError("bwt is undefined for fewer than two tasks")
    total = 0.0
    for i in range(T - 1):
        if np.isnan(R[T - 1, i]) or np.isnan(R[i, i]):
            raise MetricError(f"bwt: required entries for task {i} are missing")
        total += R[T - 1, i] - R[i, i]
    return total / (T - 1)


def progressive_eval(spec, predictors) -> list:
    """Full-test accuracy after each increment, one predictor (a callable
    records -> predicted labels) per model state."""
    if spec.full_test is None:
        raise ConfigError("progressive evaluation needs the scenario's full test set")
    labels = [r.label for r in spec.full_test]
    return [accuracy(p(spec.full_test), labels) for p in predictors]


# --- execution -------------------------------------------------------------------


@dataclasses.dataclass
class KeyInitStrategy:
    kind: str                    # "incremental" | "oracle" | "generic"
    corpus: list | None = None   # generic only; records from a separate manifest
    epochs: int | None = None    # default 3, generic default 1
    gamma: float = 0.2
    batch_size: int = 256

    def __post_init__(self):
        if self.kind not in ("incremental", "oracle", "generic"):
            raise ConfigError(f"unknown key-init strategy {self.kind!r}")

    @property
    def resolved_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 1 if self.kind == "generic" else 3


@dataclasses.dataclass
class TaskTiming:
    task_id: int
    epoch_seconds: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.epoch_seconds)) if self.epoch_seconds else 0.0

    @property
    def std(self) -> float:
        return float(np.std(self.epoch_seconds)) if self.epoch_seconds else 0.0


@dataclasses.dataclass
class RunResult:
    seed: int
    method: str
    scenario: str
    R: np.ndarray
    task_ids: list
    task_accuracy: list
    task_f1: list
    headline: float
    bwt_value: float | None
    timings: list
    progressive: list | None
    model: object


def build_model(method: str, spec, hyper: HyperParams, rng: RngStream, *,
                bconfig: BottleneckConfig | None = None, dtype=np.float32):
    single_head = not spec.multi_head
    if method in ("dkvb-np", "dkvb-p"):
        kind = "nonparametric" if method == "dkvb-np" else "parametric"
        bconfig = dataclasses.replace(bconfig or BottleneckConfig(), decoder=kind)
        return DkvbModel(bconfig, spec.t, spec.h, spec.cls_flag, spec.classes,
                         single_head, hyper, rng, dtype=dtype)
    if method in ("ncl", "ewc", "derpp"):
        return ProbeModel(method, spec.h, spec.classes, single_head, hyper, rng,
                          dtype=dtype)
    raise ConfigError(f"unknown method {method!r}")


def train_task(model, task, hyper: HyperParams, rng: RngStream,
               task_id=None) -> list:
    """Minibatch-train `model` on the task for hyper.epochs epochs; returns the
    wall-clock seconds per epoch (data is already in memory)."""
    records = task.train
    epoch_seconds = []
    for _ in range(hyper.epochs):
        order = rng.permutation(len(records))
        tic = time.perf_counter()
        for lo in range(0, len(records), hyper.batch_size):
            batch = [records[i] for i in order[lo:lo + hyper.batch_size]]
            model.train_batch(batch, task_id)
        epoch_seconds.append(time.perf_counter() - tic)
    return epoch_seconds


def run_scenario(spec, method: str, hyper: HyperParams, seed: int, *,
                 bconfig: BottleneckConfig | None = None,
                 strategy: KeyInitStrategy | None = None,
                 model=None, dtype=np.float32) -> RunResult:
    """Train through the scenario's task sequence and evaluate per the matrix
    protocol. For DKVB methods, oracle/generic key init runs (and freezes)
    before task 1 unless the model already carries frozen keys; incremental
    init re-opens the keys before every task. EMA never touches value rows."""
    rng = RngStream(seed)
    if model is None:
        model = build_model(method, spec, hyper, rng.derive("model"),
                            bconfig=bconfig, dtype=dtype)
    is_dkvb = isinstance(model, DkvbModel)
    if is_dkvb:
        strategy = strategy or KeyInitStrategy("oracle")
        if strategy.kind in ("oracle", "generic") and not model.codebooks.frozen:
            if strategy.kind == "generic":
                if not strategy.corpus:
                    raise ConfigError("generic key init needs a corpus")
                stream = strategy.corpus
            else:
                stream = [r for task in spec.tasks for r in task.train]
            model.init_keys(stream, rng.derive("keyinit"), gamma=strategy.gamma,
                            epochs=strategy.resolved_epochs,
                            batch_size=strategy.batch_size)

    T = spec.n_tasks
    R = np.full((T, T), np.nan)
    timings = []
    progressive = [] if spec.kind == "single_head_cil" else None
    final_preds: dict = {}

    for i, task in enumerate(spec.tasks):
        tid = task.task_id if spec.multi_head else None
        if is_dkvb and strategy.kind == "incremental":
            if model.codebooks.frozen:
                model.reopen_keys()
            model.init_keys(task.train, rng.derive(f"keyinit-{i}"),
                            gamma=strategy.gamma, epochs=strategy.resolved_epochs,
                            batch_size=strategy.batch_size)
        model.begin_task(task)
        epoch_seconds = train_task(model, task, hyper, rng.derive(f"train-{i}"),
                                   task_id=tid)
        model.end_task(task)
        timings.append(TaskTiming(task.task_id, epoch_seconds))
        for j in range(i + 1):
            prior = spec.tasks[j]
            preds = model.predict(
                prior.test, task_id=prior.task_id if spec.multi_head else None)
            labels = [r.label for r in prior.test]
            R[i, j] = accuracy(preds, labels)
            if i == T - 1:
                final_preds[j] = (preds, labels)
        if progressive is not None:
            labels_full = [r.label for r in spec.full_test]
            progressive.append(accuracy(model.predict(spec.full_test), labels_full))

    if is_dkvb and not model.codebooks.verify_keys():
        raise StateError("key table changed after freeze during the run")
    task_acc = [float(R[T - 1, j]) for j in range(T)]
    task_f1 = [macro_f1(*final_preds[j]) for j in range(T)]
    return RunResult(
        seed=seed, method=method, scenario=spec.kind, R=R,
        task_ids=[t.task_id for t in spec.tasks],
        task_accuracy=task_acc, task_f1=task_f1,
        headline=float(np.mean(task_acc)),
        bwt_value=bwt(R) if T >= 2 else None,
        timings=timings, progressive=progressive, model=model)


# --- outputs ---------------------------------------------------------------------


def write_run_outputs(result: RunResult, out_dir) -> None:
    """R.txt + metrics.jsonl (+ progressive.txt) are byte-reproducible for a
    fixed seed; wall-clock numbers go to timings.jsonl."""
    os.makedirs(out_dir, exist_ok=True)
    np.savetxt(os.path.join(out_dir, "R.txt"), result.R, fmt="%.17g")
    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as f:
        for j, task_id in enumerate(result.task_ids):
            f.write(json.dumps({
                "seed": result.seed, "scenario": result.scenario,
                "method": result.method, "task_id": task_id,
                "accuracy": result.task_accuracy[j],
                "macro_f1": result.task_f1[j],
            }, sort_keys=True) + "\n")
        f.write(json.dumps({
            "seed": result.seed, "scenario": result.scenario,
            "method": result.method, "task_id": None,
            "accuracy": result.headline,
            "macro_f1": float(np.mean(result.task_f1)),
            "bwt": result.bwt_value,
        }, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "timings.jsonl"), "w") as f:
        for timing in result.timings:
            f.write(json.dumps({
                "task_id": timing.task_id, "epochs": len(timing.epoch_seconds),
                "epoch_time_mean": timing.mean, "epoch_time_std": timing.std,
            }, sort_keys=True) + "\n")
    if result.progressive is not None:
        with open(os.path.join(out_dir, "progressive.txt"), "w") as f:
            for i, acc in enumerate(result.progressive, 1):
                f.write("%d %.17g\n" % (i, acc))


def aggregate_runs(results) -> dict:
    """Mean and sample standard deviation (ddof=1) of per-run headline numbers."""
    heads = [r.headline for r in results]
    f1s = [float(np.mean(r.task_f1)) for r in results]
    bwts = [r.bwt_value for r in results if r.bwt_value is not None]
    out = {
        "runs": len(results),
        "seeds": [r.seed for r in results],
        "accuracy_mean": float(np.mean(heads)),
        "accuracy_std": float(np.std(heads, ddof=1)) if len(heads) > 1 else 0.0,
        "macro_f1_mean": float(np.mean(f1s)),
        "macro_f1_std": float(np.std(f1s, ddof=1)) if len(f1s) > 1 else 0.0,
    }
    if bwts:
        out["bwt_mean"] = float(np.mean(bwts))
    return out
