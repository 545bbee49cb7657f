"""Scenario construction: split labeled embedding records into ordered task
sequences for domain-, class-, and task-type-incremental learning, plus the
single-head class-incremental variant that carries the full test set for
progressive evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ScenarioError
from .numkit import RngStream
from .store import load_manifest_records, read_manifest

KINDS = ("dil", "cil", "til", "single_head_cil")


@dataclass
class TaskSet:
    task_id: int
    name: str
    task_type: str
    classes: tuple
    domains: tuple
    train: list
    val: list
    test: list

    def __post_init__(self):
        for split_a, split_b in (("train", "val"), ("train", "test"), ("val", "test")):
            ids_a = {r.id_hash for r in getattr(self, split_a)}
            ids_b = {r.id_hash for r in getattr(self, split_b)}
            if ids_a & ids_b:
                raise ScenarioError(
                    f"task {self.name}: {split_a} and {split_b} share sample IDs")


@dataclass
class ScenarioSpec:
    kind: str
    tasks: list
    seed: int
    t: int
    h: int
    cls_flag: bool
    full_test: list | None = None
    classes: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScenarioError(f"unknown scenario kind {self.kind!r}")
        if not self.classes:
            self.classes = tuple(sorted({c for task in self.tasks for c in task.classes}))
        if self.kind == "single_head_cil" and self.full_test is None:
            raise ScenarioError("single_head_cil requires the full test set")
        if self.kind in ("cil", "single_head_cil"):
            _check_disjoint([t.classes for t in self.tasks], "classes")
        if self.kind == "dil":
            _check_disjoint([t.domains for t in self.tasks], "domains")
        if self.kind == "til":
            types = [t.task_type for t in self.tasks]
            if len(set(types)) != len(types):
                raise ScenarioError("til requires a distinct task-type per task")

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def class_to_index(self) -> dict:
        return {c: i for i, c in enumerate(self.classes)}

    @property
    def multi_head(self) -> bool:
        # task-ID routing on CIL and TIL; DIL and single-head CIL share one head
        return self.kind in ("cil", "til")


def _check_disjoint(sets, what: str) -> None:
    seen: dict = {}
    for i, s in enumerate(sets):
        for item in s:
            if item in seen:
                raise ScenarioError(f"{what} overlap across tasks {seen[item]} and {i}: {item!r}")
            seen[item] = i


def _chunk(items, size: int, what: str):
    if size <= 0:
        raise ScenarioError(f"{what} per task must be positive")
    if len(items) % size != 0:
        raise ScenarioError(
            f"{len(items)} {what} do not divide into tasks of {size}")
    return [tuple(items[i:i + size]) for i in range(0, len(items), size)]


def _select(records, key, wanted) -> list:
    wanted = set(wanted)
    return [r for r in records if key(r) in wanted]


def build_scenario_from_records(train, test, kind, seed, *, val=None,
                                classes_per_task: int = 2, domains_per_task: int = 1,
                                meta: tuple | None = None) -> ScenarioSpec:
    """Build a scenario from in-memory records of a single dataset.

    For TIL pass per-task record triples to `build_til_scenario` instead. Class
    (or domain) order is a seeded permutation; task order follows it, so the
    sequence varies with `seed` and is reproducible from it.
    """
    val = val or []
    if kind not in KINDS:
        raise ScenarioError(f"unknown scenario kind {kind!r}")
    if kind == "til":
        raise ScenarioError("til scenarios are built from per-task manifests")
    if not train:
        raise ScenarioError("empty training set")
    if meta is None:
        meta = (train[0].t, train[0].h, False)
    t, h, cls_flag = meta
    rng = RngStream(seed).derive("scenario-order")

    if kind in ("cil", "single_head_cil"):
        labels = sorted({r.label for r in train} | {r.label for r in test} | {r.label for r in val})
        order = [labels[i] for i in rng.permutation(len(labels))]
        groups = _chunk(order, classes_per_task, "classes")
        tasks = [
            TaskSet(task_id=i, name=f"task{i}", task_type="classification",
                    classes=tuple(sorted(g)),
                    domains=tuple(sorted({r.domain_id for r in _select(train, lambda r: r.label, g)})),
                    train=_select(train, lambda r: r.label, g),
                    val=_select(val, lambda r: r.label, g),
                    test=_select(test, lambda r: r.label, g))
            for i, g in enumerate(groups)
        ]
        full_test = list(test) if kind == "single_head_cil" else None
        return ScenarioSpec(kind=kind, tasks=tasks, seed=seed, t=t, h=h,
                            cls_flag=cls_flag, full_test=full_test)

    # dil: partition domains, labels shared across tasks
    domains = sorted({r.domain_id for r in train} | {r.domain_id for r in test}
                     | {r.domain_id for r in val})
    order = [domains[i] for i in rng.permutation(len(domains))]
    groups = _chunk(order, domains_per_task, "domains")
    labels = tuple(sorted({r.label for r in train} | {r.label for r in test}))
    tasks = [
        TaskSet(task_id=i, name=f"task{i}", task_type="classification",
                classes=labels, domains=tuple(sorted(g)),
                train=_select(train, lambda r: r.domain_id, g),
                val=_select(val, lambda r: r.domain_id, g),
                test=_select(test, lambda r: r.domain_id, g))
        for i, g in enumerate(groups)
    ]
    return ScenarioSpec(kind="dil", tasks=tasks, seed=seed, t=t, h=h, cls_flag=cls_flag)


def build_til_scenario(task_records, seed, *, task_types=None,
                       meta: tuple | None = None) -> ScenarioSpec:
    """Build a TIL scenario from per-task (train, val, test) record triples."""
    if not task_records:
        raise ScenarioError("til needs at least one task")
    if task_types is None:
        task_types = [f"type{i}" for i in range(len(task_records))]
    if len(task_types) != len(task_records):
        raise ScenarioError("one task-type per task required")
    if meta is None:
        first_train = task_records[0][0]
        meta = (first_train[0].t, first_train[0].h, False)
    t, h, cls_flag = meta
    rng = RngStream(seed).derive("scenario-order")
    order = rng.permutation(len(task_records))
    tasks = []
    for new_id, src in enumerate(order):
        train, val, test = task_records[src]
        tasks.append(TaskSet(
            task_id=new_id, name=f"{task_types[src]}", task_type=task_types[src],
            classes=tuple(sorted({r.label for r in train} | {r.label for r in test})),
            domains=tuple(sorted({r.domain_id for r in train})),
            train=list(train), val=list(val or []), test=list(test)))
    return ScenarioSpec(kind="til", tasks=tasks, seed=seed, t=t, h=h, cls_flag=cls_flag)


def build_scenario(manifests, kind, seed, *, classes_per_task: int = 2,
                   domains_per_task: int = 1, task_types=None,
                   mmap: bool = False) -> ScenarioSpec:
    """Build a scenario from manifest paths.

    `manifests` is a {"train": path, "test": path[, "val": path]} mapping, or a
    sequence of such mappings (one per task) for TIL.
    """
    if kind == "til":
        triples = []
        metas = []
        for entry in manifests:
            triple = []
            for split in ("train", "val", "test"):
                if split in entry and entry[split]:
                    m = read_manifest(entry[split])
                    metas.append((m.t, m.h, m.cls_flag))
                    triple.append(load_manifest_records(m, entry[split], mmap=mmap))
                else:
                    triple.append([])
            triples.append(tuple(triple))
        if len(set(metas)) != 1:
            raise ScenarioError("til manifests disagree on (t, h, cls_flag)")
        return build_til_scenario(triples, seed, task_types=task_types, meta=metas[0])

    splits = {}
    metas = []
    for split in ("train", "val", "test"):
        if split in manifests and manifests[split]:
            m = read_manifest(manifests[split])
            metas.append((m.t, m.h, m.cls_flag))
            splits[split] = load_manifest_records(m, manifests[split], mmap=mmap)
        else:
            splits[split] = []
    if len(set(metas)) != 1:
        raise ScenarioError("manifests disagree on (t, h, cls_flag)")
    return build_scenario_from_records(
        splits["train"], splits["test"], kind, seed, val=splits["val"],
        classes_per_task=classes_per_task, domains_per_task=domains_per_task,
        meta=metas[0])
