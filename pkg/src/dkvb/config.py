"""Plain-text run configuration: an INI file with sections mirroring RunConfig.

Sections: [run] method/scenario/seed/runs/out, [data] manifests and task
splitting, [bottleneck] architecture parameters, [keyinit] strategy, [train]
hyperparameters. Committed presets under presets/ carry the tuned defaults
for each architecture variant. Every field is validated (with its [section] path in
the error) before a command does any work.
"""

from __future__ import annotations

import configparser
import dataclasses
import os

from .bottleneck import BottleneckConfig
from .errors import ConfigError
from .harness import METHODS
from .model import HyperParams
from .scenario import KINDS
from .store import read_manifest


@dataclasses.dataclass
class RunConfig:
    # [run]
    method: str = "dkvb-np"
    scenario: str = "cil"
    seed: int = 1
    runs: int = 5
    out: str = "runs/out"
    # [data]
    train_manifest: str | None = None
    val_manifest: str | None = None
    test_manifest: str | None = None
    corpus_manifest: str | None = None
    classes_per_task: int = 2
    domains_per_task: int = 1
    til_train_manifests: list = dataclasses.field(default_factory=list)
    til_val_manifests: list = dataclasses.field(default_factory=list)
    til_test_manifests: list = dataclasses.field(default_factory=list)
    til_task_types: list = dataclasses.field(default_factory=list)
    mmap: bool = False
    # [bottleneck]
    bottleneck: BottleneckConfig = dataclasses.field(default_factory=BottleneckConfig)
    init_batch: int = 256
    # [keyinit]
    strategy: str = "oracle"
    keyinit_epochs: int | None = None  # None: 3 (incremental/oracle), 1 (generic)
    checkpoint: str | None = None
    # [train]
    hyper: HyperParams = dataclasses.field(default_factory=HyperParams)
    ewc_mode: str = "additive"


def _get(parser, section, key, cast, default, path):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        if cast is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return cast(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} ({e})") from e


def _get_list(parser, section, key):
    if not parser.has_option(section, key):
        return []
    raw = parser.get(section, key).strip()
    return [item.strip() for item in raw.split(",") if item.strip()]


def load_config(path) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser()
    parser.read(path)
    cfg = RunConfig()
    base = os.path.dirname(os.path.abspath(path))

    def respath(p):
        return p if p is None or os.path.isabs(p) else os.path.join(base, p)

    cfg.method = _get(parser, "run", "method", str, cfg.method, path)
    cfg.scenario = _get(parser, "run", "scenario", str, cfg.scenario, path)
    cfg.seed = _get(parser, "run", "seed", int, cfg.seed, path)
    cfg.runs = _get(parser, "run", "runs", int, cfg.runs, path)
    cfg.out = respath(_get(parser, "run", "out", str, cfg.out, path))

    cfg.train_manifest = respath(_get(parser, "data", "train_manifest", str, None, path))
    cfg.val_manifest = respath(_get(parser, "data", "val_manifest", str, None, path))
    cfg.test_manifest = respath(_get(parser, "data", "test_manifest", str, None, path))
    cfg.corpus_manifest = respath(_get(parser, "data", "corpus_manifest", str, None, path))
    cfg.classes_per_task = _get(parser, "data", "classes_per_task", int,
                                cfg.classes_per_task, path)
    cfg.domains_per_task = _get(parser, "data", "domains_per_task", int,
                                cfg.domains_per_task, path)
    cfg.til_train_manifests = [respath(p) for p in _get_list(parser, "data", "til_train_manifests")]
    cfg.til_val_manifests = [respath(p) for p in _get_list(parser, "data", "til_val_manifests")]
    cfg.til_test_manifests = [respath(p) for p in _get_list(parser, "data", "til_test_manifests")]
    cfg.til_task_types = _get_list(parser, "data", "til_task_types")
    cfg.mmap = _get(parser, "data", "mmap", bool, cfg.mmap, path)

    b = cfg.bottleneck
    d_value_raw = _get(parser, "bottleneck", "d_value", str, "auto", path)
    cfg.bottleneck = BottleneckConfig(
        segmentation=_get(parser, "bottleneck", "segmentation", str, b.segmentation, path),
        d_key=_get(parser, "bottleneck", "d_key", int, b.d_key, path),
        n_keys=_get(parser, "bottleneck", "n_keys", int, b.n_keys, path),
        d_value=None if d_value_raw == "auto" else int(d_value_raw),
        pooling_mode=_get(parser, "bottleneck", "pooling_mode", str, b.pooling_mode, path),
        pooling_position=_get(parser, "bottleneck", "pooling_position", str,
                              b.pooling_position, path),
        decoder=b.decoder,  # derived from [run] method
        ema_decay=_get(parser, "bottleneck", "ema_decay", float, b.ema_decay, path),
        init_epochs=_get(parser, "bottleneck", "init_epochs", int, b.init_epochs, path),
    )
    cfg.init_batch = _get(parser, "bottleneck", "init_batch", int, cfg.init_batch, path)

    cfg.strategy = _get(parser, "keyinit", "strategy", str, cfg.strategy, path)
    cfg.keyinit_epochs = _get(parser, "keyinit", "epochs", int, None, path)
    cfg.checkpoint = respath(_get(parser, "keyinit", "checkpoint", str, None, path))

    hp = cfg.hyper
    cfg.hyper = HyperParams(
        epochs=_get(parser, "train", "epochs", int, hp.epochs, path),
        batch_size=_get(parser, "train", "batch_size", int, hp.batch_size, path),
        values_lr=_get(parser, "train", "values_lr", float, hp.values_lr, path),
        decoder_lr=_get(parser, "train", "decoder_lr", float, hp.decoder_lr, path),
        dropout=_get(parser, "train", "dropout", float, hp.dropout, path),
        weight_decay=_get(parser, "train", "weight_decay", float, hp.weight_decay, path),
        ewc_lambda=_get(parser, "train", "ewc_lambda", float, hp.ewc_lambda, path),
        derpp_alpha=_get(parser, "train", "derpp_alpha", float, hp.derpp_alpha, path),
        derpp_beta=_get(parser, "train", "derpp_beta", float, hp.derpp_beta, path),
        replay_capacity=_get(parser, "train", "replay_capacity", int,
                             hp.replay_capacity, path),
        replay_count=_get(parser, "train", "replay_count", int, hp.replay_count, path),
        fisher_samples=_get(parser, "train", "fisher_samples", int, None, path),
    )
    cfg.ewc_mode = _get(parser, "train", "ewc_mode", str, cfg.ewc_mode, path)
    return cfg


def validate_config(cfg: RunConfig, *, need_data: bool = True) -> None:
    """Full validation before any side effect; raises ConfigError naming the
    offending [section] field."""
    if cfg.method not in METHODS:
        raise ConfigError(f"[run] method: unknown method {cfg.method!r}")
    if cfg.scenario not in KINDS:
        raise ConfigError(f"[run] scenario: unknown scenario {cfg.scenario!r}")
    if cfg.runs < 1:
        raise ConfigError("[run] runs: must be >= 1")
    if cfg.strategy not in ("incremental", "oracle", "generic"):
        raise ConfigError(f"[keyinit] strategy: unknown strategy {cfg.strategy!r}")
    if cfg.hyper.epochs < 0 or cfg.hyper.batch_size < 1:
        raise ConfigError("[train] epochs/batch_size out of range")
    if not (0.0 <= cfg.hyper.dropout < 1.0):
        raise ConfigError("[train] dropout: must be in [0, 1)")
    if cfg.ewc_mode not in ("additive", "running"):
        raise ConfigError(f"[train] ewc_mode: unknown mode {cfg.ewc_mode!r}")

    if not need_data:
        return
    if cfg.scenario == "til":
        if not cfg.til_train_manifests or not cfg.til_test_manifests:
            raise ConfigError("[data] til_train_manifests/til_test_manifests required for til")
        if len(cfg.til_train_manifests) != len(cfg.til_test_manifests):
            raise ConfigError("[data] til manifest lists must have equal lengths")
        manifest_paths = cfg.til_train_manifests + cfg.til_test_manifests \
            + cfg.til_val_manifests
    else:
        if not cfg.train_manifest or not cfg.test_manifest:
            raise ConfigError("[data] train_manifest and test_manifest are required")
        manifest_paths = [p for p in (cfg.train_manifest, cfg.val_manifest,
                                      cfg.test_manifest) if p]
    meta = None
    for p in manifest_paths:
        m = read_manifest(p)
        if meta is None:
            meta = (m.t, m.h, m.cls_flag)
        elif (m.t, m.h, m.cls_flag) != meta:
            raise ConfigError(f"[data] manifest {p} disagrees on (t, h, cls_flag)")

    if cfg.method in ("dkvb-np", "dkvb-p"):
        decoder = "nonparametric" if cfg.method == "dkvb-np" else "parametric"
        bconfig = dataclasses.replace(cfg.bottleneck, decoder=decoder)
        t, h, cls_flag = meta
        bconfig.validate(t, h, cls_flag)
        if cfg.strategy == "generic":
            if not cfg.corpus_manifest:
                raise ConfigError("[data] corpus_manifest: required for generic key init")
            train_set = {os.path.abspath(p) for p in
                         ([cfg.train_manifest] if cfg.train_manifest else
                          cfg.til_train_manifests)}
            if os.path.abspath(cfg.corpus_manifest) in train_set:
                raise ConfigError(
                    "[data] corpus_manifest: generic keys need a corpus distinct "
                    "from the training manifests")
            read_manifest(cfg.corpus_manifest)
        if cfg.checkpoint and not os.path.exists(cfg.checkpoint):
            raise ConfigError(f"[keyinit] checkpoint: {cfg.checkpoint} does not exist")
