"""Command-line entry point.

Subcommands: init-keys (precompute a frozen codebook checkpoint), run (N
seeded scenario runs with per-run and aggregate reports), sweep (one run batch
per value of d_key or the codebook size), report (summary table and plot data
from a finished run directory). All commands validate the configuration fully
before touching the output directory and exit nonzero with a JSON error record
on stderr when anything fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import os
import sys

import numpy as np

from .bottleneck import Codebooks, ema_init, save_codebooks
from .config import RunConfig, load_config, validate_config
from .errors import ConfigError
from .harness import (KeyInitStrategy, aggregate_runs, build_model, bwt,
                      run_scenario, write_run_outputs)
from .model import DkvbModel
from .numkit import RngStream
from .scenario import build_scenario_from_records, build_til_scenario
from .store import load_manifest_records, read_manifest


def _fail(exc) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)})
                     + "\n")
    return 1


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "runs", None) is not None:
        cfg.runs = args.runs
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    if getattr(args, "method", None) is not None:
        cfg.method = args.method
    if getattr(args, "scenario", None) is not None:
        cfg.scenario = args.scenario
    return cfg


def _load_split(path, mmap):
    if not path:
        return []
    return load_manifest_records(read_manifest(path), path, mmap=mmap)


@dataclasses.dataclass
class _Data:
    """Records loaded once; scenarios are rebuilt per run seed from them."""
    train: list
    val: list
    test: list
    til_triples: list
    meta: tuple
    corpus: list


def _load_data(cfg: RunConfig) -> _Data:
    if cfg.scenario == "til":
        triples, metas = [], []
        vals = cfg.til_val_manifests or [None] * len(cfg.til_train_manifests)
        for tr, va, te in zip(cfg.til_train_manifests, vals, cfg.til_test_manifests):
            m = read_manifest(tr)
            metas.append((m.t, m.h, m.cls_flag))
            triples.append((_load_split(tr, cfg.mmap), _load_split(va, cfg.mmap),
                            _load_split(te, cfg.mmap)))
        meta = metas[0]
        train = [r for tri in triples for r in tri[0]]
        data = _Data(train=train, val=[], test=[], til_triples=triples,
                     meta=meta, corpus=[])
    else:
        m = read_manifest(cfg.train_manifest)
        data = _Data(train=_load_split(cfg.train_manifest, cfg.mmap),
                     val=_load_split(cfg.val_manifest, cfg.mmap),
                     test=_load_split(cfg.test_manifest, cfg.mmap),
                     til_triples=[], meta=(m.t, m.h, m.cls_flag), corpus=[])
    if cfg.strategy == "generic" and cfg.corpus_manifest:
        data.corpus = _load_split(cfg.corpus_manifest, cfg.mmap)
    return data


def _scenario_for_seed(cfg: RunConfig, data: _Data, run_seed: int):
    # single-head increments keep a fixed (base-seed) order across runs
    scen_seed = cfg.seed if cfg.scenario == "single_head_cil" else run_seed
    if cfg.scenario == "til":
        return build_til_scenario(data.til_triples, scen_seed,
                                  task_types=cfg.til_task_types or None,
                                  meta=data.meta)
    return build_scenario_from_records(
        data.train, data.test, cfg.scenario, scen_seed, val=data.val,
        classes_per_task=cfg.classes_per_task,
        domains_per_task=cfg.domains_per_task, meta=data.meta)


def _strategy(cfg: RunConfig, data: _Data) -> KeyInitStrategy:
    return KeyInitStrategy(cfg.strategy, corpus=data.corpus or None,
                           epochs=cfg.keyinit_epochs, gamma=cfg.bottleneck.ema_decay,
                           batch_size=cfg.init_batch)


def _bconfig(cfg: RunConfig):
    decoder = "nonparametric" if cfg.method == "dkvb-np" else "parametric"
    epochs = KeyInitStrategy(cfg.strategy, epochs=cfg.keyinit_epochs).resolved_epochs
    return dataclasses.replace(cfg.bottleneck, decoder=decoder, init_epochs=epochs)


def _execute_runs(cfg: RunConfig, data: _Data) -> list:
    results = []
    strategy = _strategy(cfg, data)
    for k in range(cfg.runs):
        run_seed = cfg.seed + k
        spec = _scenario_for_seed(cfg, data, run_seed)
        model = None
        if cfg.method in ("dkvb-np", "dkvb-p") and cfg.checkpoint:
            model = build_model(cfg.method, spec, cfg.hyper,
                                RngStream(run_seed).derive("model"),
                                bconfig=_bconfig(cfg))
            model.load_codebooks_from(cfg.checkpoint)
        result = run_scenario(spec, cfg.method, cfg.hyper, run_seed,
                              bconfig=_bconfig(cfg), strategy=strategy,
                              model=model)
        results.append(result)
    return results


def _write_results(cfg: RunConfig, results) -> None:
    for result in results:
        run_dir = os.path.join(cfg.out, f"seed_{result.seed}")
        write_run_outputs(result, run_dir)
        if isinstance(result.model, DkvbModel):
            decoders = result.model.registry.decoders or None
            save_codebooks(result.model.codebooks,
                           os.path.join(run_dir, "model.dkvc"), decoders)
    agg = aggregate_runs(results)
    agg["method"] = cfg.method
    agg["scenario"] = cfg.scenario
    with open(os.path.join(cfg.out, "aggregate.json"), "w") as f:
        json.dump(agg, f, sort_keys=True, indent=2)
        f.write("\n")


def cmd_init_keys(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    validate_config(cfg)
    if cfg.method not in ("dkvb-np", "dkvb-p"):
        raise ConfigError("[run] method: init-keys only applies to dkvb methods")
    if cfg.strategy == "incremental":
        raise ConfigError("[keyinit] strategy: incremental keys are initialized "
                          "during the run, not precomputed")
    data = _load_data(cfg)
    stream = data.corpus if cfg.strategy == "generic" else data.train
    if not stream:
        raise ConfigError("[data] key initialization stream is empty")
    spec = _scenario_for_seed(cfg, data, cfg.seed)
    bconfig = _bconfig(cfg)
    strategy = _strategy(cfg, data)
    d_value = len(spec.classes) if bconfig.decoder == "nonparametric" \
        else (bconfig.d_value or bconfig.d_key)
    codebooks = Codebooks.build(bconfig.head_count(spec.t, spec.h), bconfig.n_keys,
                                bconfig.d_key, d_value,
                                RngStream(cfg.seed).derive("init-keys"))
    ema_init(stream, codebooks, bconfig, RngStream(cfg.seed).derive("keyinit"),
             gamma=strategy.gamma, epochs=strategy.resolved_epochs,
             batch_size=strategy.batch_size, cls_flag=spec.cls_flag)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "keys.dkvc")
    save_codebooks(codebooks, path)
    print(f"checkpoint {path}")
    print(f"heads {codebooks.n_heads} keys {codebooks.n_keys} "
          f"d_key {codebooks.d_key} d_value {codebooks.d_value}")
    print(f"strategy {cfg.strategy} epochs {strategy.resolved_epochs} "
          f"gamma {strategy.gamma}")
    print(f"key_hash {codebooks.key_hash}")
    return 0


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    validate_config(cfg)
    data = _load_data(cfg)
    results = _execute_runs(cfg, data)
    _write_results(cfg, results)
    agg = aggregate_runs(results)
    print(f"{cfg.method} {cfg.scenario}: accuracy "
          f"{agg['accuracy_mean']:.4f} +- {agg['accuracy_std']:.4f} "
          f"over {agg['runs']} run(s)")
    return 0


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    validate_config(cfg)
    if args.axis not in ("d_key", "K", "n_keys"):
        raise ConfigError(f"--axis: must be d_key or K, got {args.axis!r}")
    field = "d_key" if args.axis == "d_key" else "n_keys"
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"--values: {e}") from e
    if not values:
        raise ConfigError("--values: empty list")

    base_out = cfg.out
    configs = []
    for v in values:
        sub = dataclasses.replace(cfg)
        sub.bottleneck = dataclasses.replace(cfg.bottleneck, **{field: v})
        sub.out = os.path.join(base_out, f"{field}_{v}")
        validate_config(sub)  # rejects e.g. indivisible d_key before any work
        configs.append(sub)

    rows = []
    for v, sub in zip(values, configs):
        data = _load_data(sub)
        results = _execute_runs(sub, data)
        _write_results(sub, results)
        acc = aggregate_runs(results)["accuracy_mean"]
        rows.append((v, acc))
        print(f"{field}={v}: accuracy {acc:.4f}")
    os.makedirs(base_out, exist_ok=True)
    with open(os.path.join(base_out, f"sweep_{field}.txt"), "w") as f:
        for v, acc in rows:
            f.write("%d %.17g\n" % (v, acc))
    return 0


def _collect_report(out_dir):
    metric_files = sorted(glob.glob(os.path.join(out_dir, "**", "metrics.jsonl"),
                                    recursive=True))
    if not metric_files:
        raise ConfigError(f"no metric records under {out_dir}")
    rows = {}
    curves = {}
    for path in metric_files:
        run_dir = os.path.dirname(path)
        summary = None
        with open(path) as f:
            for line in f:
                rec = json.loads(line)
                if rec["task_id"] is None:
                    summary = rec
        if summary is None:
            continue
        r_path = os.path.join(run_dir, "R.txt")
        if os.path.exists(r_path):
            R = np.loadtxt(r_path, ndmin=2)
            recomputed = bwt(R) if R.shape[0] >= 2 else None
        else:
            recomputed = summary.get("bwt")
        epoch_means = []
        t_path = os.path.join(run_dir, "timings.jsonl")
        if os.path.exists(t_path):
            with open(t_path) as f:
                epoch_means = [json.loads(line)["epoch_time_mean"] for line in f]
        key = (summary["method"], summary["scenario"])
        rows.setdefault(key, []).append({
            "accuracy": summary["accuracy"], "macro_f1": summary["macro_f1"],
            "bwt": recomputed, "stored_bwt": summary.get("bwt"),
            "epoch_time": float(np.mean(epoch_means)) if epoch_means else None,
        })
        p_path = os.path.join(run_dir, "progressive.txt")
        if os.path.exists(p_path):
            curve = np.loadtxt(p_path, ndmin=2)
            curves.setdefault(key, []).append(curve[:, 1])
    return rows, curves


def cmd_report(args) -> int:
    out_dir = args.out
    if out_dir is None and args.config:
        cfg = load_config(args.config)
        out_dir = cfg.out
    if not out_dir:
        raise ConfigError("report needs --out (or a config with [run] out)")
    rows, curves = _collect_report(out_dir)
    header = f"{'method':<10} {'scenario':<16} {'acc':>8} {'std':>8} " \
             f"{'f1':>8} {'bwt':>8} {'epoch_s':>8}"
    print(header)
    for (method, scenario) in sorted(rows):
        runs = rows[(method, scenario)]
        accs = [r["accuracy"] for r in runs]
        f1s = [r["macro_f1"] for r in runs]
        bwts = [r["bwt"] for r in runs if r["bwt"] is not None]
        times = [r["epoch_time"] for r in runs if r["epoch_time"] is not None]
        acc_std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        print(f"{method:<10} {scenario:<16} {np.mean(accs):>8.4f} {acc_std:>8.4f} "
              f"{np.mean(f1s):>8.4f} "
              f"{np.mean(bwts) if bwts else float('nan'):>8.4f} "
              f"{np.mean(times) if times else float('nan'):>8.3f}")
    for (method, scenario), runs in sorted(curves.items()):
        aligned = [c for c in runs if len(c) == len(runs[0])]
        mean_curve = np.mean(np.stack(aligned), axis=0)
        path = os.path.join(out_dir, f"progressive_{method}_{scenario}.txt")
        with open(path, "w") as f:
            for i, acc in enumerate(mean_curve, 1):
                f.write("%d %.17g\n" % (i, acc))
        print(f"progressive plot data: {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dkvb",
        description="Discrete key-value bottleneck continual-learning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="INI config file")
        p.add_argument("--runs", type=int, default=None, help="number of seeded runs")
        p.add_argument("--seed", type=int, default=None, help="base seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--method", default=None,
                       help="dkvb-np | dkvb-p | ncl | ewc | derpp")
        p.add_argument("--scenario", default=None,
                       help="dil | cil | til | single_head_cil")

    common(sub.add_parser("init-keys", help="precompute a frozen key checkpoint"))
    common(sub.add_parser("run", help="execute seeded scenario runs"))
    p_sweep = sub.add_parser("sweep", help="run once per bottleneck parameter value")
    common(p_sweep)
    p_sweep.add_argument("--axis", required=True, help="d_key or K")
    p_sweep.add_argument("--values", required=True, help="comma-separated integers")
    p_report = sub.add_parser("report", help="summarize a run directory")
    p_report.add_argument("--config", default=None)
    p_report.add_argument("--out", default=None)

    args = parser.parse_args(argv)
    handlers = {"init-keys": cmd_init_keys, "run": cmd_run,
                "sweep": cmd_sweep, "report": cmd_report}
    try:
        return handlers[args.command](args)
    except Exception as e:  # noqa: BLE001 - single CLI error funnel
        return _fail(e)


if __name__ == "__main__":
    sys.exit(main())
