import numpy as np
import pytest

from dkvb.bottleneck import BottleneckConfig, forward
from dkvb.errors import ConfigError, RoutingError
from dkvb.harness import KeyInitStrategy, run_scenario
from dkvb.model import DkvbModel, HyperParams
from dkvb.numkit import RngStream
from dkvb.scenario import build_scenario_from_records, build_til_scenario
from dkvb.store import EmbeddingRecord
from dkvb.synth import make_clustered_records, make_domain_records


def _cil_spec(seed=3, n_classes=4, per=16, t=4, h=16, **kw):
    train = make_clustered_records(n_classes, per, t=t, h=h, seed=seed, **kw)
    test = make_clustered_records(n_classes, 8, t=t, h=h, seed=seed,
                                  split="test", **kw)
    return build_scenario_from_records(train, test, "cil", seed=5,
                                       classes_per_task=2)


class TestParametricVariant:
    def test_multi_head_cil_learns(self):
        spec = _cil_spec()
        hyper = HyperParams(epochs=6, batch_size=8, values_lr=1e-2,
                            decoder_lr=1e-3)
        result = run_scenario(spec, "dkvb-p", hyper, seed=2,
                              bconfig=BottleneckConfig(d_key=4, n_keys=32),
                              strategy=KeyInitStrategy("oracle"))
        assert result.headline >= 0.9
        assert len(result.model.registry.decoders) == spec.n_tasks

    def test_single_head_parametric(self):
        train = make_clustered_records(3, 16, t=2, h=8, seed=6)
        test = make_clustered_records(3, 8, t=2, h=8, seed=6, split="test")
        spec = build_scenario_from_records(train, test, "single_head_cil",
                                           seed=1, classes_per_task=3)
        hyper = HyperParams(epochs=8, batch_size=8, values_lr=1e-2,
                            decoder_lr=1e-2)
        result = run_scenario(spec, "dkvb-p", hyper, seed=2,
                              bconfig=BottleneckConfig(d_key=2, n_keys=32),
                              strategy=KeyInitStrategy("oracle"))
        assert result.headline >= 0.9
        assert list(result.model.registry.decoders) == [None]

    def test_d_value_defaults_to_d_key(self):
        spec = _cil_spec()
        model = DkvbModel(BottleneckConfig(d_key=4, n_keys=8,
                                           decoder="parametric"),
                          spec.t, spec.h, spec.cls_flag, spec.classes, False,
                          HyperParams(), RngStream(0))
        assert model.d_value == 4

    def test_np_rejects_mismatched_d_value(self):
        spec = _cil_spec()
        with pytest.raises(ConfigError):
            DkvbModel(BottleneckConfig(d_key=4, n_keys=8, d_value=7,
                                       decoder="nonparametric"),
                      spec.t, spec.h, spec.cls_flag, spec.classes, False,
                      HyperParams(), RngStream(0))


class TestScenarioKinds:
    def test_dil_shared_labels(self):
        train = make_domain_records(3, 2, 16, t=2, h=8, seed=4)
        test = make_domain_records(3, 2, 8, t=2, h=8, seed=4, split="test")
        spec = build_scenario_from_records(train, test, "dil", seed=2)
        assert spec.n_tasks == 3 and not spec.multi_head
        hyper = HyperParams(epochs=6, batch_size=8, values_lr=1e-2)
        result = run_scenario(spec, "dkvb-np", hyper, seed=3,
                              bconfig=BottleneckConfig(d_key=2, n_keys=64),
                              strategy=KeyInitStrategy("oracle"))
        assert result.headline >= 0.9

    def test_til_with_disjoint_label_ranges(self):
        triples = []
        for task in range(3):
            # distinct task-types get their own label range (2 classes each)
            recs = make_clustered_records(2, 12, t=2, h=8, seed=40 + task)
            test = make_clustered_records(2, 6, t=2, h=8, seed=40 + task,
                                          split="test")
            for r in recs + test:
                r.label += 2 * task
            triples.append((recs, [], test))
        spec = build_til_scenario(triples, seed=1,
                                  task_types=["topic", "sentiment", "nli"])
        assert spec.multi_head
        hyper = HyperParams(epochs=6, batch_size=8, values_lr=1e-2)
        result = run_scenario(spec, "dkvb-np", hyper, seed=5,
                              bconfig=BottleneckConfig(d_key=2, n_keys=64),
                              strategy=KeyInitStrategy("oracle"))
        assert result.headline >= 0.9
        assert result.bwt_value == pytest.approx(0.0, abs=0.05)

    def test_generic_keys_from_corpus(self):
        spec = _cil_spec()
        corpus = make_clustered_records(8, 20, t=4, h=16, seed=77, split="corpus")
        hyper = HyperParams(epochs=5, batch_size=8, values_lr=1e-2)
        result = run_scenario(spec, "dkvb-np", hyper, seed=3,
                              bconfig=BottleneckConfig(d_key=4, n_keys=32),
                              strategy=KeyInitStrategy("generic", corpus=corpus))
        assert result.headline >= 0.75  # cross-domain keys still usable

    def test_incremental_keys_preserve_values(self):
        spec = _cil_spec()
        hyper = HyperParams(epochs=3, batch_size=8, values_lr=1e-2)
        result = run_scenario(spec, "dkvb-np", hyper, seed=3,
                              bconfig=BottleneckConfig(d_key=4, n_keys=32),
                              strategy=KeyInitStrategy("incremental"))
        model = result.model
        assert model.codebooks.frozen
        # rows never touched by any batch keep their init bytes even though the
        # keys were re-opened and re-frozen before every task
        values_fresh = DkvbModel(
            model.config, spec.t, spec.h, spec.cls_flag, spec.classes, False,
            hyper, RngStream(3).derive("model")).codebooks.values
        untouched = ~model.touched_union
        assert untouched.any()
        assert model.codebooks.values_flat[untouched].tobytes() == \
            values_fresh.reshape(-1, model.d_value)[untouched].tobytes()


class TestArchitectureVariants:
    def test_token_segmentation_run(self):
        spec = _cil_spec(t=8, h=8)
        hyper = HyperParams(epochs=6, batch_size=8, values_lr=1e-2)
        result = run_scenario(
            spec, "dkvb-np", hyper, seed=2,
            bconfig=BottleneckConfig(segmentation="token", d_key=2, n_keys=32),
            strategy=KeyInitStrategy("oracle"))
        assert result.headline >= 0.75

    def test_pooling_before_run(self):
        spec = _cil_spec()
        hyper = HyperParams(epochs=6, batch_size=8, values_lr=1e-2)
        result = run_scenario(
            spec, "dkvb-np", hyper, seed=2,
            bconfig=BottleneckConfig(d_key=4, n_keys=32,
                                     pooling_position="before"),
            strategy=KeyInitStrategy("oracle"))
        assert result.headline >= 0.9

    def test_cls_pooling_run(self):
        train = make_clustered_records(4, 16, t=4, h=16, seed=8)
        test = make_clustered_records(4, 8, t=4, h=16, seed=8, split="test")
        spec = build_scenario_from_records(train, test, "cil", seed=5,
                                           classes_per_task=2,
                                           meta=(4, 16, True))
        hyper = HyperParams(epochs=6, batch_size=8, values_lr=1e-2)
        result = run_scenario(
            spec, "dkvb-np", hyper, seed=2,
            bconfig=BottleneckConfig(d_key=4, n_keys=32, pooling_mode="cls"),
            strategy=KeyInitStrategy("oracle"))
        assert result.headline >= 0.9

    def test_token_cls_uses_first_head_only(self):
        config = BottleneckConfig(segmentation="token", d_key=2, n_keys=16,
                                  pooling_mode="cls", decoder="nonparametric")
        model = DkvbModel(config, 8, 8, True, (0, 1, 2, 3), False,
                          HyperParams(), RngStream(1))
        assert model.n_rep_rows == 1
        assert model.codebooks.n_heads == 4  # full token axis still owns heads


class TestSelectionCache:
    def test_cached_and_uncached_runs_identical(self):
        spec = _cil_spec()
        hyper = HyperParams(epochs=3, batch_size=8, values_lr=1e-2)
        bconfig = BottleneckConfig(d_key=4, n_keys=32, decoder="nonparametric")
        results = []
        for cached in (True, False):
            model = DkvbModel(bconfig, spec.t, spec.h, spec.cls_flag,
                              spec.classes, False, hyper,
                              RngStream(5).derive("model"),
                              cache_quantization=cached)
            r = run_scenario(spec, "dkvb-np", hyper, seed=5, model=model,
                             strategy=KeyInitStrategy("oracle"))
            results.append((r.R.tobytes(),
                            model.codebooks.values.tobytes()))
        assert results[0] == results[1]

    def test_cache_invalidated_by_key_reinit(self):
        spec = _cil_spec()
        hyper = HyperParams(epochs=1, batch_size=8)
        result = run_scenario(spec, "dkvb-np", hyper, seed=3,
                              bconfig=BottleneckConfig(d_key=4, n_keys=32),
                              strategy=KeyInitStrategy("incremental"))
        model = result.model
        assert model._sel_cache_hash == model.codebooks.key_hash
        model.reopen_keys()
        model.init_keys(spec.tasks[0].train, RngStream(9))
        rec = spec.tasks[0].test[0]
        model._forward_result(rec)
        assert model._sel_cache_hash == model.codebooks.key_hash
        assert rec.id_hash in model._sel_cache


class TestBatchLocality:
    def test_single_batch_leaves_complement_bit_identical(self):
        spec = _cil_spec()
        hyper = HyperParams(epochs=0, batch_size=8, values_lr=1e-2)
        bconfig = BottleneckConfig(d_key=4, n_keys=32, decoder="nonparametric")
        model = DkvbModel(bconfig, spec.t, spec.h, spec.cls_flag, spec.classes,
                          False, hyper, RngStream(7).derive("model"))
        model.init_keys([r for t in spec.tasks for r in t.train], RngStream(8))
        task = spec.tasks[0]
        model.begin_task(task)
        batch = task.train[:8]
        touched = np.zeros(model.touched_union.shape, dtype=bool)
        for r in batch:
            touched[forward(r.z, bconfig, model.codebooks,
                            r.valid_tokens).touched_rows] = True
        assert touched.any() and (~touched).any()
        complement_before = model.codebooks.values_flat[~touched].tobytes()
        touched_before = model.codebooks.values_flat[touched].tobytes()
        model.train_batch(batch, task.task_id)
        assert model.codebooks.values_flat[~touched].tobytes() == complement_before
        assert model.codebooks.values_flat[touched].tobytes() != touched_before


class TestRouting:
    def test_multi_head_predict_requires_known_task(self):
        spec = _cil_spec()
        hyper = HyperParams(epochs=1, batch_size=8)
        result = run_scenario(spec, "dkvb-np", hyper, seed=2,
                              bconfig=BottleneckConfig(d_key=4, n_keys=16),
                              strategy=KeyInitStrategy("oracle"))
        with pytest.raises(RoutingError):
            result.model.predict(spec.tasks[0].test, task_id=999)

    def test_training_disjoint_tasks_cannot_move_other_logits(self):
        # sign-grid centers: every d_key slice separates all classes by >= 6,
        # so per-head key selections are disjoint across classes by design
        t, h, d_key = 2, 16, 4
        gen = np.random.default_rng(0)
        records = {"train": [], "test": []}
        for c in range(4):
            bits = np.array([1 if c & 1 else -1, 1 if c & 2 else -1] * (d_key // 2))
            center = np.tile(3.0 * bits, h // d_key)
            for split, n in (("train", 16), ("test", 8)):
                for i in range(n):
                    records[split].append(EmbeddingRecord(
                        sample_id=f"{split}-{c}-{i}",
                        z=(center + 0.2 * gen.normal(size=(t, h))).astype(np.float32),
                        label=c))
        spec = build_scenario_from_records(records["train"], records["test"],
                                           "cil", seed=5, classes_per_task=2)
        hyper = HyperParams(epochs=3, batch_size=8, values_lr=1e-2)
        bconfig = BottleneckConfig(d_key=4, n_keys=64, decoder="nonparametric")
        model = DkvbModel(bconfig, spec.t, spec.h, spec.cls_flag, spec.classes,
                          False, hyper, RngStream(9).derive("model"))
        model.init_keys([r for t in spec.tasks for r in t.train], RngStream(10))
        for task in spec.tasks:
            model.begin_task(task)
        task0, task1 = spec.tasks[0], spec.tasks[1]

        def logits_of(records, task_id):
            return np.stack([model._forward_logits(r, task_id, train=False)[1]
                             for r in records])

        touched_before = model.touched_union.copy()
        before = logits_of(task0.test, task0.task_id)
        for lo in range(0, len(task1.train), 8):
            model.train_batch(task1.train[lo:lo + 8], task1.task_id)
        new_rows = model.touched_union & ~touched_before
        task0_rows = np.zeros_like(model.touched_union)
        for r in task0.test:
            task0_rows[forward(r.z, bconfig, model.codebooks,
                               r.valid_tokens).touched_rows] = True
        assert not (new_rows & task0_rows).any()  # well-separated by design
        after = logits_of(task0.test, task0.task_id)
        finite = np.isfinite(before)
        assert np.array_equal(before[finite], after[finite])
