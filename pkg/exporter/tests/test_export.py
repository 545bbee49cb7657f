import hashlib
import os

import numpy as np
import pytest

from dkvb_export.cli import main
from dkvb_export.export import ExportError, ExportSpec, export, load_rows, verify
from dkvb_export.recfile import check_file


def _spec(checkpoints, tiny_tsv, tmp_path, model="bert", **kw):
    return ExportSpec(model=checkpoints[model], data=tiny_tsv,
                      out=str(tmp_path / "out.dkvb"), max_length=16,
                      batch_size=4, **kw)


class TestLoadRows:
    def test_schema(self, tiny_tsv):
        rows = load_rows(tiny_tsv, pairs=False)
        assert len(rows) == 8
        assert rows[0].text == "the news text"
        assert rows[4].task_id == 1 and rows[4].label == 2

    def test_wrong_column_count(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("just text\t0\n")
        with pytest.raises(ExportError, match="columns"):
            load_rows(str(path), pairs=False)

    def test_noninteger_label(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("text\tpositive\t0\t0\n")
        with pytest.raises(ExportError, match="integer"):
            load_rows(str(path), pairs=False)

    def test_pair_schema(self, tmp_path):
        path = tmp_path / "pairs.tsv"
        path.write_text("premise\thypothesis\t1\t0\t0\n")
        rows = load_rows(str(path), pairs=True)
        assert rows[0].text2 == "hypothesis"


class TestExport:
    def test_shape_contract_single_sample(self, checkpoints, tmp_path):
        data = tmp_path / "one.tsv"
        data.write_text("hello world\t0\t0\t0\n")
        spec = ExportSpec(model=checkpoints["bert"], data=str(data),
                          out=str(tmp_path / "one.dkvb"), max_length=8)
        count, h, cls_flag = export(spec)
        assert (count, h, cls_flag) == (1, 768, True)
        import dkvb.store as store
        records = store.read_records(spec.out)
        assert records[0].z.shape == (8, 768)
        assert 1 <= records[0].valid_tokens <= 8

    def test_deterministic_payload(self, checkpoints, tiny_tsv, tmp_path):
        spec_a = _spec(checkpoints, tiny_tsv, tmp_path)
        export(spec_a)
        first = hashlib.sha256(open(spec_a.out, "rb").read()).hexdigest()
        export(spec_a)
        second = hashlib.sha256(open(spec_a.out, "rb").read()).hexdigest()
        assert first == second

    def test_pair_inputs_yield_one_record(self, checkpoints, tmp_path):
        path = tmp_path / "pairs.tsv"
        path.write_text("hello a\tworld b\t1\t0\t0\n")
        spec = ExportSpec(model=checkpoints["roberta"], data=str(path),
                          out=str(tmp_path / "pairs.dkvb"), max_length=16,
                          pairs=True)
        count, h, _ = export(spec)
        assert count == 1 and h == 768
        import dkvb.store as store
        pair_rec = store.read_records(spec.out)[0]
        # the joined pair consumes more positions than either side alone
        single = tmp_path / "single.tsv"
        single.write_text("hello a\t1\t0\t0\n")
        spec2 = ExportSpec(model=checkpoints["roberta"], data=str(single),
                           out=str(tmp_path / "single.dkvb"), max_length=16)
        export(spec2)
        single_rec = store.read_records(spec2.out)[0]
        assert pair_rec.valid_tokens > single_rec.valid_tokens

    def test_frozen_encoder_untouched(self, checkpoints, tiny_tsv, tmp_path):
        import torch
        from transformers import AutoModel
        model = AutoModel.from_pretrained(checkpoints["distilbert"])
        before = hashlib.sha256(b"".join(
            p.detach().numpy().tobytes() for p in model.parameters())).hexdigest()
        spec = _spec(checkpoints, tiny_tsv, tmp_path, model="distilbert")
        export(spec)
        model2 = AutoModel.from_pretrained(checkpoints["distilbert"])
        after = hashlib.sha256(b"".join(
            p.detach().numpy().tobytes() for p in model2.parameters())).hexdigest()
        assert before == after

    def test_manifest_readable_by_primary(self, checkpoints, tiny_tsv, tmp_path):
        from dkvb.store import load_manifest_records, read_manifest
        spec = _spec(checkpoints, tiny_tsv, tmp_path)
        count, h, cls_flag = export(spec)
        manifest = read_manifest(spec.manifest)
        assert manifest.count == count == 8
        assert (manifest.t, manifest.h, manifest.cls_flag) == (16, h, cls_flag)
        records = load_manifest_records(manifest, spec.manifest)
        assert len(records) == 8
        assert [r.label for r in records] == [0, 1, 0, 1, 2, 2, 3, 3]

    def test_unloadable_model(self, tiny_tsv, tmp_path):
        spec = ExportSpec(model=str(tmp_path / "nothing-here"), data=tiny_tsv,
                          out=str(tmp_path / "x.dkvb"))
        with pytest.raises(ExportError, match="cannot load"):
            export(spec)


class TestVerify:
    def test_fresh_export_passes(self, checkpoints, tiny_tsv, tmp_path, capsys):
        spec = _spec(checkpoints, tiny_tsv, tmp_path)
        export(spec)
        assert verify(spec.out, expect_h=768)
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert "magic" in out and "record count" in out

    def test_corrupted_magic_fails(self, checkpoints, tiny_tsv, tmp_path, capsys):
        spec = _spec(checkpoints, tiny_tsv, tmp_path)
        export(spec)
        data = bytearray(open(spec.out, "rb").read())
        data[0] = ord("Z")
        open(spec.out, "wb").write(bytes(data))
        assert not verify(spec.out)
        assert "FAIL" in capsys.readouterr().out

    def test_count_mismatch_detected(self, checkpoints, tiny_tsv, tmp_path):
        spec = _spec(checkpoints, tiny_tsv, tmp_path)
        export(spec)
        with open(spec.out, "ab") as f:
            f.write(b"\x00" * 10)
        checks = dict((name, ok) for name, ok, _ in check_file(spec.out))
        assert not checks["payload size"]


class TestCli:
    def test_export_then_verify(self, checkpoints, tiny_tsv, tmp_path, capsys):
        out = str(tmp_path / "cli.dkvb")
        rc = main(["export", "--model", checkpoints["bert"], "--data", tiny_tsv,
                   "--out", out, "--max-length", "16", "--batch-size", "4"])
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "wrote 8 records" in stdout
        assert main(["verify", out, "--hidden-size", "768"]) == 0
        assert main(["verify", str(tmp_path / "missing.dkvb")]) == 1

    def test_export_error_exit_code(self, checkpoints, tmp_path, capsys):
        bad = tmp_path / "bad.tsv"
        bad.write_text("only text\n")
        rc = main(["export", "--model", checkpoints["bert"], "--data", str(bad),
                   "--out", str(tmp_path / "x.dkvb")])
        assert rc == 1
        assert "error" in capsys.readouterr().err
