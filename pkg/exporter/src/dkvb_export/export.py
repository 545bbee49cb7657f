"""Frozen-encoder embedding export.

Reads a tab-separated dataset (text [, text2], integer label, task_id,
domain_id), runs it through a frozen encoder-only checkpoint in batches, and
writes last-hidden-state token embeddings (never the pooler output; pooling is
the consumer's job) in the record wire format, plus a one-line manifest.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from transformers import AutoModel, AutoTokenizer

from .recfile import RecordWriter, check_file, write_manifest


class ExportError(RuntimeError):
    pass


@dataclass
class ExportSpec:
    model: str                 # checkpoint path or hub identifier
    data: str                  # tsv dataset
    out: str                   # output .dkvb file
    max_length: int = 128
    pairs: bool = False        # rows carry (text, text2) joined per the model's pair template
    batch_size: int = 16
    manifest: str | None = None
    name: str | None = None
    split: str = "train"
    device: str = "cpu"

    def __post_init__(self):
        if self.max_length <= 0:
            raise ExportError("max token length must be positive")
        if self.name is None:
            self.name = os.path.splitext(os.path.basename(self.data))[0]
        if self.manifest is None:
            self.manifest = os.path.splitext(self.out)[0] + ".manifest"


@dataclass
class Row:
    sample_id: str
    text: str
    text2: str | None
    label: int
    task_id: int
    domain_id: int


def load_rows(path, pairs: bool) -> list:
    want = 5 if pairs else 4
    rows = []
    with open(path, newline="") as f:
        for lineno, cells in enumerate(csv.reader(f, delimiter="\t"), 1):
            if not cells or (len(cells) == 1 and not cells[0].strip()):
                continue
            if len(cells) != want:
                raise ExportError(
                    f"{path}:{lineno}: expected {want} tab-separated columns "
                    f"(text{', text2' if pairs else ''}, label, task_id, "
                    f"domain_id), got {len(cells)}")
            try:
                label, task_id, domain_id = (int(cells[-3]), int(cells[-2]),
                                             int(cells[-1]))
            except ValueError as e:
                raise ExportError(f"{path}:{lineno}: label/task_id/domain_id "
                                  f"must be integers ({e})") from e
            rows.append(Row(sample_id=f"{os.path.basename(path)}:{lineno}",
                            text=cells[0], text2=cells[1] if pairs else None,
                            label=label, task_id=task_id, domain_id=domain_id))
    if not rows:
        raise ExportError(f"{path}: no data rows")
    return rows


def _detect_cls_flag(tokenizer) -> bool:
    ids = tokenizer("probe", add_special_tokens=True)["input_ids"]
    starters = {t for t in (tokenizer.cls_token_id, tokenizer.bos_token_id)
                if t is not None}
    return bool(ids) and ids[0] in starters


def export(spec: ExportSpec):
    """Run the export; returns (record count, hidden size, cls_flag)."""
    rows = load_rows(spec.data, spec.pairs)
    try:
        tokenizer = AutoTokenizer.from_pretrained(spec.model)
        model = AutoModel.from_pretrained(spec.model)
    except Exception as e:
        raise ExportError(f"cannot load {spec.model!r}: {e}") from e
    model.eval()
    model.requires_grad_(False)
    device = torch.device(spec.device)
    model.to(device)
    h = model.config.hidden_size
    cls_flag = _detect_cls_flag(tokenizer)

    out_dir = os.path.dirname(os.path.abspath(spec.out))
    os.makedirs(out_dir, exist_ok=True)
    with RecordWriter(spec.out, t=spec.max_length, h=h, cls_flag=cls_flag) as w:
        for lo in range(0, len(rows), spec.batch_size):
            batch = rows[lo:lo + spec.batch_size]
            texts = [r.text for r in batch]
            pair_texts = [r.text2 for r in batch] if spec.pairs else None
            enc = tokenizer(texts, pair_texts, max_length=spec.max_length,
                            padding="max_length", truncation=True,
                            return_tensors="pt")
            enc = {k: v.to(device) for k, v in enc.items()}
            with torch.no_grad():
                hidden = model(**enc).last_hidden_state
            z = hidden.to(torch.float32).cpu().numpy()
            mask = enc["attention_mask"].cpu().numpy()
            for j, row in enumerate(batch):
                w.append(row.sample_id, z[j], row.label, row.task_id,
                         row.domain_id, int(mask[j].sum()))
        count = w.count
    write_manifest(spec.manifest, name=spec.name, split=spec.split,
                   encoder=spec.model, data_file=spec.out,
                   t=spec.max_length, h=h, cls_flag=cls_flag, count=count)
    return count, h, cls_flag


def verify(path, *, expect_h: int | None = None) -> bool:
    """Re-check a file against the reader contract, printing per-field lines."""
    checks = check_file(path, expect_h=expect_h)
    for name, ok, detail in checks:
        status = "ok" if ok else "FAIL"
        print(f"{status:>4}  {name}" + (f": {detail}" if detail else ""))
    return all(ok for _, ok, _ in checks)
