"""dkvb-export command line: `export` runs a frozen checkpoint over a TSV
dataset and writes record + manifest files; `verify` re-checks a record file
against the format contract and exits nonzero on any mismatch."""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, ExportSpec, export, verify


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dkvb-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_exp = sub.add_parser("export", help="export embeddings from a frozen encoder")
    p_exp.add_argument("--model", required=True,
                       help="checkpoint path or hub identifier")
    p_exp.add_argument("--data", required=True, help="tab-separated dataset")
    p_exp.add_argument("--out", required=True, help="output record file (.dkvb)")
    p_exp.add_argument("--max-length", type=int, default=128)
    p_exp.add_argument("--pairs", action="store_true",
                       help="rows carry sentence pairs (text, text2)")
    p_exp.add_argument("--batch-size", type=int, default=16)
    p_exp.add_argument("--manifest", default=None)
    p_exp.add_argument("--name", default=None)
    p_exp.add_argument("--split", default="train")
    p_exp.add_argument("--device", default="cpu")

    p_ver = sub.add_parser("verify", help="re-check a record file")
    p_ver.add_argument("path")
    p_ver.add_argument("--hidden-size", type=int, default=None)

    args = parser.parse_args(argv)
    try:
        if args.command == "export":
            spec = ExportSpec(model=args.model, data=args.data, out=args.out,
                              max_length=args.max_length, pairs=args.pairs,
                              batch_size=args.batch_size, manifest=args.manifest,
                              name=args.name, split=args.split,
                              device=args.device)
            count, h, cls_flag = export(spec)
            print(f"wrote {count} records (t={spec.max_length}, h={h}, "
                  f"cls_flag={int(cls_flag)}) to {spec.out}")
            print(f"manifest: {spec.manifest}")
            return 0
        ok = verify(args.path, expect_h=args.hidden_size)
        return 0 if ok else 1
    except ExportError as e:
        sys.stderr.write(f"error: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
