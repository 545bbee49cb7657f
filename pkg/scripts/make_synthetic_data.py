#!/usr/bin/env python3
"""Generate a synthetic clustered embedding dataset (train/test/corpus) with
manifests, ready for the `dkvb` CLI.

The anisotropy flag adds a large shared direction to every sample, which is
what makes naive single-head training collapse the way frozen-encoder probes
do on real text embeddings.
"""

import argparse
import os

from dkvb.numkit import RngStream
from dkvb.store import (manifest_for_file, subsample_per_class, write_manifest,
                        write_records)
from dkvb.synth import (make_clustered_records, make_corpus_records,
                        make_domain_records)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--classes", type=int, default=8)
    ap.add_argument("--train-per-class", type=int, default=100)
    ap.add_argument("--test-per-class", type=int, default=50)
    ap.add_argument("--tokens", type=int, default=4)
    ap.add_argument("--hidden", type=int, default=16)
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--center-scale", type=float, default=1.5)
    ap.add_argument("--noise", type=float, default=0.25)
    ap.add_argument("--anisotropy", type=float, default=8.0,
                    help="magnitude of the shared direction (0 disables)")
    ap.add_argument("--domains", type=int, default=0,
                    help="emit a domain-incremental set with N domains instead "
                         "(per-(domain, class) clusters, shared labels)")
    ap.add_argument("--subsample", type=int, default=0,
                    help="keep at most N train samples per class (0 = all)")
    ap.add_argument("--corpus-clusters", type=int, default=0,
                    help="also write a cross-domain corpus for generic keys")
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    if args.domains:
        base = dict(t=args.tokens, h=args.hidden, seed=args.seed,
                    center_scale=args.center_scale, noise=args.noise)
        splits = {
            "train": make_domain_records(args.domains, args.classes,
                                         args.train_per_class, **base),
            "test": make_domain_records(args.domains, args.classes,
                                        args.test_per_class, split="test",
                                        **base),
        }
    else:
        common = dict(t=args.tokens, h=args.hidden, seed=args.seed,
                      center_scale=args.center_scale, noise=args.noise,
                      shared_scale=args.anisotropy)
        splits = {
            "train": make_clustered_records(args.classes, args.train_per_class,
                                            **common),
            "test": make_clustered_records(args.classes, args.test_per_class,
                                           split="test", **common),
        }
    if args.subsample:
        splits["train"] = subsample_per_class(splits["train"], args.subsample,
                                              RngStream(args.seed))
    if args.corpus_clusters:
        splits["corpus"] = make_corpus_records(
            args.corpus_clusters, args.train_per_class, t=args.tokens,
            h=args.hidden, seed=args.seed + 1,
            center_scale=args.center_scale, noise=args.noise)

    for name, records in splits.items():
        data_path = os.path.join(args.out, f"{name}.dkvb")
        write_records(records, data_path)
        manifest = manifest_for_file(data_path, name="synthetic", split=name,
                                     encoder="synthetic-clusters")
        write_manifest(manifest, os.path.join(args.out, f"{name}.manifest"))
        print(f"{name}: {len(records)} records -> {data_path}")


if __name__ == "__main__":
    main()
