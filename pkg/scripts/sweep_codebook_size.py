#!/usr/bin/env python3
"""Sensitivity of multi-head class-incremental accuracy to the bottleneck
parameters: sweep the number of key-value pairs (or the key dimension) on a
synthetic separable task. More pairs buy a finer discretization of the input
distribution until the trend saturates.
"""

import argparse

import numpy as np

from dkvb.bottleneck import BottleneckConfig
from dkvb.harness import KeyInitStrategy, run_scenario
from dkvb.model import HyperParams
from dkvb.scenario import build_scenario_from_records
from dkvb.synth import make_clustered_records


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--axis", choices=("K", "d_key"), default="K")
    ap.add_argument("--values", default="1,4,16,64,256")
    ap.add_argument("--runs", type=int, default=3)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    values = [int(v) for v in args.values.split(",")]

    train = make_clustered_records(8, 40, t=4, h=16, seed=21)
    test = make_clustered_records(8, 15, t=4, h=16, seed=21, split="test")
    spec = build_scenario_from_records(train, test, "cil", seed=5,
                                       classes_per_task=2)
    hyper = HyperParams(epochs=5, batch_size=16, values_lr=1e-2)

    print(f"{args.axis:>8} {'accuracy':>10} {'std':>8}")
    for v in values:
        if args.axis == "K":
            bconfig = BottleneckConfig(d_key=4, n_keys=v)
        else:
            if spec.h % v != 0:
                print(f"{v:>8} {'skipped':>10} (hidden size {spec.h} not divisible)")
                continue
            bconfig = BottleneckConfig(d_key=v, n_keys=64)
        heads = []
        for k in range(args.runs):
            result = run_scenario(spec, "dkvb-np", hyper, args.seed + k,
                                  bconfig=bconfig,
                                  strategy=KeyInitStrategy("oracle"))
            heads.append(result.headline)
        print(f"{v:>8} {np.mean(heads):>10.4f} {np.std(heads):>8.4f}")


if __name__ == "__main__":
    main()
