#!/usr/bin/env python3
"""Drive the four ablation arms end to end at the desk preset and print the
per-arm target-domain dice plus stage wall times. Development harness for
preset tuning; the acceptance suite runs the same sequence through pytest.

    python3 benchmarks/run_ablation.py --out /tmp/ablation --seed 0
"""

import argparse
import json
import time

from modaseg.config import ablation_variant, load_config, stage_plan
from modaseg.pipeline import run_report, run_stage, stage_dir

ARMS = ("full", "seg_only_disc", "s1_only", "no_adapt")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", default=None)
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--arms", default=",".join(ARMS))
    args = ap.parse_args()

    t_start = time.perf_counter()
    for arm in args.arms.split(","):
        cfg = ablation_variant(load_config(args.config, preset=args.preset,
                                           seed=args.seed), arm)
        for stage in stage_plan(arm):
            t0 = time.perf_counter()
            run_stage(stage, cfg, args.out)
            print(f"{arm:14s} {stage:11s} {time.perf_counter() - t0:7.1f}s", flush=True)
        doc = json.loads((stage_dir(args.out, arm, "evaluate") / "eval.json").read_text())
        print(f"{arm:14s} mean foreground dice = "
              f"{doc['summary']['mean_foreground_dice']:.4f}", flush=True)
    rdir = run_report(args.out)
    print(f"\ntotal {time.perf_counter() - t_start:.0f}s\n")
    print((rdir / "ablation.txt").read_text())
    print(json.dumps(json.loads((rdir / "ablation.json").read_text())["rows"], indent=2))


if __name__ == "__main__":
    main()
