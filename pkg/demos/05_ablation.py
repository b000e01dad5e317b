"""Vanilla, random, Jaccard and learned retrieval over several seeds.

Run: python demos/05_ablation.py [--eta1 1e-4] [--seeds 0,1,2,3,4] [--workers 1]
Each seed takes one to two minutes on one core.
"""

import argparse
import dataclasses

from marlqa import trainer as T

ap = argparse.ArgumentParser()
ap.add_argument("--eta1", type=float, default=T.RunConfig().stage.eta1)
ap.add_argument("--seeds", default="0,1,2,3,4")
ap.add_argument("--workers", type=int, default=1)
args = ap.parse_args()

cfg = T.RunConfig()
cfg = dataclasses.replace(cfg, stage=dataclasses.replace(cfg.stage, eta1=args.eta1))
res = T.ablate(cfg, [int(s) for s in args.seeds.split(",")], workers=args.workers)
print(f"inner step eta1={args.eta1:g}\n")
print(res.table())
for seed, m in res.per_seed_violations():
    print(f"seed {seed}: " + ", ".join(f"{a} {100 * v:.2f}" for a, v in m.items()))
