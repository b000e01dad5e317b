"""Alternating training: programmer with the retriever frozen, then retriever
with the programmer frozen. Shows per-epoch checksums and retrieval purity.

Run: python demos/04_retriever_training.py   (one to two minutes)
"""

import dataclasses

import numpy as np

from marlqa import retriever as R, trainer as T

cfg = T.RunConfig(marl_max_epochs=6, patience=6)
cfg = dataclasses.replace(cfg, stage=dataclasses.replace(cfg.stage, eta1=0.3))
sp = T.prepare_data(cfg)
pool = R.CandidatePool(sp.train)
theta = T.train_vanilla_pipeline(cfg, sp)


def purity(phi):
    """Share of top-5 retrieved questions from the target's own planted cluster."""
    return np.mean([np.mean([pool.questions[i].template_id == q.template_id
                             for i in R.top_n(q, pool, phi, 5).ids]) for q in sp.test])


jac = np.mean([np.mean([pool.questions[i].template_id == q.template_id
                        for i in R.jaccard_retrieve(q, pool, 5).ids]) for q in sp.test])
phi0 = T.init_phi(theta, cfg)
print(f"cluster purity of top-5: jaccard {jac:.3f}, learned at init {purity(phi0):.3f}\n")

_, phi, log_ = T.train_marl(cfg, sp, theta, phi0)
print("epoch  meta-reward  valid F1  phi fixed in stage 1  theta fixed in stage 2")
for r in log_.records:
    if r["stage"] != "marl":
        continue
    print(f"{r['epoch']:>5}  {r['meta_reward']:11.3f}  {r['valid_micro']:8.3f}  "
          f"{str(r['phi_stage1_start'] == r['phi_stage1_end']):>20}  "
          f"{str(r['theta_stage2_start'] == r['theta_stage2_end']):>22}")
print(f"\ncluster purity of top-5 with the best retriever: {purity(phi):.3f}")
