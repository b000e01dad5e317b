"""Supervised pretraining on pseudo-gold, then a round of plain policy-gradient RL.

Run: python demos/02_pretrain_and_decode.py   (about a minute)
"""

from marlqa import trainer as T
from marlqa.kb import Environment
from marlqa.metrics import evaluate
from marlqa import policy as P

cfg = T.RunConfig(pretrain_epochs=20, vanilla_epochs=3)
sp = T.prepare_data(cfg)
print(f"train {len(sp.train)}, annotated {len(sp.annotated)}, RL {len(sp.unannotated)}, "
      f"test {len(sp.test)} questions")

theta0 = P.init_params(cfg.policy_config(len(sp.train.vocab)), T.derive_rng(cfg.seed, "theta-init"))
env = Environment(sp.test.kb)
print(f"\nrandom programmer, test micro F1 {evaluate(theta0, sp.test, env).micro_f1:.3f}")

theta = T.pretrain(sp.annotated, theta0, cfg, sp.valid)
print(f"after pretraining     test micro F1 {evaluate(theta, sp.test, env).micro_f1:.3f}")

theta = T.vanilla_rl(theta, sp.unannotated, cfg, sp.valid)
report = evaluate(theta, sp.test, env)
print(f"after vanilla RL      test micro F1 {report.micro_f1:.3f}\n")
print(report.table())

print("\nA few decoded programs:")
for row in report.per_question[:5]:
    print(f"  {row['category']:<22} F1 {row['score']:.2f}  {' '.join(row['program'])}")
