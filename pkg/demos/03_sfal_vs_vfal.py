"""Uniform averaging against alpha-slack averaging on one-class clients.

With a = 0 every client sees a single label. The slack rule up-weights the
clients whose local adversarial loss is lowest; the printout shows alpha and
m_tilde per round, and the final gap and test robust accuracy of both runs.
A smaller gap here partly reflects a weaker model, so read both columns.
"""
import math

from falsim.config import parse_config
from falsim.experiment import run_seed

base = parse_config().with_overrides(**{"data.a": 0.0, "training.T": 20, "training.eval_every": 5})
for algo in ("vfal", "sfal"):
    res = run_seed(base.with_overrides(algo=algo), seed=1)
    print(f"== {algo}")
    for rec in res.history:
        if not math.isnan(rec.acc_gap):
            print(f"  round {rec.t:2d} alpha={rec.alpha:.3f} m_tilde={rec.m_tilde:.2f} "
                  f"train_acc={rec.train_robust_acc:.3f} test_acc={rec.test_robust_acc:.3f} gap={rec.acc_gap:.4f}")
