"""Watch PGD push a point to the edge of its perturbation ball.

A one-unit linear net f(x) = x with label y = -1 has squared loss
(x + 1)^2 / 2, which grows with x. Starting at x = 0 with an l_inf radius
of 1, the attack should end at x = 1 with loss 2. The second half attacks a
random classifier on a 2-D toy task and prints how often the label flips.
"""
import numpy as np

from falsim.adversary import AttackConfig, attack, perturbation_norms, robust_accuracy
from falsim.core import RngStream
from falsim.data import make_task
from falsim.models import ModelSpec, init_params, loss, predict_class

linear = ModelSpec("shallow_net", 1, width=1, activation="identity")
for rho in (0.0, 0.25, 0.5, 1.0):
    xa = attack(AttackConfig(rho=rho, p="inf"), linear, [1.0], [0.0], -1.0)
    print(f"rho={rho:<5} x_adv={xa[0]:.3f} loss={float(loss(linear, [1.0], xa, -1.0)):.3f}")

train, _ = make_task(3, 2, 100, 10, 4.0, seed=0)
spec = ModelSpec("mlp", 2, hidden=(16,), n_classes=3)
params = init_params(spec, RngStream(0, "init"))
clean = predict_class(spec, params, train.X)
print()
for p in ("inf", "2"):
    for rho in (0.1, 0.5, 1.0):
        cfg = AttackConfig(rho=rho, p=p)
        xa = attack(cfg, spec, params, train.X, train.y)
        flips = np.mean(predict_class(spec, params, xa) != clean)
        print(f"l_{p:<3} rho={rho:<4} max|delta|={perturbation_norms(cfg, train.X, xa).max():.3f} "
              f"flipped={flips:.2f} robust_acc={robust_accuracy(cfg, spec, params, train):.2f}")
