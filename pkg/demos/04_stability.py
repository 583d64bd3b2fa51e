"""Replace-one stability of federated adversarial training.

Swaps single training points on client 0 for fresh draws, retrains with
coupled randomness and reports the largest mean change in robust loss.
The null run keeps the original points, so every pair of runs must be
bitwise identical and the estimate exactly zero. The worst-case bound grows
with the number of rounds; the measured estimate need not, and at this small
budget (3 seeds, 2 indices, 2 resamples) it shrinks as training settles.
"""
from falsim.config import parse_config
from falsim.experiment import run_stability

cfg = parse_config().with_overrides(seeds=[1, 2, 3])
null = run_stability(cfg.with_overrides(**{"training.T": 3}), J=2, R=1, replace=False)
print(f"null test: eps_hat={null.epsilon_hat} identical={all(d['identical_params'] for d in null.deltas)}")
for T in (2, 5, 10, 20):
    est = run_stability(cfg.with_overrides(**{"training.T": T}), J=2, R=2)
    print(f"T={T:<3} eps_hat={est.epsilon_hat:.5f}")
