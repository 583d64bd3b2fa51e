"""Generalization gap, on-average stability, heterogeneity and bound scores."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .adversary import AttackConfig, adversarial_examples, robust_metrics
from .core import RngStream, record_streams
from .data import ClientPartition, Dataset, NeighborSpec, make_neighbor
from .models import ModelSpec, backprop

TV_METHODS = ("label_marginal", "projected_histogram")


# ---------------------------------------------------------------- gap

def generalization_gap(spec: ModelSpec, params, attack_cfg: AttackConfig, train_set, test_set,
                       rng: RngStream | None = None) -> dict:
    """Robust test-minus-train loss and train-minus-test accuracy.

    Both sets are attacked with the same stream, so a set compared with
    itself gives exactly zero.
    """
    tr = robust_metrics(attack_cfg, spec, params, train_set, rng)
    te = robust_metrics(attack_cfg, spec, params, test_set, rng)
    return {
        "loss_gap": te["loss"] - tr["loss"],
        "acc_gap": tr["acc"] - te["acc"],
        "train": tr,
        "test": te,
    }


# ---------------------------------------------------------------- total variation

def _projections(dim: int, n_proj: int) -> np.ndarray:
    # fixed directions: every estimate in a session compares along the same axes
    g = RngStream(0, "tv-projections", dim, n_proj).normal(size=(n_proj, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def estimate_tv(a, b, method: str = "label_marginal", k: int | None = None,
                n_proj: int = 8, bins: int = 32) -> float:
    """Empirical total-variation distance between two samples.

    ``label_marginal`` compares class frequencies of two label arrays.
    ``projected_histogram`` compares two feature arrays through ``n_proj``
    fixed random 1-D projections, each histogrammed into ``bins`` bins over
    the pooled range; the half-L1 distances are averaged. This is a proxy,
    not a consistent estimator of the TV between continuous laws.
    """
    if method not in TV_METHODS:
        raise ValueError(f"unknown TV method {method!r}")
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("TV estimate needs two non-empty samples")
    if method == "label_marginal":
        a = a.astype(np.int64)
        b = b.astype(np.int64)
        if k is None:
            k = int(max(a.max(), b.max())) + 1
        pa = np.bincount(a, minlength=k) / a.size
        pb = np.bincount(b, minlength=k) / b.size
        return float(min(1.0, 0.5 * np.abs(pa - pb).sum()))
    a = np.atleast_2d(a.astype(np.float64))
    b = np.atleast_2d(b.astype(np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature dimensions differ")
    if a.shape == b.shape and np.array_equal(a, b):
        return 0.0
    dirs = _projections(a.shape[1], n_proj)
    pa = a @ dirs.T
    pb = b @ dirs.T
    total = 0.0
    for f in range(n_proj):
        lo = min(pa[:, f].min(), pb[:, f].min())
        hi = max(pa[:, f].max(), pb[:, f].max())
        if hi <= lo:
            continue
        edges = np.linspace(lo, hi, bins + 1)
        ha, _ = np.histogram(pa[:, f], bins=edges)
        hb, _ = np.histogram(pb[:, f], bins=edges)
        total += 0.5 * np.abs(ha / a.shape[0] - hb / b.shape[0]).sum()
    return float(min(1.0, total / n_proj))


@dataclass
class HeterogeneityReport:
    D: list[float]
    D_max: float
    tv_adv_vs_clean: list[float]
    tv_client_vs_pool: list[float]
    tv_pool_adv_vs_clean: float
    method: str

    def to_dict(self) -> dict:
        return asdict(self)


def adversarial_snapshots(spec: ModelSpec, params, attack_cfg: AttackConfig, dataset: Dataset,
                          partitions: list[ClientPartition], rng: RngStream | None = None) -> list[np.ndarray]:
    """Attacked inputs of every client's samples under one model."""
    out = []
    for p in partitions:
        sub_rng = rng.child("client", p.client_id) if rng is not None else None
        xa, _ = adversarial_examples(attack_cfg, spec, params, dataset.subset(p.indices), sub_rng)
        out.append(xa)
    return out


def heterogeneity_report(dataset: Dataset, partitions: list[ClientPartition], adv_inputs: list[np.ndarray],
                         method: str = "projected_histogram") -> HeterogeneityReport:
    """Per-client ``D_i = max(TV(adv_i, clean_i), TV(clean_i, pool), TV(adv_pool, pool))``.

    With ``label_marginal`` only labels are compared, so the two
    adversarial-vs-clean terms vanish (attacks do not change labels).
    """
    if len(adv_inputs) != len(partitions):
        raise ValueError("one adversarial snapshot per client required")
    pool_idx = np.concatenate([p.indices for p in partitions])
    if method == "label_marginal":
        k = dataset.k
        pool = dataset.y[pool_idx]
        client = [dataset.y[p.indices] for p in partitions]
        adv_clean = [estimate_tv(c, c, method, k) for c in client]
        client_pool = [estimate_tv(c, pool, method, k) for c in client]
        pool_adv = estimate_tv(pool, pool, method, k)
    else:
        pool = dataset.X[pool_idx]
        client = [dataset.X[p.indices] for p in partitions]
        adv_clean = [estimate_tv(xa, c, method) for xa, c in zip(adv_inputs, client)]
        client_pool = [estimate_tv(c, pool, method) for c in client]
        pool_adv = estimate_tv(np.concatenate(adv_inputs), pool, method)
    D = [max(u, v, pool_adv) for u, v in zip(adv_clean, client_pool)]
    return HeterogeneityReport(D, float(max(D)), adv_clean, client_pool, float(pool_adv), method)


# ---------------------------------------------------------------- bound scores

@dataclass(frozen=True)
class BoundInputs:
    rho: float
    T: float
    m: float
    n_min: float
    K: float = 3
    Q: float = 1
    s: float = 1
    gamma: float = 0.0
    D_max: float = 0.0
    Delta: float = 1.0
    sigma: float | None = None
    alpha: float = 0.0
    m_hat: float = 1

    def __post_init__(self):
        for name in ("rho", "D_max", "Delta", "gamma", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("T", "m", "n_min", "K", "Q", "s", "m_hat"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.alpha >= 1:
            raise ValueError("alpha must lie in [0, 1)")


def r_alpha(alpha: float, m_hat: float, m: float) -> float:
    return 1.0 + (alpha / (1.0 - alpha)) * (2.0 * m_hat / m)


def bound_score(method: str, algo: str, inputs: BoundInputs) -> float:
    """Leading-order generalization bound expression with every hidden
    constant set to one. Only meaningful for comparisons between settings.

    Natural logarithms throughout. ``sfal`` divides the optimisation and
    heterogeneity terms by ``r_alpha``.
    """
    if algo not in ("vfal", "sfal"):
        raise ValueError(f"unknown algorithm {algo!r}")
    b = inputs
    r = r_alpha(b.alpha, b.m_hat, b.m) if algo == "sfal" else 1.0
    denom = r * b.m * b.n_min
    T = float(b.T)
    logT = math.log(T)
    if method == "ssa":
        return (b.rho * T * logT
                + T * math.sqrt(logT * b.Delta) / denom
                + T * logT * (b.rho + 1.0) * b.D_max / denom)
    if method == "rsa":
        return (T ** 0.25 * logT / math.sqrt(b.Q)
                + T ** 0.75 * math.sqrt(b.Delta) / denom
                + T * ((b.rho + 1.0) * b.D_max) ** (1.0 / 3.0) / denom)
    if method == "opsa":
        return (math.sqrt(T) * math.sqrt(b.Delta) / denom
                + T * (b.rho ** 2 * math.sqrt(b.s) + 1.0) * b.D_max / denom)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------- stability

@dataclass
class StabilityEstimate:
    epsilon_hat: float
    per_index: dict[int, float]
    deltas: list[dict]
    R: int
    J: int
    seeds: list[int]
    client: int
    replaced: bool = True
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_index"] = {str(k): v for k, v in self.per_index.items()}
        return d


Recipe = Callable[[Dataset, list, int], np.ndarray]


def _robust_point_loss(spec: ModelSpec, params, attack_cfg: AttackConfig, x, y) -> float:
    X = np.asarray(x, dtype=np.float64)[None, None]
    Y = np.asarray([[y]], dtype=np.int64 if spec.is_classifier else np.float64)
    from .adversary import pgd
    Xa, _ = pgd(attack_cfg, spec, np.asarray(params)[None], X, Y)
    losses, _, _ = backprop(spec, np.asarray(params)[None], Xa, Y, need_params=False)
    return float(losses[0, 0])


def estimate_stability(recipe: Recipe, spec: ModelSpec, dataset: Dataset, partitions: list[ClientPartition],
                       client: int, J: int = 3, R: int = 3, seeds=(1, 2, 3),
                       attack_cfg: AttackConfig | None = None, replace: bool = True,
                       index_seed: int = 0) -> StabilityEstimate:
    """Monte-Carlo on-average stability of a training recipe.

    ``recipe(dataset, partitions, seed)`` must be deterministic in ``seed``.
    For each of ``J`` sampled positions ``j`` of ``client`` and each of ``R``
    fresh replacements ``z'``, the recipe is run on ``S`` and on the
    neighbour ``S^(i')`` with the same seed (coupled runs) and the change of
    adversarial loss at ``z'`` is recorded. The estimate is the max over
    ``j`` of the mean absolute change over replacements and seeds.

    ``replace=False`` keeps the original sample (null test: the paired runs
    must coincide bit for bit).
    """
    if attack_cfg is None:
        attack_cfg = AttackConfig()
    if not 0 <= client < len(partitions):
        raise IndexError(f"client {client} out of range")
    n_c = partitions[client].n
    J = min(J, n_c)
    idx_rng = RngStream(index_seed, "stability-indices", client)
    positions = sorted(int(j) for j in idx_rng.choice(n_c, size=J, replace=False))
    deltas = []
    per_index: dict[int, list[float]] = {j: [] for j in positions}
    for seed in seeds:
        with record_streams() as base_log:
            base = recipe(dataset, partitions, seed)
        for j in positions:
            for r in range(R):
                orig = partitions[client].indices[j]
                if replace:
                    nb = NeighborSpec(client, j)
                    rng = RngStream(index_seed, "stability-replacement", client, j, r, seed)
                else:
                    nb = NeighborSpec(client, j, (dataset.X[orig], dataset.y[orig]), allow_identical=True)
                    rng = None
                ds2, parts2, (xz, yz) = make_neighbor(dataset, partitions, nb, rng)
                with record_streams() as pair_log:
                    other = recipe(ds2, parts2, seed)
                if pair_log != base_log:
                    raise RuntimeError(f"coupled runs used different rng streams (seed={seed}, j={j}, r={r})")
                l1 = _robust_point_loss(spec, base, attack_cfg, xz, yz)
                l2 = _robust_point_loss(spec, other, attack_cfg, xz, yz)
                delta = abs(l1 - l2)
                per_index[j].append(delta)
                deltas.append({"seed": int(seed), "j": j, "r": r, "delta": delta,
                               "identical_params": bool(np.array_equal(base, other))})
    means = {j: float(np.mean(v)) for j, v in per_index.items()}
    return StabilityEstimate(max(means.values()), means, deltas, R, J, [int(s) for s in seeds], client, replace)
