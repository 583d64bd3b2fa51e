"""Clients, server aggregation rules and the round loop.

Local training of all clients in a round is vectorised: client ``i`` owns row
``i`` of a parameter stack and every random draw it makes comes from a stream
keyed ``(seed, t, i, purpose, ...)``. A client's trajectory therefore does not
depend on the other clients or on execution order.
"""
from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .adversary import AttackConfig, robust_metrics
from .core import RngStream
from .data import ClientPartition, Dataset
from .metrics import estimate_tv
from .models import ModelSpec, backprop
from .smoothing import SGD, TRAINERS, LrSchedule, SmoothingConfig, eta_at

RULES = ("uniform", "alpha_slack", "tv_weighted", "tv_inverse")
ALPHA_MAX = 1.0 - 1e-9
TV_EPS = 1e-6

CSV_COLUMNS = ("round", "t", "alpha", "m_tilde", "train_robust_loss", "test_robust_loss",
               "train_robust_acc", "test_robust_acc", "loss_gap", "acc_gap")


@dataclass
class ClientState:
    id: int
    partition: ClientPartition
    X: np.ndarray
    y: np.ndarray
    last_local_loss: float = float("nan")
    params_snapshot: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]


def make_clients(dataset: Dataset, partitions: list[ClientPartition]) -> list[ClientState]:
    return [ClientState(p.client_id, p, dataset.X[p.indices], dataset.y[p.indices]) for p in partitions]


@dataclass(frozen=True)
class AggregationConfig:
    rule: str = "uniform"
    m_hat: int | None = None
    alpha_mode: str = "auto"
    alpha_fixed: float = 0.0
    penalty_lambda: float = 0.0

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown aggregation rule {self.rule!r}")
        if self.alpha_mode not in ("auto", "fixed"):
            raise ValueError(f"unknown alpha_mode {self.alpha_mode!r}")
        if not 0 <= self.alpha_fixed < 1:
            raise ValueError("alpha must lie in [0, 1)")
        if self.penalty_lambda < 0:
            raise ValueError("penalty_lambda must be nonnegative")
        if self.m_hat is not None and self.m_hat < 1:
            raise ValueError("m_hat must be a positive integer")

    def resolved_m_hat(self, m: int) -> int:
        m_hat = self.m_hat if self.m_hat is not None else max(1, m // 5)
        if m_hat > m // 2:
            raise ValueError(f"m_hat={m_hat} violates m_hat <= m/2 (m={m})")
        return m_hat

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RoundRecord:
    t: int
    alpha: float
    m_tilde: float
    client_losses: list[float]
    sort_order: list[int]
    weights: list[float]
    params_digest: str
    eta: float
    train_robust_loss: float = float("nan")
    test_robust_loss: float = float("nan")
    train_robust_acc: float = float("nan")
    test_robust_acc: float = float("nan")
    loss_gap: float = float("nan")
    acc_gap: float = float("nan")
    client_tv: list[float] | None = None
    extra: dict = field(default_factory=dict)

    def csv_row(self) -> list:
        return [self.t + 1, self.t, self.alpha, self.m_tilde, self.train_robust_loss, self.test_robust_loss,
                self.train_robust_acc, self.test_robust_acc, self.loss_gap, self.acc_gap]

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- aggregation

def compute_alpha(sorted_losses, m_hat: int) -> float:
    """Slack from ascending losses: ``1 - sum(head) / sum(tail)``.

    ``head`` is the ``m_hat`` smallest losses. A value of 1 (zero-loss head)
    is clamped just below 1 with a warning.
    """
    losses = np.asarray(sorted_losses, dtype=np.float64)
    m = losses.size
    if m_hat < 1 or m_hat > m // 2:
        raise ValueError(f"m_hat={m_hat} must satisfy 1 <= m_hat <= m/2 (m={m})")
    if np.any(losses < 0):
        raise ValueError("losses must be nonnegative")
    if np.any(np.diff(losses) < 0):
        raise ValueError("losses must be sorted ascending")
    head = float(np.sum(losses[:m_hat]))
    tail = float(np.sum(losses[m_hat:]))
    if tail == 0:
        raise ZeroDivisionError("all tail losses are zero; alpha is undefined")
    alpha = 1.0 - head / tail
    if alpha > ALPHA_MAX:
        warnings.warn(f"alpha={alpha} clamped to {ALPHA_MAX}", RuntimeWarning, stacklevel=2)
        alpha = ALPHA_MAX
    return max(alpha, 0.0)


def m_tilde(m: int, m_hat: int, alpha: float) -> float:
    # (1+alpha) m_hat + (1-alpha)(m-m_hat), rearranged so m_tilde == m exactly at alpha=0 or m_hat=m/2
    return m - alpha * (m - 2 * m_hat)


def _stack(client_params) -> np.ndarray:
    P = [np.asarray(p, dtype=np.float64) for p in client_params]
    if not P:
        raise ValueError("no client parameters to aggregate")
    if any(p.shape != P[0].shape for p in P):
        raise ValueError("client parameter dimensions differ")
    return np.stack(P)


def weighted_average(client_params, weights) -> np.ndarray:
    """``sum_i w_i theta_i`` accumulated in ascending client order.

    Computed as ``theta_0 + sum_i w_i (theta_i - theta_0)`` (equal for
    weights on the simplex) so identical inputs come back bit-exact.
    """
    P = _stack(client_params)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (P.shape[0],):
        raise ValueError("one weight per client required")
    base = P[0]
    acc = np.zeros_like(base)
    for i in range(P.shape[0]):
        acc += w[i] * (P[i] - base)
    return base + acc


def uniform_weights(m: int) -> np.ndarray:
    return np.full(m, 1.0 / m)


def aggregate_uniform(client_params) -> np.ndarray:
    P = _stack(client_params)
    return weighted_average(P, uniform_weights(P.shape[0]))


def sort_clients(losses) -> list[int]:
    """Client ids by ascending loss; ties keep the lower id first."""
    losses = np.asarray(losses, dtype=np.float64)
    return [int(i) for i in np.argsort(losses, kind="stable")]


def slack_weights(losses, m_hat: int, alpha: float) -> tuple[np.ndarray, float, list[int]]:
    """Weights ``(1+alpha)/m_tilde`` for the ``m_hat`` lowest-loss clients and
    ``(1-alpha)/m_tilde`` for the rest (returned in client-id order)."""
    losses = np.asarray(losses, dtype=np.float64)
    m = losses.size
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    if m_hat < 1 or m_hat > m // 2:
        raise ValueError(f"m_hat={m_hat} must satisfy 1 <= m_hat <= m/2 (m={m})")
    order = sort_clients(losses)
    mt = m_tilde(m, m_hat, alpha)
    w = np.full(m, (1.0 - alpha) / mt)
    w[order[:m_hat]] = (1.0 + alpha) / mt
    return w, mt, order


def aggregate_alpha_slack(client_params, client_losses, m_hat: int, alpha: float):
    """Returns (aggregated params, m_tilde, ascending sort map)."""
    P = _stack(client_params)
    if len(client_losses) != P.shape[0]:
        raise ValueError("one loss per client required")
    w, mt, order = slack_weights(client_losses, m_hat, alpha)
    return weighted_average(P, w), mt, order


def tv_weights(client_tv, inverse: bool = False) -> np.ndarray:
    tv = np.asarray(client_tv, dtype=np.float64)
    if np.any(tv < 0):
        raise ValueError("TV values must be nonnegative")
    if inverse:
        raw = 1.0 / (tv + TV_EPS)
    else:
        if tv.sum() == 0:
            warnings.warn("all client TV values are zero; falling back to uniform weights",
                          RuntimeWarning, stacklevel=2)
            return uniform_weights(tv.size)
        raw = tv
    return raw / raw.sum()


def aggregate_tv_weighted(client_params, client_tv, inverse: bool = False) -> np.ndarray:
    """Average weighted by each client's clean-vs-adversarial drift (or its
    inverse)."""
    P = _stack(client_params)
    if len(client_tv) != P.shape[0]:
        raise ValueError("one TV value per client required")
    return weighted_average(P, tv_weights(client_tv, inverse))


def params_digest(params) -> str:
    return hashlib.sha256(np.asarray(params, dtype="<f8").tobytes()).hexdigest()[:16]


# ---------------------------------------------------------------- federation

@dataclass
class Federation:
    """Everything a run needs besides the current global parameters."""

    spec: ModelSpec
    clients: list[ClientState]
    smoothing: SmoothingConfig
    attack: AttackConfig
    aggregation: AggregationConfig = AggregationConfig()
    algo: str = "vfal"
    seed: int = 0
    train_set: Dataset | None = None
    test_set: Dataset | None = None
    eval_attack: AttackConfig | None = None
    eval_every: int = 1
    zeta_theta: float | None = None

    def __post_init__(self):
        if self.algo not in ("vfal", "sfal"):
            raise ValueError(f"unknown algorithm {self.algo!r}")
        if not self.clients:
            raise ValueError("federation needs at least one client")
        if self.algo == "sfal" and self.aggregation.rule != "alpha_slack":
            raise ValueError("sfal uses the alpha_slack aggregation rule")
        if self.aggregation.rule == "alpha_slack":
            self.aggregation.resolved_m_hat(len(self.clients))

    @property
    def m(self) -> int:
        return len(self.clients)


def _batches(fed: Federation, t: int, k: int, rng: RngStream):
    """Per-step (index matrix, weight matrix, active mask) for epoch ``k``.

    Each client shuffles its own positions; short or missing batches are
    padded with zero-weight entries.
    """
    b = fed.smoothing.batch_size
    perms = [rng.child(t, c.id, "shuffle", k).permutation(c.n) for c in fed.clients]
    n_steps = max(math.ceil(c.n / b) for c in fed.clients)
    for j in range(n_steps):
        idx = np.zeros((fed.m, b), dtype=np.int64)
        cnt = np.zeros(fed.m, dtype=np.int64)
        for i, perm in enumerate(perms):
            chunk = perm[j * b:(j + 1) * b]
            idx[i, :chunk.size] = chunk
            cnt[i] = chunk.size
        mask = np.arange(b)[None, :] < cnt[:, None]
        W = np.where(mask, 1.0 / np.maximum(cnt, 1)[:, None], 0.0)
        yield j, idx, mask, W, cnt > 0


def local_train(fed: Federation, global_params: np.ndarray, t: int, eta: float, rng: RngStream):
    """Run ``K`` local epochs on every client starting from ``global_params``.

    Returns the stacked local parameters, each client's mean adversarial
    loss over its last epoch, and the adversarial inputs of that epoch.
    """
    scfg = fed.smoothing
    trainer = TRAINERS[scfg.method]
    m = fed.m
    d = fed.spec.input_dim
    P = np.repeat(np.asarray(global_params, dtype=np.float64)[None], m, axis=0)
    lam = fed.aggregation.penalty_lambda
    shadow = P.copy() if lam > 0 else None
    opt = SGD(scfg.momentum, scfg.weight_decay)
    need_rng = (scfg.method == "rsa" and scfg.gamma > 0) or fed.attack.init != "zero"
    Xs = [c.X for c in fed.clients]
    ys = [c.y for c in fed.clients]
    last_loss = np.zeros(m)
    last_adv = [np.empty((c.n, d)) for c in fed.clients]
    for k in range(scfg.K):
        last_epoch = k == scfg.K - 1
        for j, idx, mask, W, active in _batches(fed, t, k, rng):
            X = np.stack([Xs[i][idx[i]] for i in range(m)])
            Y = np.stack([ys[i][idx[i]] for i in range(m)])
            rngs = [rng.child(t, c.id, "step", k, j) for c in fed.clients] if need_rng else None
            g, losses, Xa = trainer(fed.spec, P, X, Y, W, fed.attack, scfg, rngs)
            if not np.all(np.isfinite(g)):
                bad = int(np.flatnonzero(~np.all(np.isfinite(g), axis=1))[0])
                raise FloatingPointError(f"client {fed.clients[bad].id}: non-finite gradient at t={t}, epoch {k}")
            if shadow is not None:
                _, g_clean, _ = backprop(fed.spec, shadow, X, Y, W)
                diff = P - shadow
                nrm = np.linalg.norm(diff, axis=1, keepdims=True)
                g = g + lam * np.where(nrm > 0, diff / np.where(nrm > 0, nrm, 1.0), 0.0)
                shadow = np.where(active[:, None], shadow - eta * g_clean, shadow)
            P = opt.step(P, g, eta, active)
            if last_epoch:
                last_loss += np.sum(np.where(mask, losses, 0.0), axis=1)
                for i in range(m):
                    take = idx[i, mask[i]]
                    last_adv[i][take] = Xa[i, mask[i]]
    last_loss /= np.array([c.n for c in fed.clients], dtype=np.float64)
    return P, last_loss, last_adv


def evaluate(fed: Federation, params: np.ndarray, t: int) -> dict:
    """Robust train/test metrics of the global model and their gaps."""
    cfg = fed.eval_attack or fed.attack
    out = {}
    train = fed.train_set
    if train is None:
        train = (np.concatenate([c.X for c in fed.clients]), np.concatenate([c.y for c in fed.clients]))
    rng = RngStream(fed.seed, t, "eval")
    tr = robust_metrics(cfg, fed.spec, params, train, rng.child("train"))
    out["train_robust_loss"] = tr["loss"]
    out["train_robust_acc"] = tr["acc"]
    if fed.test_set is not None:
        te = robust_metrics(cfg, fed.spec, params, fed.test_set, rng.child("test"))
        out["test_robust_loss"] = te["loss"]
        out["test_robust_acc"] = te["acc"]
        out["loss_gap"] = te["loss"] - tr["loss"]
        out["acc_gap"] = tr["acc"] - te["acc"]
    return out


def run_round(fed: Federation, global_params: np.ndarray, t: int,
              prev_m_tilde: float | None = None) -> tuple[np.ndarray, RoundRecord]:
    """One communication round: broadcast, local training, aggregation."""
    if t < 0:
        raise ValueError("round index must be nonnegative")
    rng = RngStream(fed.seed)
    m = fed.m
    schedule = LrSchedule.from_config(fed.smoothing, fed.zeta_theta)
    if fed.algo == "sfal":
        eta = eta_at(schedule, t, prev_m_tilde if prev_m_tilde is not None else float(m), m)
    else:
        eta = eta_at(schedule, t)
    P, losses, adv = local_train(fed, global_params, t, eta, rng)
    agg = fed.aggregation
    alpha, mt, order = 0.0, float(m), sort_clients(losses)
    client_tv = None
    if agg.rule == "uniform":
        w = uniform_weights(m)
    elif agg.rule == "alpha_slack":
        m_hat = agg.resolved_m_hat(m)
        if agg.alpha_mode == "auto":
            alpha = compute_alpha(losses[order], m_hat)
        else:
            alpha = agg.alpha_fixed
        w, mt, order = slack_weights(losses, m_hat, alpha)
    else:
        client_tv = [estimate_tv(adv[i], c.X, "projected_histogram") for i, c in enumerate(fed.clients)]
        w = tv_weights(client_tv, inverse=agg.rule == "tv_inverse")
    new = weighted_average(P, w)
    for i, c in enumerate(fed.clients):
        c.last_local_loss = float(losses[i])
        c.params_snapshot = P[i]
    rec = RoundRecord(
        t=t, alpha=float(alpha), m_tilde=float(mt), client_losses=[float(v) for v in losses],
        sort_order=order, weights=[float(v) for v in w], params_digest=params_digest(new), eta=float(eta),
        client_tv=client_tv,
    )
    if fed.eval_every and ((t + 1) % fed.eval_every == 0):
        _attach_eval(fed, rec, new, t)
    return new, rec


def _attach_eval(fed: Federation, rec: RoundRecord, params: np.ndarray, t: int) -> None:
    for key, val in evaluate(fed, params, t).items():
        setattr(rec, key, val)


def train(fed: Federation, init_params: np.ndarray, T: int) -> tuple[np.ndarray, list[RoundRecord]]:
    """``T`` rounds; returns the final global parameters and the history.

    The last round is always evaluated, whatever ``eval_every`` says.
    """
    if T < 0:
        raise ValueError("T must be nonnegative")
    params = np.asarray(init_params, dtype=np.float64).copy()
    history = []
    prev_mt = None
    for t in range(T):
        params, rec = run_round(fed, params, t, prev_mt)
        prev_mt = rec.m_tilde
        history.append(rec)
    if history and not (fed.eval_every and T % fed.eval_every == 0):
        _attach_eval(fed, history[-1], params, T - 1)
    return params, history
