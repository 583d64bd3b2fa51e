"""Local client trainers: surrogate (SSA), randomized (RSA) and
over-parameterized (OPSA) smoothing of the adversarial loss.

Each trainer is a function computing an update direction for a stack of
parameter vectors (one per client, see :func:`falsim.models.backprop`), so a
round loop can swap strategies freely. Single-step helpers
``local_update_*`` wrap them for one parameter vector and one batch.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .adversary import AttackConfig, pgd
from .core import RngStream, sample_unit_ball
from .models import ModelSpec, WidthCheck, backprop, param_dim

METHODS = ("ssa", "rsa", "opsa")
SCHEDULES = ("paper_fixed", "inv_t", "opsa_const")


@dataclass(frozen=True)
class SmoothingConfig:
    method: str = "ssa"
    gamma: float = 0.0
    Q: int = 1
    schedule: str = "paper_fixed"
    eta0: float = 0.01
    K: int = 3
    batch_size: int = 32
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown smoothing method {self.method!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.K < 1:
            raise ValueError("K (local epochs) must be >= 1")
        if self.Q < 1:
            raise ValueError("Q must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.method == "rsa" and not self.gamma > 0:
            raise ValueError("rsa needs gamma > 0")
        if not self.eta0 > 0:
            raise ValueError("eta0 must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "paper_fixed"
    eta0: float = 0.01
    K: int = 3
    zeta_theta: float | None = None

    @classmethod
    def from_config(cls, cfg: SmoothingConfig, zeta_theta: float | None = None) -> "LrSchedule":
        return cls(cfg.schedule, cfg.eta0, cfg.K, zeta_theta)


def eta_at(schedule: LrSchedule, t: int, m_tilde: float | None = None, m: int | None = None) -> float:
    """Step size at round ``t``.

    ``paper_fixed`` keeps ``eta0``; ``inv_t`` decays as ``eta0/(t+1)``;
    ``opsa_const`` caps ``eta0`` at ``1/(6 K zeta_theta)`` when the constant
    is known. Passing ``m_tilde`` and ``m`` (slack aggregation) rescales by
    ``m_tilde/m``.
    """
    if t < 0:
        raise ValueError("round index must be nonnegative")
    if schedule.kind == "paper_fixed":
        eta = schedule.eta0
    elif schedule.kind == "inv_t":
        eta = schedule.eta0 / (t + 1)
    elif schedule.kind == "opsa_const":
        eta = schedule.eta0
        if schedule.zeta_theta is not None and schedule.zeta_theta > 0:
            eta = min(eta, 1.0 / (6.0 * schedule.K * schedule.zeta_theta))
    else:
        raise ValueError(f"unknown schedule {schedule.kind!r}")
    if m_tilde is not None:
        if not m:
            raise ValueError("slack rescaling needs the client count m")
        eta = eta * (m_tilde / m)
    return eta


# ---------------------------------------------------------------- directions

def _streams(rngs, purpose: str):
    if rngs is None:
        return None
    return [r.child(purpose) for r in rngs]


def ssa_direction(spec: ModelSpec, P, X, Y, W, attack_cfg: AttackConfig, cfg: SmoothingConfig, rngs=None):
    """Gradient of the surrogate max-loss: attack each sample, then take the
    parameter gradient at the adversarial points (Danskin).

    Returns (grad (G, p), per-sample adversarial losses (G, B), X_adv).
    """
    Xa, _ = pgd(attack_cfg, spec, P, X, Y, _streams(rngs, "attack-init"))
    losses, g, _ = backprop(spec, P, Xa, Y, W)
    return g, losses, Xa


def opsa_direction(spec: ModelSpec, P, X, Y, W, attack_cfg: AttackConfig, cfg: SmoothingConfig, rngs=None):
    """Plain adversarial SGD direction; same rule as SSA, used in the wide
    shallow-network regime."""
    if spec.kind == "mlp" and len(spec.hidden) != 1:
        raise ValueError("opsa needs a shallow network (shallow_net or a one-hidden-layer mlp)")
    return ssa_direction(spec, P, X, Y, W, attack_cfg, cfg, rngs)


def rsa_noise(dim: int, Q: int, rng: RngStream) -> np.ndarray:
    """``Q`` uniform draws from the unit l2 ball in parameter space."""
    return sample_unit_ball(dim, rng, size=Q)


def rsa_direction(spec: ModelSpec, P, X, Y, W, attack_cfg: AttackConfig, cfg: SmoothingConfig, rngs=None):
    """Average adversarial gradient over ``Q`` parameter perturbations
    ``theta + gamma * u_q``; every perturbed copy runs its own attack."""
    G, B, d = X.shape
    Q = cfg.Q
    if cfg.gamma == 0:
        return ssa_direction(spec, P, X, Y, W, attack_cfg, cfg, rngs)
    if rngs is None:
        raise ValueError("rsa needs one rng stream per parameter group")
    p = P.shape[1]
    U = np.stack([rsa_noise(p, Q, r.child("rsa-noise")) for r in rngs])  # (G, Q, p)
    Pq = (P[:, None, :] + cfg.gamma * U).reshape(G * Q, p)
    Xq = np.repeat(X, Q, axis=0)
    Yq = np.repeat(Y, Q, axis=0)
    Wq = np.repeat(W, Q, axis=0)
    init = None
    if attack_cfg.init != "zero":
        init = [r.child("attack-init", q) for r in rngs for q in range(Q)]
    Xa, _ = pgd(attack_cfg, spec, Pq, Xq, Yq, init)
    losses, g, _ = backprop(spec, Pq, Xa, Yq, Wq)
    grad = g.reshape(G, Q, p).mean(axis=1)
    return grad, losses.reshape(G, Q, B).mean(axis=1), Xa.reshape(G, Q, B, d)[:, 0]


TRAINERS: dict[str, Callable] = {
    "ssa": ssa_direction,
    "rsa": rsa_direction,
    "opsa": opsa_direction,
}


# ---------------------------------------------------------------- optimizer

class SGD:
    """SGD with optional heavy-ball momentum and L2 weight decay, applied to
    a stack of parameter vectors. Buffers follow the torch convention (the
    first step initialises the buffer with the raw gradient)."""

    def __init__(self, momentum: float = 0.0, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = None

    def step(self, P: np.ndarray, grad: np.ndarray, eta: float, active: np.ndarray | None = None) -> np.ndarray:
        g = grad + self.weight_decay * P if self.weight_decay else grad
        if self.momentum:
            if self.buf is None:
                self.buf = g.copy()
            elif active is None:
                self.buf = self.momentum * self.buf + g
            else:
                self.buf = np.where(active[:, None], self.momentum * self.buf + g, self.buf)
            g = self.buf
        new = P - eta * g
        if active is not None:
            new = np.where(active[:, None], new, P)
        return new


# ---------------------------------------------------------------- single step API

def _single(spec: ModelSpec, params, batch):
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (param_dim(spec),):
        raise ValueError("params length does not match spec")
    X, y = batch
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("batch is empty")
    y = np.broadcast_to(np.asarray(y), (X.shape[0],))
    y = y.astype(np.int64) if spec.is_classifier else y.astype(np.float64)
    W = np.full((1, X.shape[0]), 1.0 / X.shape[0])
    return params, X[None], y[None], W


def local_update_ssa(spec: ModelSpec, params, batch, attack_cfg: AttackConfig, eta_t: float,
                     rng: RngStream | None = None) -> np.ndarray:
    """One descent step on the surrogate adversarial loss."""
    P, X, Y, W = _single(spec, params, batch)
    g, _, _ = ssa_direction(spec, P[None], X, Y, W, attack_cfg, SmoothingConfig(), [rng] if rng else None)
    return P - eta_t * g[0]


def local_update_rsa(spec: ModelSpec, params, batch, attack_cfg: AttackConfig, gamma: float, Q: int,
                     eta_t: float, rng: RngStream | None = None) -> np.ndarray:
    """One descent step on the randomly smoothed adversarial loss."""
    P, X, Y, W = _single(spec, params, batch)
    if gamma == 0:
        cfg = SmoothingConfig(method="ssa", Q=Q)
    else:
        cfg = SmoothingConfig(method="rsa", gamma=gamma, Q=Q)
    g, _, _ = rsa_direction(spec, P[None], X, Y, W, attack_cfg, cfg, [rng] if rng else None)
    return P - eta_t * g[0]


def local_update_opsa(spec: ModelSpec, params, batch, attack_cfg: AttackConfig, eta_t: float,
                      rng: RngStream | None = None, width_check: WidthCheck | None = None) -> np.ndarray:
    """One plain adversarial SGD step for the wide shallow network.

    Warns (without blocking) when ``width_check`` says the network is too
    narrow for the smoothness constants to hold.
    """
    if width_check is not None and not width_check.satisfied:
        warnings.warn(
            f"width below required_s={width_check.required_s:.4g}; OPSA smoothness is not guaranteed",
            RuntimeWarning,
            stacklevel=2,
        )
    P, X, Y, W = _single(spec, params, batch)
    g, _, _ = opsa_direction(spec, P[None], X, Y, W, attack_cfg, SmoothingConfig(method="opsa"),
                             [rng] if rng else None)
    return P - eta_t * g[0]


def rsa_gradient(spec: ModelSpec, params, batch, attack_cfg: AttackConfig, gamma: float, Q: int,
                 rng: RngStream) -> np.ndarray:
    """The Q-sample randomized-smoothing gradient estimate itself."""
    P, X, Y, W = _single(spec, params, batch)
    g, _, _ = rsa_direction(spec, P[None], X, Y, W, attack_cfg,
                            SmoothingConfig(method="rsa", gamma=gamma, Q=Q), [rng])
    return g[0]
