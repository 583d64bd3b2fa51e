"""Inner maximisation by projected gradient ascent on the input."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import RngStream, lp_norm, project_lp, sample_unit_ball
from .models import ModelSpec, backprop, group_forward

# dataset-level evaluation works in fixed-size chunks so results never depend
# on how the caller splits the work
EVAL_CHUNK = 4096


class AttackError(FloatingPointError):
    def __init__(self, step: int, message: str = "non-finite input gradient"):
        super().__init__(f"{message} at PGD step {step}")
        self.step = step


@dataclass(frozen=True)
class AttackConfig:
    """PGD attack: radius ``rho`` in the ``p`` norm, ``steps`` ascent steps.

    ``step_size`` defaults to ``rho / 4``. With ``monotone=True`` the
    best-loss iterate (including the starting point) is returned instead of
    the last one.
    """

    rho: float = 0.0
    p: str = "inf"
    steps: int = 10
    step_size: float | None = None
    init: str = "zero"
    monotone: bool = True

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError(f"rho must be nonnegative, got {self.rho}")
        p = self.p
        if p in (2, 2.0, "2"):
            object.__setattr__(self, "p", "2")
        elif p in ("inf", np.inf, float("inf")):
            object.__setattr__(self, "p", "inf")
        else:
            raise ValueError(f"unsupported attack norm p={p!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.rho > 0 and not self.step_size > 0:
            raise ValueError("step_size must be positive when rho > 0")
        if self.init not in ("zero", "random_in_ball"):
            raise ValueError(f"unknown init {self.init!r}")

    @property
    def alpha(self) -> float:
        return self.rho / 4.0 if self.step_size is None else float(self.step_size)

    @property
    def norm(self):
        return np.inf if self.p == "inf" else 2

    def to_dict(self) -> dict:
        return asdict(self)


def _random_start(cfg: AttackConfig, X: np.ndarray, rng) -> np.ndarray:
    """Uniform start inside the ball; ``rng`` is one stream or one per group."""
    if rng is None:
        raise ValueError("random_in_ball initialisation needs an rng stream")
    streams = rng if isinstance(rng, (list, tuple)) else None
    if streams is not None and len(streams) != X.shape[0]:
        raise ValueError("need one rng stream per parameter group")

    def draw(stream, shape):
        if cfg.p == "inf":
            return stream.uniform(-cfg.rho, cfg.rho, size=shape)
        flat = sample_unit_ball(shape[-1], stream, size=int(np.prod(shape[:-1])))
        return cfg.rho * flat.reshape(shape)

    if streams is None:
        delta = draw(rng, X.shape)
    else:
        delta = np.stack([draw(s, X.shape[1:]) for s in streams])
    return project_lp(X + delta, X, cfg.rho, cfg.norm)


def pgd(cfg: AttackConfig, spec: ModelSpec, P: np.ndarray, X: np.ndarray, Y: np.ndarray,
        rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Grouped PGD. ``P`` is (G, p), ``X`` is (G, B, d), ``Y`` is (G, B).

    ``rng`` (one stream, or a list with one stream per group) is only used
    for random initialisation. Returns the adversarial inputs and the loss at
    each of them.
    """
    if cfg.rho == 0:
        losses, _, _ = backprop(spec, P, X, Y, need_params=False)
        return X.copy(), losses
    cur = X.copy() if cfg.init == "zero" else _random_start(cfg, X, rng)
    best_x = cur
    best_l = None
    for step in range(cfg.steps):
        losses, _, g = backprop(spec, P, cur, Y, need_params=False)
        if not np.all(np.isfinite(g)):
            raise AttackError(step)
        if best_l is None:
            best_l = losses
        elif cfg.monotone:
            up = losses > best_l
            best_l = np.where(up, losses, best_l)
            best_x = np.where(up[..., None], cur, best_x)
        if cfg.p == "inf":
            direction = np.sign(g)
        else:
            gn = np.sqrt(np.sum(g * g, axis=-1, keepdims=True))
            direction = np.where(gn > 0, g / np.where(gn > 0, gn, 1.0), 0.0)
        cur = project_lp(cur + cfg.alpha * direction, X, cfg.rho, cfg.norm)
    losses, _, _ = backprop(spec, P, cur, Y, need_params=False)
    if not cfg.monotone:
        return cur, losses
    up = losses > best_l
    return np.where(up[..., None], cur, best_x), np.where(up, losses, best_l)


def attack(cfg: AttackConfig, spec: ModelSpec, params, x, y, rng: RngStream | None = None) -> np.ndarray:
    """Adversarial input(s) ``x + delta`` with ``||delta||_p <= rho``.

    ``x`` may be a single input or a (n, d) batch; ``y`` matches.
    """
    params = np.asarray(params, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None] if single else x
    if X.shape[-1] != spec.input_dim:
        raise ValueError(f"input dimension mismatch: {x.shape} vs input_dim={spec.input_dim}")
    Y = np.broadcast_to(np.asarray(y), (X.shape[0],))
    Y = Y.astype(np.int64) if spec.is_classifier else Y.astype(np.float64)
    xa, _ = pgd(cfg, spec, params[None], X[None], Y[None], rng)
    return xa[0, 0] if single else xa[0]


def _xy(dataset):
    if hasattr(dataset, "X"):
        return np.asarray(dataset.X, dtype=np.float64), np.asarray(dataset.y)
    X, y = dataset
    return np.asarray(X, dtype=np.float64), np.asarray(y)


def adversarial_examples(cfg: AttackConfig, spec: ModelSpec, params, dataset,
                         rng: RngStream | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Attack every sample of a dataset; returns (X_adv, losses at X_adv)."""
    X, y = _xy(dataset)
    if X.shape[0] == 0:
        raise ValueError("dataset is empty")
    params = np.asarray(params, dtype=np.float64)
    Y = y.astype(np.int64) if spec.is_classifier else y.astype(np.float64)
    out_x = np.empty_like(X)
    out_l = np.empty(X.shape[0])
    for c, start in enumerate(range(0, X.shape[0], EVAL_CHUNK)):
        sl = slice(start, start + EVAL_CHUNK)
        sub_rng = rng.child("chunk", c) if rng is not None else None
        xa, la = pgd(cfg, spec, params[None], X[sl][None], Y[sl][None], sub_rng)
        out_x[sl] = xa[0]
        out_l[sl] = la[0]
    return out_x, out_l


def robust_loss(cfg: AttackConfig, spec: ModelSpec, params, dataset, rng: RngStream | None = None) -> float:
    """Mean loss at the attacked inputs."""
    _, losses = adversarial_examples(cfg, spec, params, dataset, rng)
    return float(np.mean(losses))


def robust_accuracy(cfg: AttackConfig, spec: ModelSpec, params, dataset, rng: RngStream | None = None) -> float:
    """Fraction of attacked inputs still classified correctly."""
    if not spec.is_classifier:
        raise ValueError("robust accuracy needs a classification spec")
    stats = robust_metrics(cfg, spec, params, dataset, rng)
    return stats["acc"]


def robust_metrics(cfg: AttackConfig, spec: ModelSpec, params, dataset, rng: RngStream | None = None) -> dict:
    """Robust loss and (for classifiers) robust accuracy from one attack pass."""
    X, y = _xy(dataset)
    xa, losses = adversarial_examples(cfg, spec, params, (X, y), rng)
    out = {"loss": float(np.mean(losses)), "acc": float("nan")}
    if spec.is_classifier:
        logits = group_forward(spec, np.asarray(params, dtype=np.float64)[None], xa[None])[0]
        out["acc"] = float(np.mean(np.argmax(logits, axis=-1) == y.astype(np.int64)))
    return out


def perturbation_norms(cfg: AttackConfig, X: np.ndarray, X_adv: np.ndarray) -> np.ndarray:
    return lp_norm(X_adv - X, cfg.norm)
