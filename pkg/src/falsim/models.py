"""Differentiable models with hand-written gradients.

Two model kinds are supported:

``shallow_net``
    ``f(x) = sum_tau mu_tau * phi(<w_tau, x>)`` with fixed output weights
    ``mu_tau = +-1/sqrt(s)`` and squared loss ``0.5 * (f(x) - y)**2``.
    The trainable parameters are the rows ``w_tau``.

``mlp``
    Fully connected network with ``phi`` on every hidden layer, linear
    logits and softmax cross-entropy.

Canonical flattening order (version 1): shallow_net stores ``W`` row-major
(tau-major, then input coordinate). mlp stores, layer by layer, the weight
matrix of shape ``(fan_out, fan_in)`` row-major followed by its bias.

All heavy lifting happens in :func:`backprop`, which works on *groups*:
``G`` independent parameter vectors ``P[g]`` each paired with its own batch
``X[g]``. Federated clients and randomized-smoothing perturbations are
evaluated in one call this way.
"""
from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import RngStream, project_lp

FLATTEN_ORDER_VERSION = 1

_KINDS = ("shallow_net", "mlp")
_ACTIVATIONS = ("tanh", "sigmoid", "identity")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    width: int = 64
    hidden: tuple[int, ...] = (32,)
    n_classes: int = 2
    activation: str = "tanh"
    mu_signs: str = "alternating"
    mu_seed: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.kind == "shallow_net" and self.width < 1:
            raise ValueError("width must be positive")
        if self.kind == "mlp":
            object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
            if self.n_classes < 2:
                raise ValueError("mlp needs n_classes >= 2")
            if any(h < 1 for h in self.hidden):
                raise ValueError("hidden layer sizes must be positive")
        if self.mu_signs not in ("alternating", "random"):
            raise ValueError(f"unknown mu_signs {self.mu_signs!r}")

    @property
    def output(self) -> str:
        return "scalar_regression" if self.kind == "shallow_net" else "k_class_logits"

    @property
    def is_classifier(self) -> bool:
        return self.kind == "mlp"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass(frozen=True)
class SmoothnessConstants:
    B_phi: float
    B_phi_prime: float
    B_phi_doubleprime: float
    C_x: float
    C_y: float
    C_W: float
    C_0: float
    zeta_theta: float
    zeta_x: float
    b_prime: float
    H_K: float


# ---------------------------------------------------------------- activations

def _act(name: str, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return phi(z) and phi'(z)."""
    if name == "tanh":
        a = np.tanh(z)
        return a, 1.0 - a * a
    if name == "sigmoid":
        a = 0.5 * (1.0 + np.tanh(0.5 * z))
        return a, a * (1.0 - a)
    return z, np.ones_like(z)


def activation_second(name: str, z):
    z = np.asarray(z, dtype=np.float64)
    if name == "tanh":
        a = np.tanh(z)
        return -2.0 * a * (1.0 - a * a)
    if name == "sigmoid":
        a = 0.5 * (1.0 + np.tanh(0.5 * z))
        return a * (1.0 - a) * (1.0 - 2.0 * a)
    return np.zeros_like(z)


def activation_bounds(name: str) -> tuple[float, float, float]:
    """Sup-norm bounds (B_phi, B_phi', B_phi'') of a bounded activation."""
    if name == "tanh":
        return 1.0, 1.0, 4.0 / (3.0 * math.sqrt(3.0))
    if name == "sigmoid":
        return 1.0, 0.25, 1.0 / (6.0 * math.sqrt(3.0))
    raise ValueError(f"activation {name!r} is unbounded; smoothness constants undefined")


# ---------------------------------------------------------------- layout

def _mlp_sizes(spec: ModelSpec) -> list[int]:
    return [spec.input_dim, *spec.hidden, spec.n_classes]


def param_dim(spec: ModelSpec) -> int:
    if spec.kind == "shallow_net":
        return spec.width * spec.input_dim
    sizes = _mlp_sizes(spec)
    return sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))


def mu_vector(spec: ModelSpec) -> np.ndarray:
    """Fixed output weights of the shallow net, each of magnitude 1/sqrt(s)."""
    s = spec.width
    mag = 1.0 / math.sqrt(s)
    if spec.mu_signs == "alternating":
        signs = np.where(np.arange(s) % 2 == 0, 1.0, -1.0)
    else:
        signs = RngStream(spec.mu_seed, "mu-signs").choice([-1.0, 1.0], size=s)
    return signs * mag


def _split_mlp(spec: ModelSpec, P: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """View a (G, p) parameter stack as per-layer (G, out, in) and (G, out) blocks."""
    sizes = _mlp_sizes(spec)
    layers = []
    pos = 0
    G = P.shape[0]
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = P[:, pos:pos + fan_out * fan_in].reshape(G, fan_out, fan_in)
        pos += fan_out * fan_in
        b = P[:, pos:pos + fan_out]
        pos += fan_out
        layers.append((W, b))
    return layers


def init_params(spec: ModelSpec, rng: RngStream, C_W: float | None = None) -> np.ndarray:
    """Gaussian init with std 1/sqrt(fan_in); biases zero.

    For the shallow net each row ``w_tau`` is optionally projected onto the
    l2 ball of radius ``C_W``.
    """
    if spec.kind == "shallow_net":
        W = rng.normal(scale=1.0 / math.sqrt(spec.input_dim), size=(spec.width, spec.input_dim))
        if C_W is not None:
            W = project_lp(W, np.zeros(spec.input_dim), C_W, 2)
        return W.reshape(-1)
    parts = []
    sizes = _mlp_sizes(spec)
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        parts.append(rng.normal(scale=1.0 / math.sqrt(fan_in), size=fan_out * fan_in))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def project_weights(spec: ModelSpec, params: np.ndarray, C_W: float) -> np.ndarray:
    """Project every shallow-net row onto ``||w_tau||_2 <= C_W``."""
    if spec.kind != "shallow_net":
        raise ValueError("weight-domain projection is defined for shallow_net only")
    shape = params.shape[:-1] + (spec.width, spec.input_dim)
    W = project_lp(params.reshape(shape), np.zeros(spec.input_dim), C_W, 2)
    return W.reshape(params.shape)


def row_norm_stats(spec: ModelSpec, params: np.ndarray) -> dict:
    if spec.kind != "shallow_net":
        raise ValueError("row norms are reported for shallow_net only")
    norms = np.linalg.norm(params.reshape(spec.width, spec.input_dim), axis=1)
    return {"min": float(norms.min()), "mean": float(norms.mean()), "max": float(norms.max())}


# ---------------------------------------------------------------- grouped core

def _check_label(spec: ModelSpec, Y: np.ndarray):
    if spec.is_classifier:
        if np.any(Y < 0) or np.any(Y >= spec.n_classes):
            raise ValueError(f"class index out of range [0, {spec.n_classes})")


def group_forward(spec: ModelSpec, P: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Predictions for P (G, p) and X (G, B, d): (G, B) or (G, B, k)."""
    if spec.kind == "shallow_net":
        W = P.reshape(P.shape[0], spec.width, spec.input_dim)
        a, _ = _act(spec.activation, X @ W.transpose(0, 2, 1))
        return a @ mu_vector(spec)
    a = X
    layers = _split_mlp(spec, P)
    for li, (W, b) in enumerate(layers):
        z = a @ W.transpose(0, 2, 1) + b[:, None, :]
        a = z if li == len(layers) - 1 else _act(spec.activation, z)[0]
    return a


def backprop(spec: ModelSpec, P: np.ndarray, X: np.ndarray, Y: np.ndarray,
             weights: np.ndarray | None = None, need_params: bool = True):
    """Losses and gradients for a stack of parameter vectors.

    Parameters
    ----------
    P : (G, p) parameters, one row per group.
    X : (G, B, d) inputs.
    Y : (G, B) targets (class indices for mlp, reals for shallow_net).
    weights : (G, B) per-sample weights for the parameter gradient; the
        returned parameter gradient is ``sum_b weights[g, b] * dl_gb/dtheta``.
        Defaults to the batch mean.
    need_params : skip the parameter gradient (used inside attacks).

    Returns
    -------
    losses (G, B), grad_P (G, p) or None, grad_X (G, B, d). ``grad_X`` holds
    the unweighted per-sample input gradients.
    """
    G, B, _ = X.shape
    if weights is None:
        weights = np.full((G, B), 1.0 / B)
    if spec.kind == "shallow_net":
        mu = mu_vector(spec)
        W = P.reshape(G, spec.width, spec.input_dim)
        z = X @ W.transpose(0, 2, 1)
        a, da = _act(spec.activation, z)
        f = a @ mu
        r = f - Y
        losses = 0.5 * r * r
        dz = (r[..., None] * mu) * da  # (G, B, s)
        grad_X = dz @ W
        grad_P = None
        if need_params:
            grad_P = ((dz * weights[..., None]).transpose(0, 2, 1) @ X).reshape(G, -1)
        return losses, grad_P, grad_X

    Yi = Y.astype(np.int64)
    _check_label(spec, Yi)
    layers = _split_mlp(spec, P)
    acts = [X]
    dacts = []
    a = X
    for li, (W, b) in enumerate(layers):
        z = a @ W.transpose(0, 2, 1) + b[:, None, :]
        if li == len(layers) - 1:
            a = z
        else:
            a, d = _act(spec.activation, z)
            dacts.append(d)
        acts.append(a)
    logits = acts[-1]
    zmax = logits.max(axis=-1, keepdims=True)
    ez = np.exp(logits - zmax)
    sez = ez.sum(axis=-1, keepdims=True)
    logp = logits - zmax - np.log(sez)
    losses = -np.take_along_axis(logp, Yi[..., None], axis=-1)[..., 0]
    dz = ez / sez
    np.put_along_axis(dz, Yi[..., None], np.take_along_axis(dz, Yi[..., None], axis=-1) - 1.0, axis=-1)

    grads = []
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        if need_params:
            wdz = dz * weights[..., None]
            grads.append((wdz.sum(axis=1), (wdz.transpose(0, 2, 1) @ acts[li]).reshape(G, -1)))
        da = dz @ W
        if li > 0:
            dz = da * dacts[li - 1]
    grad_X = da
    grad_P = None
    if need_params:
        parts = []
        for gb, gW in reversed(grads):
            parts.append(gW)
            parts.append(gb)
        grad_P = np.concatenate(parts, axis=1)
    return losses, grad_P, grad_X


# ---------------------------------------------------------------- single-model API

def _prep(spec: ModelSpec, params, x):
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (param_dim(spec),):
        raise ValueError(f"params length {params.shape} does not match spec ({param_dim(spec)},)")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"input dimension mismatch: got {x.shape}, expected input_dim={spec.input_dim}")
    return params, X, single


def _prep_y(spec: ModelSpec, y, n: int) -> np.ndarray:
    y = np.asarray(y)
    Y = np.broadcast_to(y, (n,)) if y.ndim == 0 else y
    if Y.shape != (n,):
        raise ValueError("label count does not match number of inputs")
    if spec.is_classifier:
        if not np.all(np.asarray(Y) == np.round(Y)):
            raise ValueError("classification labels must be integers")
        Y = Y.astype(np.int64)
        _check_label(spec, Y)
        return Y
    return Y.astype(np.float64)


def forward(spec: ModelSpec, params, x):
    """Prediction for one input (scalar or logits) or a batch of inputs."""
    params, X, single = _prep(spec, params, x)
    out = group_forward(spec, params[None], X[None])[0]
    return out[0] if single else out


def predict_class(spec: ModelSpec, params, x):
    """Argmax class; ties resolve to the lowest class index."""
    if not spec.is_classifier:
        raise ValueError("class prediction needs a classification spec")
    return np.argmax(forward(spec, params, x), axis=-1)


def loss(spec: ModelSpec, params, x, y):
    """Per-sample loss; a float for a single input."""
    params, X, single = _prep(spec, params, x)
    Y = _prep_y(spec, y, X.shape[0])
    losses, _, _ = backprop(spec, params[None], X[None], Y[None], need_params=False)
    return float(losses[0, 0]) if single else losses[0]


def grad_params(spec: ModelSpec, params, x, y) -> np.ndarray:
    """Gradient of the (batch-mean) loss with respect to the flat parameters."""
    params, X, _ = _prep(spec, params, x)
    Y = _prep_y(spec, y, X.shape[0])
    _, gP, _ = backprop(spec, params[None], X[None], Y[None])
    return gP[0]


def grad_input(spec: ModelSpec, params, x, y) -> np.ndarray:
    """Per-sample gradient of the loss with respect to the input."""
    params, X, single = _prep(spec, params, x)
    Y = _prep_y(spec, y, X.shape[0])
    _, _, gX = backprop(spec, params[None], X[None], Y[None], need_params=False)
    return gX[0, 0] if single else gX[0]


# ---------------------------------------------------------------- theory constants

def compute_constants(spec: ModelSpec, rho: float, K: int, eta: float, C_0: float,
                      C_x: float, C_y: float, C_W: float = 1.0) -> SmoothnessConstants:
    """Smoothness constants of the adversarial loss of the wide shallow net."""
    if spec.kind != "shallow_net":
        raise NotImplementedError("smoothness constants are only defined for shallow_net")
    if min(rho, K, eta, C_0, C_x, C_y, C_W) < 0:
        raise ValueError("constants inputs must be nonnegative")
    Bp, Bd, Bdd = activation_bounds(spec.activation)
    s = spec.width
    zeta_theta = 2.0 * (C_x ** 2 + rho ** 2) * (Bd ** 2 + Bdd * Bp + Bdd * C_y / math.sqrt(s))
    zeta_x = (C_x + rho) * C_W * Bd ** 2 + (Bd + (C_x + rho) * C_W * Bdd) * (math.sqrt(s) * Bp + C_y)
    b_prime = C_x ** 2 * Bdd * (C_x * Bd + math.sqrt(2.0 * C_0))
    H_K = 2.0 * math.sqrt(K * eta * C_0)
    return SmoothnessConstants(Bp, Bd, Bdd, C_x, C_y, C_W, C_0, zeta_theta, zeta_x, b_prime, H_K)


@dataclass(frozen=True)
class WidthCheck:
    satisfied: bool
    required_s: float


def check_width_condition(constants: SmoothnessConstants, s: float, eta: float, T: int, K: int) -> WidthCheck:
    """Minimum hidden width under which the adversarial loss is smooth.

    ``required_s = 16 eta^2 T^2 K^2 (b' H_K)^2 (1 + 2 eta zeta_theta)^2``.
    ``constants.H_K`` must have been computed with the same ``eta`` and ``K``.
    """
    if s <= 0 or eta < 0 or T < 0 or K < 1:
        raise ValueError("width check needs s > 0, eta >= 0, T >= 0, K >= 1")
    req = (16.0 * eta ** 2 * T ** 2 * K ** 2 * (constants.b_prime * constants.H_K) ** 2
           * (1.0 + 2.0 * eta * constants.zeta_theta) ** 2)
    return WidthCheck(bool(s >= req), float(req))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, spec: ModelSpec, params) -> None:
    """Write ``uint32 header_len | JSON header | float64 little-endian params``."""
    params = np.asarray(params, dtype=np.float64)
    header = json.dumps({
        "spec": spec.to_dict(),
        "dim": int(params.size),
        "order_version": FLATTEN_ORDER_VERSION,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(params.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelSpec, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ValueError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<I", data[:4])
    header = json.loads(data[4:4 + hlen].decode("utf-8"))
    if header.get("order_version") != FLATTEN_ORDER_VERSION:
        raise ValueError(f"{path}: unsupported parameter order version {header.get('order_version')}")
    spec = ModelSpec.from_dict(header["spec"])
    params = np.frombuffer(data[4 + hlen:], dtype="<f8").astype(np.float64)
    if params.size != header["dim"] or params.size != param_dim(spec):
        raise ValueError(f"{path}: parameter count does not match header")
    return spec, params


def warn_if_too_narrow(spec: ModelSpec, check: WidthCheck) -> None:
    if not check.satisfied:
        warnings.warn(
            f"hidden width s={spec.width} is below the required {check.required_s:.4g}; "
            "the smoothness constants do not hold",
            RuntimeWarning,
            stacklevel=2,
        )
