"""Vector utilities shared by every other module.

Vectors are plain 1-D float64 numpy arrays. Batched helpers accept leading
axes and treat the last axis as the vector coordinates.
"""
from __future__ import annotations

import zlib
from typing import Callable, Hashable

import numpy as np

__all__ = [
    "as_vector",
    "project_lp",
    "lp_norm",
    "RngStream",
    "rng_stream",
    "record_streams",
    "sample_unit_ball",
    "finite_diff_grad",
    "relative_error",
]


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D sequence, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _check_p(p) -> float:
    if p in (2, 2.0):
        return 2.0
    if p in ("inf", np.inf, float("inf")):
        return np.inf
    raise ValueError(f"unsupported norm p={p!r}; expected 2 or 'inf'")


def lp_norm(v: np.ndarray, p) -> np.ndarray:
    """Norm over the last axis."""
    p = _check_p(p)
    v = np.asarray(v, dtype=np.float64)
    if p == np.inf:
        return np.max(np.abs(v), axis=-1)
    return np.sqrt(np.sum(v * v, axis=-1))


def project_lp(v, center, rho: float, p=2) -> np.ndarray:
    """Nearest point to ``v`` inside the ball ``{w : ||w - center||_p <= rho}``.

    Works on single vectors or on stacks (last axis = coordinates). For
    ``p='inf'`` this is a coordinate clamp; for ``p=2`` a radial rescale.
    """
    p = _check_p(p)
    if rho < 0:
        raise ValueError(f"rho must be nonnegative, got {rho}")
    v = np.asarray(v, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if v.shape[-1:] != center.shape[-1:]:
        raise ValueError(f"dimension mismatch: {v.shape} vs {center.shape}")
    if p == np.inf:
        return np.clip(v, center - rho, center + rho)
    diff = v - center
    norm = np.sqrt(np.sum(diff * diff, axis=-1, keepdims=True))
    outside = norm > rho
    scale = np.where(outside, rho / np.where(outside, norm, 1.0), 1.0)
    out = center + diff * scale
    # rounding can leave the rescaled point a few ulps outside; shrink until
    # it is inside so a second projection is a no-op (exact idempotence)
    for _ in range(64):
        d = out - center
        over = outside & (np.sqrt(np.sum(d * d, axis=-1, keepdims=True)) > rho)
        if not np.any(over):
            break
        scale = np.where(over, np.nextafter(scale, 0.0) * (1.0 - 1e-15), scale)
        out = center + diff * scale
    return np.where(outside, out, v)


def _key_int(part: Hashable) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream key integers must be nonnegative, got {part}")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


_recorders: list[list] = []


class record_streams:
    """Context manager collecting ``(seed, key)`` of every stream created.

    Used to verify that two supposedly coupled runs drew from exactly the
    same streams.
    """

    def __enter__(self) -> list:
        self.log: list = []
        _recorders.append(self.log)
        return self.log

    def __exit__(self, *exc):
        _recorders.remove(self.log)
        return False


class RngStream:
    """Seeded random stream addressed by ``(root_seed, stream_key)``.

    Two streams with the same seed and key produce identical draws; distinct
    keys are independent (numpy ``SeedSequence`` spawn keys).
    """

    def __init__(self, root_seed: int, *key: Hashable):
        self.root_seed = int(root_seed)
        self.key = tuple(key)
        for log in _recorders:
            log.append((self.root_seed, self.key))
        ss = np.random.SeedSequence(self.root_seed, spawn_key=tuple(_key_int(k) for k in key))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, *key: Hashable) -> "RngStream":
        return RngStream(self.root_seed, *self.key, *key)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.root_seed}, key={self.key!r})"

    # thin delegation keeps call sites short
    def normal(self, *args, **kwargs):
        return self.generator.normal(*args, **kwargs)

    def uniform(self, *args, **kwargs):
        return self.generator.uniform(*args, **kwargs)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, *args, **kwargs):
        return self.generator.choice(*args, **kwargs)

    def integers(self, *args, **kwargs):
        return self.generator.integers(*args, **kwargs)


def rng_stream(seed: int, *key: Hashable) -> RngStream:
    return RngStream(seed, *key)


def sample_unit_ball(dim: int, rng: RngStream, size: int | None = None) -> np.ndarray:
    """Uniform draw(s) from the unit l2 ball in ``dim`` dimensions.

    Gaussian direction, normalised, scaled by ``U**(1/dim)``.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    shape = (dim,) if size is None else (size, dim)
    g = rng.normal(size=shape)
    norm = np.sqrt(np.sum(g * g, axis=-1, keepdims=True))
    # a zero Gaussian draw has probability zero; guard anyway
    norm = np.where(norm > 0, norm, 1.0)
    r = rng.uniform(size=shape[:-1] + (1,)) ** (1.0 / dim)
    return g / norm * r


def finite_diff_grad(f: Callable[[np.ndarray], float], at, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    at = np.asarray(at, dtype=np.float64)
    grad = np.empty_like(at)
    flat = grad.reshape(-1)
    for k in range(at.size):
        e = np.zeros(at.size)
        e[k] = h
        e = e.reshape(at.shape)
        fp = float(f(at + e))
        fm = float(f(at - e))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {k}")
        flat[k] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(approx, exact) -> float:
    """``||approx - exact|| / (||exact|| + 1e-8)``, the gradient-check metric."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    return float(np.linalg.norm(approx - exact) / (np.linalg.norm(exact) + 1e-8))
