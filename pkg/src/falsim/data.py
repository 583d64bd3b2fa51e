"""Synthetic data, label-skew partitions, neighbouring datasets and CSV I/O."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from .core import RngStream, project_lp


@dataclass(frozen=True)
class SyntheticGenerator:
    """Spherical Gaussian mixture with one unit-variance component per class."""

    means: np.ndarray
    clip_norm: float | None = None

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, labels, rng: RngStream) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        X = self.means[labels] + rng.normal(size=(labels.size, self.dim))
        if self.clip_norm is not None:
            X = project_lp(X, np.zeros(self.dim), self.clip_norm, 2)
        return X

    def draw(self, per_class: int, rng: RngStream, name: str = "synthetic") -> "Dataset":
        y = np.repeat(np.arange(self.k), per_class)
        return Dataset(self.sample(y, rng), y, k=self.k, name=name, generator=self)

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "clip_norm": self.clip_norm}


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    k: int | None = None  # None marks a regression dataset
    name: str = "dataset"
    seed: int | None = None
    generator: SyntheticGenerator | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError("X must be 2-D (n_samples, dim)")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("dataset contains non-finite inputs")
        y = np.asarray(self.y)
        if y.shape != (self.X.shape[0],):
            raise ValueError("label count does not match sample count")
        if self.k is not None:
            y = y.astype(np.int64)
            if y.size and (y.min() < 0 or y.max() >= self.k):
                raise ValueError(f"labels must lie in [0, {self.k})")
        else:
            y = y.astype(np.float64)
        self.y = y

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def is_classification(self) -> bool:
        return self.k is not None

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(self, X=self.X[idx], y=self.y[idx], name=name or self.name)


@dataclass
class ClientPartition:
    """Sample indices of one client into a parent dataset.

    ``shards`` records, per position, which label shard the sample came from.
    """

    client_id: int
    indices: np.ndarray
    shards: np.ndarray | None = None
    own_shard: int | None = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.size < 1:
            raise ValueError(f"client {self.client_id} has an empty partition")

    @property
    def n(self) -> int:
        return int(self.indices.size)

    def own_fraction(self) -> float:
        if self.shards is None:
            raise ValueError("partition carries no shard information")
        return float(np.mean(self.shards == self.own_shard))


@dataclass(frozen=True)
class NeighborSpec:
    client: int
    index: int
    replacement: tuple[np.ndarray, object] | None = None
    allow_identical: bool = False


# ---------------------------------------------------------------- generation

def simplex_means(k: int, dim: int, separation: float, rng: RngStream) -> np.ndarray:
    """``k`` points with all pairwise distances equal to ``separation``.

    A regular simplex centred at the origin, randomly rotated in ``R^dim``.
    """
    if k < 2:
        raise ValueError("need at least two classes")
    if dim < k - 1:
        raise ValueError(f"dim={dim} cannot hold a regular simplex with k={k} vertices")
    centred = np.eye(k) - 1.0 / k
    # orthonormal basis of the (k-1)-dim subspace spanned by the centred vertices
    u, _, _ = np.linalg.svd(centred.T, full_matrices=False)
    coords = centred @ u[:, : k - 1]
    pts = np.zeros((k, dim))
    pts[:, : k - 1] = coords * (separation / math.sqrt(2.0))
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    q = q * np.sign(np.diag(r))
    return pts @ q.T


def generate_synthetic(k: int, dim: int, per_class_count: int, class_separation: float,
                       rng: RngStream, clip_norm: float | None = None,
                       name: str = "synthetic") -> Dataset:
    """Gaussian mixture dataset; ``dataset.generator`` can draw more samples."""
    if k < 2 or dim < 1 or per_class_count < 1:
        raise ValueError("need k >= 2, dim >= 1 and per_class_count >= 1")
    if class_separation < 0:
        raise ValueError("class_separation must be nonnegative")
    gen = SyntheticGenerator(simplex_means(k, dim, class_separation, rng.child("means")), clip_norm)
    ds = gen.draw(per_class_count, rng.child("samples"), name=name)
    ds.seed = rng.root_seed
    return ds


def make_task(k: int, dim: int, per_class: int, test_per_class: int, separation: float,
              seed: int, clip_norm: float | None = None) -> tuple[Dataset, Dataset]:
    """Train and test sets drawn from one generator."""
    train = generate_synthetic(k, dim, per_class, separation, RngStream(seed, "data"),
                               clip_norm=clip_norm, name="train")
    test = train.generator.draw(test_per_class, RngStream(seed, "data", "test"), name="test")
    test.seed = seed
    return train, test


# ---------------------------------------------------------------- partitioning

def skew_fractions(m: int, a: float) -> np.ndarray:
    """Matrix ``F[i, r]``: share of shard ``r`` that client ``i`` receives."""
    if m < 1:
        raise ValueError("need at least one client")
    if a < 0:
        raise ValueError("skew a must be nonnegative")
    if (m - 1) * a > 100 + 1e-9:
        raise ValueError(f"infeasible skew: (m-1)*a = {(m - 1) * a:g} > 100")
    F = np.full((m, m), a / 100.0)
    np.fill_diagonal(F, max(0.0, 1.0 - (m - 1) * a / 100.0))
    return F


def _round_marginal(values: np.ndarray, total: int) -> np.ndarray:
    """Round ``values`` up or down so the result sums to ``total``."""
    base = np.floor(values + 1e-9).astype(np.int64)
    rem = values - base
    extra = total - int(base.sum())
    order = sorted(range(values.size), key=lambda i: (-rem[i], i))
    for i in order[:extra]:
        base[i] += 1
    return base


def _apportion(sizes: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Integer counts ``C[i, r]`` within one of ``F[i, r] * sizes[r]``.

    Column sums equal ``sizes`` exactly and row sums are the rounded real row
    sums, so client totals differ by at most one. The rounding is a bipartite
    flow problem (controlled rounding of a two-way table).
    """
    m = F.shape[0]
    E = F * sizes[None, :]
    lo = np.floor(E + 1e-9).astype(np.int64)
    frac = E - lo
    rows = _round_marginal(E.sum(axis=1), int(sizes.sum()))
    need_row = rows - lo.sum(axis=1)
    need_col = sizes - lo.sum(axis=0)
    if need_row.sum() == 0:
        return lo
    # nodes: source, m rows, m shards, sink
    n_nodes = 2 * m + 2
    cap = np.zeros((n_nodes, n_nodes), dtype=np.int32)
    cap[0, 1:m + 1] = need_row
    cap[m + 1:2 * m + 1, -1] = need_col
    cap[1:m + 1, m + 1:2 * m + 1] = (frac > 1e-9).astype(np.int32)
    flow = maximum_flow(csr_matrix(cap), 0, n_nodes - 1)
    if flow.flow_value != need_row.sum():
        raise RuntimeError("controlled rounding failed; partition targets are inconsistent")
    extra = flow.flow.toarray()[1:m + 1, m + 1:2 * m + 1]
    return lo + np.maximum(extra, 0)


def partition_skew(dataset: Dataset, m: int, a: float, rng: RngStream) -> list[ClientPartition]:
    """Label-skew split: client ``i`` takes (100 - (m-1)a)% of its data from
    its own shard and a% from every other shard.

    Samples are ordered by class (shuffled within class) and cut into ``m``
    equal contiguous shards, so each shard covers ``k/m`` classes' worth of
    data. When ``m`` does not divide ``k`` a shard may straddle a class
    boundary; when ``m > k`` several shards share one class.
    """
    if not dataset.is_classification:
        raise ValueError("label-skew partitioning needs a classification dataset")
    F = skew_fractions(m, a)
    n = len(dataset)
    if m > n:
        raise ValueError(f"cannot give {m} clients at least one of {n} samples")
    order = np.concatenate([
        np.flatnonzero(dataset.y == c)[rng.child("class", c).permutation(int(np.sum(dataset.y == c)))]
        for c in range(dataset.k)
    ])
    shards = np.array_split(order, m)
    sizes = np.array([s.size for s in shards])
    C = _apportion(sizes, F)
    take = [[] for _ in range(m)]
    tags = [[] for _ in range(m)]
    for r, shard in enumerate(shards):
        pos = 0
        for i in range(m):
            take[i].append(shard[pos:pos + C[i, r]])
            tags[i].append(np.full(C[i, r], r))
            pos += C[i, r]
    parts = []
    for i in range(m):
        idx = np.concatenate(take[i])
        tag = np.concatenate(tags[i])
        perm = rng.child("client-order", i).permutation(idx.size)
        parts.append(ClientPartition(i, idx[perm], tag[perm], own_shard=i))
    return parts


def partition_iid(dataset: Dataset, m: int, rng: RngStream) -> list[ClientPartition]:
    perm = rng.permutation(len(dataset))
    return [ClientPartition(i, chunk) for i, chunk in enumerate(np.array_split(perm, m))]


def label_frequencies(y, k: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    return np.bincount(y, minlength=k) / max(y.size, 1)


# ---------------------------------------------------------------- neighbours

def draw_replacement(dataset: Dataset, partition: ClientPartition, rng: RngStream):
    """Fresh sample from the client's distribution.

    The class is drawn from the client's empirical label mix, the input from
    the generator's class component.
    """
    if dataset.generator is None:
        raise ValueError("dataset has no generator; cannot resample from P_i")
    freqs = label_frequencies(dataset.y[partition.indices], dataset.k)
    label = int(rng.choice(dataset.k, p=freqs))
    x = dataset.generator.sample(np.array([label]), rng)[0]
    return x, label


def make_neighbor(dataset: Dataset, partitions: list[ClientPartition], spec: NeighborSpec,
                  rng: RngStream | None = None) -> tuple[Dataset, list[ClientPartition], tuple]:
    """Replace sample ``spec.index`` of client ``spec.client``.

    Returns the extended dataset (replacement appended as the last row), the
    new partitions and the replacement ``(x, y)``. Every other position of
    every client still points at the original rows.
    """
    if not 0 <= spec.client < len(partitions):
        raise IndexError(f"client {spec.client} out of range")
    part = partitions[spec.client]
    if not 0 <= spec.index < part.n:
        raise IndexError(f"index {spec.index} out of range for client {spec.client} (n={part.n})")
    if spec.replacement is None:
        if rng is None:
            raise ValueError("drawing a replacement needs an rng stream")
        x_new, y_new = draw_replacement(dataset, part, rng)
    else:
        x_new, y_new = spec.replacement
        x_new = np.asarray(x_new, dtype=np.float64)
    orig = part.indices[spec.index]
    same = np.array_equal(dataset.X[orig], x_new) and dataset.y[orig] == y_new
    if same and not spec.allow_identical:
        raise ValueError("replacement equals the original sample")
    X = np.vstack([dataset.X, x_new[None, :]])
    y = np.concatenate([dataset.y, np.asarray([y_new], dtype=dataset.y.dtype)])
    new_ds = replace(dataset, X=X, y=y)
    new_parts = []
    for p in partitions:
        if p.client_id == part.client_id:
            idx = p.indices.copy()
            idx[spec.index] = len(dataset)
            p = replace(p, indices=idx)
        new_parts.append(p)
    return new_ds, new_parts, (x_new, y_new)


# ---------------------------------------------------------------- CSV

def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y", *[f"x{j}" for j in range(dataset.dim)]])
        for x, y in zip(dataset.X, dataset.y):
            label = str(int(y)) if dataset.is_classification else repr(float(y))
            w.writerow([label, *[repr(float(v)) for v in x]])


def load_csv(path, name: str | None = None) -> Dataset:
    """Read ``y,x0,x1,...`` rows. Integer labels mean classification."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "y" or header[1:] != [f"x{j}" for j in range(len(header) - 1)]:
        raise ValueError(f"{path}:1: header must be y,x0,x1,...")
    dim = len(header) - 1
    if dim < 1:
        raise ValueError(f"{path}:1: no feature columns")
    labels, feats = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != dim + 1:
            raise ValueError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(row)}")
        try:
            xs = [float(v) for v in row[1:]]
            float(row[0])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in xs) or not math.isfinite(float(row[0])):
            raise ValueError(f"{path}:{lineno}: non-finite value")
        labels.append(row[0].strip())
        feats.append(xs)
    if not feats:
        raise ValueError(f"{path}: no data rows")
    X = np.array(feats, dtype=np.float64)
    try:
        y_int = np.array([int(v) for v in labels], dtype=np.int64)
    except ValueError:
        return Dataset(X, np.array([float(v) for v in labels]), None, name or path.stem)
    if y_int.min() < 0:
        raise ValueError(f"{path}: class labels must be nonnegative")
    return Dataset(X, y_int, int(y_int.max()) + 1, name or path.stem)


def dataset_manifest(dataset: Dataset, partitions: list[ClientPartition] | None = None) -> dict:
    out = {
        "name": dataset.name,
        "seed": dataset.seed,
        "n": len(dataset),
        "dim": dataset.dim,
        "k": dataset.k,
        "generator": dataset.generator.to_dict() if dataset.generator else None,
    }
    if partitions is not None:
        out["partitions"] = [
            {"client": p.client_id, "indices": p.indices.tolist(),
             "own_fraction": p.own_fraction() if p.shards is not None else None}
            for p in partitions
        ]
    return out
