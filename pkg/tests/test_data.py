import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from falsim.core import RngStream
from falsim.data import (Dataset, NeighborSpec, generate_synthetic, label_frequencies, load_csv,
                         make_neighbor, make_task, partition_skew, save_csv, skew_fractions)


def toy(k=10, per_class=20, seed=0, dim=12):
    return generate_synthetic(k, dim, per_class, 4.0, RngStream(seed))


def test_synthetic_deterministic():
    a, b = toy(seed=3), toy(seed=3)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)


def test_simplex_separation():
    ds = generate_synthetic(4, 6, 1, 5.0, RngStream(1))
    M = ds.generator.means
    dists = [np.linalg.norm(M[i] - M[j]) for i in range(4) for j in range(i + 1, 4)]
    assert np.allclose(dists, 5.0)


def test_zero_separation_identical_components():
    ds = generate_synthetic(3, 4, 5, 0.0, RngStream(1))
    assert np.allclose(ds.generator.means, 0.0)


def test_well_separated_least_squares_fit():
    tr, te = make_task(2, 2, 200, 500, 20.0, seed=4)
    A = np.hstack([tr.X, np.ones((len(tr), 1))])
    w, *_ = np.linalg.lstsq(A, 2.0 * tr.y - 1.0, rcond=None)
    pred = (np.hstack([te.X, np.ones((len(te), 1))]) @ w > 0).astype(int)
    assert np.mean(pred == te.y) > 0.99


def test_two_client_split():
    ds = toy(k=10, per_class=20)
    parts = partition_skew(ds, 2, 10, RngStream(0))
    for p in parts:
        assert p.own_fraction() == pytest.approx(0.9, abs=1e-9)


def test_zero_skew_disjoint_shards():
    ds = toy(k=4, per_class=25)
    parts = partition_skew(ds, 4, 0, RngStream(0))
    for p in parts:
        assert p.own_fraction() == 1.0
        assert np.count_nonzero(label_frequencies(ds.y[p.indices], 4)) == 1


def test_single_client_owns_everything():
    ds = toy()
    (p,) = partition_skew(ds, 1, 30, RngStream(0))
    assert sorted(p.indices.tolist()) == list(range(len(ds)))


def test_infeasible_skew_rejected():
    with pytest.raises(ValueError):
        skew_fractions(10, 25)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(1, 12), st.integers(5, 40), st.floats(0, 1), st.integers(0, 999))
def test_partition_properties(k, m, per_class, frac, seed):
    ds = toy(k=k, per_class=per_class, seed=seed)
    if m > len(ds):
        return
    a = frac * 100 / max(m - 1, 1)
    parts = partition_skew(ds, m, a, RngStream(seed))
    sizes = [p.n for p in parts]
    allidx = np.concatenate([p.indices for p in parts])
    assert np.array_equal(np.sort(allidx), np.arange(len(ds)))
    assert max(sizes) - min(sizes) <= 1
    target = 1 - (m - 1) * a / 100
    for p in parts:
        assert abs(p.own_fraction() - target) <= 2 / p.n + 1e-9


def test_neighbor_construction():
    ds = toy()
    parts = partition_skew(ds, 3, 10, RngStream(0))
    nb = NeighborSpec(1, 4)
    a = make_neighbor(ds, parts, nb, RngStream(5))
    b = make_neighbor(ds, parts, nb, RngStream(5))
    assert np.array_equal(a[0].X, b[0].X)
    ds2, parts2, (x, y) = a
    assert np.array_equal(ds2.X[parts2[1].indices[4]], x)
    # only one position of one client differs
    for p, q in zip(parts, parts2):
        diff = np.flatnonzero(p.indices != q.indices)
        assert diff.tolist() == ([4] if p.client_id == 1 else [])


def test_all_positions_give_distinct_neighbors():
    ds = toy(k=3, per_class=5)
    parts = partition_skew(ds, 2, 0, RngStream(0))
    sets = set()
    for j in range(parts[0].n):
        _, p2, _ = make_neighbor(ds, parts, NeighborSpec(0, j), RngStream(1, j))
        sets.add(tuple(p2[0].indices))
    assert len(sets) == parts[0].n


def test_neighbor_errors():
    ds = toy()
    parts = partition_skew(ds, 2, 10, RngStream(0))
    with pytest.raises(IndexError):
        make_neighbor(ds, parts, NeighborSpec(0, 10_000), RngStream(0))
    orig = parts[0].indices[0]
    with pytest.raises(ValueError):
        make_neighbor(ds, parts, NeighborSpec(0, 0, (ds.X[orig], ds.y[orig])))


def test_csv_roundtrip(tmp_path):
    ds = toy(k=3, per_class=4)
    save_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)


def test_csv_hand_written(tmp_path):
    f = tmp_path / "h.csv"
    f.write_text("y,x0,x1\n0,1.5,2\n1,-1,0\n0,0.25,3\n")
    ds = load_csv(f)
    assert len(ds) == 3 and ds.is_classification
    assert np.array_equal(ds.X, [[1.5, 2.0], [-1.0, 0.0], [0.25, 3.0]])


def test_csv_rejects_nan_with_line(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("y,x0\n0,1\n1,nan\n")
    with pytest.raises(ValueError, match=":3:"):
        load_csv(f)
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(ValueError):
        load_csv(tmp_path / "e.csv")


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.zeros(3, dtype=int), 2)
    with pytest.raises(ValueError):
        Dataset(np.array([[np.inf]]), np.zeros(1, dtype=int), 2)
