import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from falsim.core import (RngStream, finite_diff_grad, lp_norm, project_lp, record_streams,
                         relative_error, sample_unit_ball)

vec = arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50))


def test_project_l2_example():
    out = project_lp([3.0, 4.0], [0.0, 0.0], 1.0, 2)
    assert np.allclose(out, [0.6, 0.8])


def test_project_linf_example():
    out = project_lp([3.0, -0.2], [0.0, 0.0], 0.5, "inf")
    assert np.array_equal(out, [0.5, -0.2])


def test_project_zero_radius_returns_center():
    c = np.array([1.0, -2.0])
    assert np.array_equal(project_lp([5.0, 5.0], c, 0.0, "inf"), c)
    assert np.allclose(project_lp([5.0, 5.0], c, 0.0, 2), c)


def test_project_rejects_bad_input():
    with pytest.raises(ValueError):
        project_lp([1.0], [0.0], -1.0)
    with pytest.raises(ValueError):
        project_lp([1.0, 2.0], [0.0], 1.0)
    with pytest.raises(ValueError):
        project_lp([1.0], [0.0], 1.0, p=3)


@settings(max_examples=200, deadline=None)
@given(vec, st.floats(0, 10), st.sampled_from([2, "inf"]))
def test_projection_feasible_and_idempotent(v, rho, p):
    c = np.zeros_like(v)
    once = project_lp(v, c, rho, p)
    assert lp_norm(once - c, p) <= rho + 1e-12
    assert np.array_equal(project_lp(once, c, rho, p), once)


@settings(max_examples=100, deadline=None)
@given(vec, st.floats(0.1, 5))
def test_projection_identity_inside(v, rho):
    v = v / (np.max(np.abs(v)) + 1.0) * rho * 0.5
    assert np.array_equal(project_lp(v, np.zeros_like(v), rho, "inf"), v)


def test_rng_streams_reproducible_and_independent():
    a = RngStream(7, 3, "shuffle").normal(size=5)
    b = RngStream(7, 3, "shuffle").normal(size=5)
    c = RngStream(7, 4, "shuffle").normal(size=5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.array_equal(RngStream(7, 3).child("shuffle").normal(size=5), a)


def test_record_streams_logs_keys():
    with record_streams() as log:
        RngStream(1, "x", 2)
    assert log == [(1, ("x", 2))]


def test_unit_ball_samples_inside():
    u = sample_unit_ball(5, RngStream(0), size=2000)
    assert np.all(np.linalg.norm(u, axis=1) <= 1.0)
    # radius law: P(|u| <= r) = r^d
    assert abs(np.mean(np.linalg.norm(u, axis=1) <= 0.5 ** 0.2) - 0.5) < 0.05


def test_finite_diff_grad_quadratic():
    g = finite_diff_grad(lambda v: float(v @ v), np.array([1.0, -2.0]))
    assert relative_error(g, [2.0, -4.0]) < 1e-8


def test_finite_diff_grad_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda v: float("nan"), np.zeros(2))
