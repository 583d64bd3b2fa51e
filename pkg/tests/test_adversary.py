import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from falsim.adversary import (AttackConfig, attack, perturbation_norms, robust_accuracy, robust_loss,
                              robust_metrics)
from falsim.core import RngStream
from falsim.models import ModelSpec, init_params, loss

LINEAR = ModelSpec("shallow_net", 1, width=1, activation="identity")


def test_hand_traced_linear_pgd():
    # f(x) = x, y = -1, x = 0: the loss grows with x, so PGD walks to the edge
    cfg = AttackConfig(rho=1.0, p="inf")
    xa = attack(cfg, LINEAR, [1.0], [0.0], -1.0)
    assert xa[0] == 1.0
    assert loss(LINEAR, [1.0], xa, -1.0) == 2.0


def test_rho_zero_returns_input_bitwise():
    spec = ModelSpec("mlp", 3, hidden=(4,), n_classes=2)
    p = init_params(spec, RngStream(0))
    x = np.array([[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]])
    out = attack(AttackConfig(rho=0.0), spec, p, x, [0, 1])
    assert np.array_equal(out, x)


def test_step_size_default():
    assert AttackConfig(rho=0.4).alpha == 0.1


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 2.0), st.sampled_from(["inf", "2"]), st.integers(0, 10_000),
       st.sampled_from(["zero", "random_in_ball"]))
def test_feasibility(rho, p, seed, init):
    spec = ModelSpec("mlp", 4, hidden=(6,), n_classes=3)
    rng = RngStream(seed)
    params = init_params(spec, rng.child("p"))
    X = rng.normal(size=(20, 4))
    y = rng.integers(0, 3, size=20)
    cfg = AttackConfig(rho=rho, p=p, init=init)
    xa = attack(cfg, spec, params, X, y, rng.child("init"))
    assert np.all(perturbation_norms(cfg, X, xa) <= rho + 1e-12)


def test_attack_increases_loss():
    spec = ModelSpec("mlp", 4, hidden=(8,), n_classes=3)
    rng = RngStream(5)
    params = init_params(spec, rng)
    X = rng.normal(size=(50, 4))
    y = rng.integers(0, 3, size=50)
    cfg = AttackConfig(rho=0.3)
    xa = attack(cfg, spec, params, X, y)
    assert np.all(loss(spec, params, xa, y) >= loss(spec, params, X, y))
    assert robust_loss(cfg, spec, params, (X, y)) >= robust_loss(AttackConfig(), spec, params, (X, y))


def test_random_init_needs_rng():
    cfg = AttackConfig(rho=0.5, init="random_in_ball")
    with pytest.raises(ValueError):
        attack(cfg, LINEAR, [1.0], [0.0], 0.0)


def test_robust_accuracy_requires_classifier():
    with pytest.raises(ValueError):
        robust_accuracy(AttackConfig(), LINEAR, [1.0], (np.zeros((2, 1)), np.zeros(2)))


def test_robust_metrics_keys():
    spec = ModelSpec("mlp", 2, hidden=(3,), n_classes=2)
    p = init_params(spec, RngStream(0))
    out = robust_metrics(AttackConfig(rho=0.1), spec, p, (np.ones((4, 2)), np.array([0, 1, 0, 1])))
    assert set(out) == {"loss", "acc"} and 0 <= out["acc"] <= 1


def test_invalid_config():
    with pytest.raises(ValueError):
        AttackConfig(rho=-1)
    with pytest.raises(ValueError):
        AttackConfig(p=1)


def test_zero_gradient_point_stays():
    # shallow net with zero weights: f == 0 everywhere, input gradient is zero
    spec = ModelSpec("shallow_net", 2, width=2)
    xa = attack(AttackConfig(rho=0.5, steps=1), spec, np.zeros(4), [0.3, -0.2], 1.0)
    assert np.array_equal(xa, [0.3, -0.2])


def test_robust_loss_examples():
    X = np.array([[0.0]])
    assert robust_loss(AttackConfig(rho=1.0), LINEAR, [1.0], (X, np.array([-1.0]))) == 2.0
    spec = ModelSpec("mlp", 2, hidden=(3,), n_classes=2)
    p = init_params(spec, RngStream(2))
    Xc = RngStream(3).normal(size=(10, 2))
    yc = np.arange(10) % 2
    assert robust_loss(AttackConfig(), spec, p, (Xc, yc)) == float(np.mean(loss(spec, p, Xc, yc)))


def test_margin_flip_gives_zero_accuracy():
    # two points 0.2 from a linear boundary at x0 = 0; an l_inf attack of 0.5 flips both
    spec = ModelSpec("mlp", 1, hidden=(), n_classes=2)
    params = np.array([-1.0, 1.0, 0.0, 0.0])  # logits (-x, x)
    X = np.array([[-0.2], [0.2]])
    y = np.array([0, 1])
    assert robust_accuracy(AttackConfig(rho=0.0), spec, params, (X, y)) == 1.0
    assert robust_accuracy(AttackConfig(rho=0.5), spec, params, (X, y)) == 0.0


def test_untrained_uniform_model_chance_accuracy():
    k, n = 4, 4000
    spec = ModelSpec("mlp", 3, hidden=(4,), n_classes=k)
    rng = RngStream(9)
    params = init_params(spec, rng) * 1e-3
    X = rng.normal(size=(n, 3))
    y = rng.integers(0, k, size=n)
    acc = robust_accuracy(AttackConfig(), spec, params, (X, y))
    assert abs(acc - 1 / k) < 3 * np.sqrt(0.25 * 0.75 / n)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        robust_loss(AttackConfig(), LINEAR, [1.0], (np.zeros((0, 1)), np.zeros(0)))
