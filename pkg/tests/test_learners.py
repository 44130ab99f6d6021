import itertools

import numpy as np
import pytest

from dalupi.learners import (
    Head,
    LipschitzMethod,
    Loss,
    Predictor,
    TrainConfig,
    TrainingDiverged,
    accuracy,
    estimate_lipschitz,
    fit,
    grad_check,
    loss_and_grad,
    per_example_loss,
)
from dalupi.world import make_rng

COMBOS = [
    (Loss.SQUARED_ERROR, Head.IDENTITY),
    (Loss.SQUARED_ERROR, Head.SOFTMAX),
    (Loss.SQUARED_ERROR, Head.SIGMOID),
    (Loss.CROSS_ENTROPY, Head.SOFTMAX),
    (Loss.BINARY_CROSS_ENTROPY, Head.SIGMOID),
]


def targets_for(loss, rng, n, k):
    if loss is Loss.CROSS_ENTROPY:
        return rng.integers(0, k, size=n)
    if loss is Loss.BINARY_CROSS_ENTROPY:
        return rng.integers(0, 2, size=(n, k)).astype(float)
    return rng.normal(size=(n, k))


def test_linear_squared_grad_exact():
    rng = make_rng(0)
    p = Predictor(4, 2, seed=0)
    assert grad_check(p, Loss.SQUARED_ERROR, rng.normal(size=(10, 4)), rng.normal(size=(10, 2))) < 1e-6


def test_mlp_cross_entropy_grad():
    rng = make_rng(1)
    p = Predictor(5, 3, hidden=6, head=Head.SOFTMAX, seed=1)
    assert grad_check(p, Loss.CROSS_ENTROPY, rng.normal(size=(20, 5)), rng.integers(0, 3, 20)) < 1e-5


@pytest.mark.parametrize("hidden", [None, 5])
@pytest.mark.parametrize("loss,head", COMBOS)
def test_grad_check_every_combination(hidden, loss, head):
    for i in range(20):
        rng = make_rng(100 + i)
        p = Predictor(3, 3, hidden=hidden, head=head, seed=i)
        x = rng.normal(size=(8, 3))
        assert grad_check(p, loss, x, targets_for(loss, rng, 8, 3)) < 1e-5


def test_zero_input_has_no_first_layer_weight_gradient():
    p = Predictor(4, 2, hidden=3, seed=2)
    _, grads = loss_and_grad(p, Loss.SQUARED_ERROR, np.zeros((5, 4)), np.ones((5, 2)))
    assert np.all(grads[0] == 0.0)
    assert np.any(grads[1] != 0.0) or np.any(grads[3] != 0.0)


def test_grad_check_epsilon_range():
    p = Predictor(2, 1)
    with pytest.raises(ValueError):
        grad_check(p, Loss.SQUARED_ERROR, np.ones((2, 2)), np.ones((2, 1)), epsilon=1e-2)


def test_loss_head_mismatch_rejected():
    p = Predictor(2, 2, head=Head.IDENTITY)
    with pytest.raises(ValueError):
        loss_and_grad(p, Loss.CROSS_ENTROPY, np.ones((2, 2)), np.array([0, 1]))


def test_per_example_matches_mean():
    rng = make_rng(4)
    p = Predictor(3, 4, hidden=5, head=Head.SOFTMAX, seed=3)
    x, y = rng.normal(size=(12, 3)), rng.integers(0, 4, 12)
    rows = per_example_loss(p, Loss.CROSS_ENTROPY, x, y)
    assert rows.shape == (12,)
    assert rows.mean() == pytest.approx(loss_and_grad(p, Loss.CROSS_ENTROPY, x, y, need_grad=False)[0])


def test_separable_linear_softmax_reaches_full_accuracy():
    rng = make_rng(5)
    x = rng.normal(size=(200, 2))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)
    res = fit(Predictor(2, 2, head=Head.SOFTMAX), x, y, TrainConfig(loss="cross_entropy", learning_rate=0.5, epochs=200))
    assert accuracy(res.predictor, x, y) == 1.0


def test_weight_decay_shrinks_toward_zero():
    rng = make_rng(6)
    x = rng.normal(size=(50, 3))
    p = Predictor(3, 1, seed=4)
    res = fit(p, x, np.zeros((50, 1)), TrainConfig(loss="squared_error", learning_rate=0.05, epochs=50,
                                                    weight_decay=0.1))
    assert np.linalg.norm(res.predictor.params[0]) < np.linalg.norm(p.params[0])
    initial = loss_and_grad(p, Loss.SQUARED_ERROR, x, np.zeros((50, 1)), need_grad=False)[0]
    assert res.train_losses[-1] <= initial


XOR_X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
XOR_Y = np.array([0, 1, 1, 0])


def test_xor_mlp_fits_linear_cannot():
    x = np.repeat(XOR_X, 25, axis=0)
    y = np.repeat(XOR_Y, 25)
    cfg = TrainConfig(loss="cross_entropy", learning_rate=0.5, epochs=300, batch_size=10)
    mlp = fit(Predictor(2, 2, hidden=8, head=Head.SOFTMAX, seed=0), x, y, cfg).predictor
    # exhaustive truth table
    assert accuracy(mlp, XOR_X, XOR_Y) == 1.0
    lin = fit(Predictor(2, 2, head=Head.SOFTMAX, seed=0), x, y, cfg).predictor
    assert accuracy(lin, XOR_X, XOR_Y) <= 0.75
    # no linear rule gets all four: enumerate every sign pattern of a separating line
    for w1, w2, b in itertools.product(np.linspace(-2, 2, 9), repeat=3):
        pred = (XOR_X @ [w1, w2] + b > 0).astype(int)
        assert np.mean(pred == XOR_Y) <= 0.75


def test_fit_deterministic():
    rng = make_rng(7)
    x, y = rng.normal(size=(100, 4)), rng.integers(0, 3, 100)
    cfg = TrainConfig(loss="cross_entropy", epochs=20, seed=3, validation_fraction=0.2)
    a = fit(Predictor(4, 3, hidden=6, head=Head.SOFTMAX, seed=1), x, y, cfg).predictor
    b = fit(Predictor(4, 3, hidden=6, head=Head.SOFTMAX, seed=1), x, y, cfg).predictor
    for pa, pb in zip(a.params, b.params):
        assert pa.tobytes() == pb.tobytes()


def test_small_step_convex_loss_non_increasing():
    rng = make_rng(8)
    x = rng.normal(size=(64, 3))
    t = x @ np.array([[1.0], [-2.0], [0.5]]) + 0.1 * rng.normal(size=(64, 1))
    for lr in (1e-3, 5e-4):
        res = fit(Predictor(3, 1, seed=2), x, t, TrainConfig(loss="squared_error", learning_rate=lr, epochs=60))
        assert np.all(np.diff(res.train_losses) <= 1e-12)


def test_early_stopping_restores_best():
    rng = make_rng(9)
    x, y = rng.normal(size=(60, 20)), rng.integers(0, 2, 60)
    cfg = TrainConfig(loss="cross_entropy", learning_rate=0.5, epochs=200, validation_fraction=0.3,
                      early_stop_patience=5)
    res = fit(Predictor(20, 2, hidden=32, head=Head.SOFTMAX), x, y, cfg)
    assert res.stopped_early
    assert len(res.val_losses) == res.best_epoch + 1 + cfg.early_stop_patience
    assert min(res.val_losses) == res.val_losses[res.best_epoch]


def test_divergence_names_learning_rate():
    x = np.array([[1e3, 1e3]] * 8)
    with pytest.raises(TrainingDiverged, match="learning_rate"):
        fit(Predictor(2, 1), x, np.ones((8, 1)), TrainConfig(loss="squared_error", learning_rate=10.0, epochs=50))


def test_train_config_validation():
    for bad in ({"learning_rate": 0}, {"epochs": 0}, {"batch_size": 0}, {"validation_fraction": 1.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_fit_rejects_empty():
    with pytest.raises(ValueError):
        fit(Predictor(2, 1), np.zeros((0, 2)), np.zeros((0, 1)), TrainConfig(loss="squared_error"))


def test_lipschitz_identity_and_scaling():
    p = Predictor(3, 3)
    p.params = [np.eye(3), np.zeros(3)]
    assert estimate_lipschitz(p).m_hat == pytest.approx(1.0, abs=1e-6)
    p.params = [2 * np.eye(3), np.zeros(3)]
    assert estimate_lipschitz(p).m_hat == pytest.approx(2.0, abs=1e-6)


@pytest.mark.parametrize("hidden", [None, 6])
@pytest.mark.parametrize("head", list(Head))
def test_pairwise_below_weight_product(hidden, head):
    for seed in range(5):
        p = Predictor(4, 3, hidden=hidden, head=head, seed=seed)
        probe = make_rng(seed).normal(size=(100, 4))
        upper = estimate_lipschitz(p, method=LipschitzMethod.WEIGHT_PRODUCT_UPPER).m_hat
        emp = estimate_lipschitz(p, probe, LipschitzMethod.EMPIRICAL_PAIRWISE).m_hat
        assert emp <= upper + 1e-6


def test_pairwise_needs_two_points():
    with pytest.raises(ValueError):
        estimate_lipschitz(Predictor(2, 1), np.ones((1, 2)), "empirical_pairwise")


def test_predictor_json_round_trip():
    p = Predictor(3, 2, hidden=4, head=Head.SIGMOID, seed=3)
    q = Predictor.from_dict(p.to_dict())
    x = make_rng(0).normal(size=(5, 3))
    assert np.array_equal(p.predict(x), q.predict(x))
    assert p.to_dict()["format"] == "dalupi-model/1"


def test_image_inputs_flattened():
    p = Predictor(16, 2, head=Head.SOFTMAX)
    out = p.predict(np.zeros((3, 4, 4)))
    assert out.shape == (3, 2)
    assert np.allclose(out.sum(axis=1), 1.0)
