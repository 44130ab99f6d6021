import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dalupi.taskgen import WorldGenSpec, gen_world
from dalupi.world import (
    DiscreteWorld,
    Domain,
    ValidationError,
    Variable,
    empirical_marginal,
    load_json,
    dump_json,
    sample_world,
)
from conftest import make_world


def deterministic_world():
    one = [[1.0, 0.0], [1.0, 0.0]]
    py = [[[0, 1], [0, 1]], [[0, 1], [0, 1]]]
    return make_world([0, 1], [0, 1], one, one, py, py)


def test_deterministic_world_repeats_single_triple():
    out = sample_world(deterministic_world(), Domain.SOURCE, 3, seed=11)
    assert out.tolist() == [[1, 0, 1]] * 3


def test_count_zero_is_empty():
    out = sample_world(deterministic_world(), "target", 0, seed=0)
    assert out.shape == (0, 3)


def test_conditional_frequency_matches():
    # S(x=1) = 1, S(w=1|x=1) = 1, S(y=1|w=1,x=1) = 0.7
    py = np.full((2, 2, 2), 0.5)
    py[1, 1] = [0.3, 0.7]
    w = make_world([0, 1], [0, 1], [[1, 0], [0, 1]], [[1, 0], [0, 1]], py, py)
    out = sample_world(w, Domain.SOURCE, 100_000, seed=1)
    assert abs(out[:, 2].mean() - 0.7) < 0.01


def test_negative_count_rejected():
    with pytest.raises(ValueError):
        sample_world(deterministic_world(), Domain.SOURCE, -1, seed=0)


def test_same_seed_same_bytes():
    w = gen_world(WorldGenSpec(x_card=4, w_card=3, y_card=3, seed=5))
    a = sample_world(w, Domain.TARGET, 500, seed=9)
    b = sample_world(w, Domain.TARGET, 500, seed=9)
    c = sample_world(w, Domain.TARGET, 500, seed=10)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_invalid_rows_rejected():
    with pytest.raises(ValidationError):
        make_world([0.5, 0.6], [0.5, 0.5], [[1, 0], [0, 1]], [[1, 0], [0, 1]],
                   np.full((2, 2, 2), 0.5), np.full((2, 2, 2), 0.5))
    with pytest.raises(ValidationError):
        make_world([0.5, 0.5], [0.5, 0.5], [[1.1, -0.1], [0, 1]], [[1, 0], [0, 1]],
                   np.full((2, 2, 2), 0.5), np.full((2, 2, 2), 0.5))


def test_row_tolerance_boundary():
    eps = 5e-10
    make_world([0.5 + eps, 0.5], [0.5, 0.5], [[1, 0], [0, 1]], [[1, 0], [0, 1]],
               np.full((2, 2, 2), 0.5), np.full((2, 2, 2), 0.5))
    with pytest.raises(ValidationError):
        make_world([0.5 + 5e-9, 0.5], [0.5, 0.5], [[1, 0], [0, 1]], [[1, 0], [0, 1]],
                   np.full((2, 2, 2), 0.5), np.full((2, 2, 2), 0.5))


def test_y_values_length_checked():
    with pytest.raises(ValidationError):
        make_world([1.0], [1.0], [[1.0]], [[1.0]], [[[0.5, 0.5]]], [[[0.5, 0.5]]], y_values=[0.0])


def test_tables_read_only():
    w = deterministic_world()
    with pytest.raises(ValueError):
        w.source_px[0] = 0.3


def test_empirical_marginal_examples():
    s = np.array([[0, 0, 0], [0, 1, 1]])
    assert empirical_marginal(s, Variable.X, 2).tolist() == [1.0, 0.0]
    s = np.array([[0, 0, 0], [1, 1, 1]])
    assert empirical_marginal(s, "x", 2).tolist() == [0.5, 0.5]


def test_empirical_marginal_errors():
    with pytest.raises(ValueError):
        empirical_marginal(np.zeros((0, 3), dtype=int), Variable.X, 2)
    with pytest.raises(ValueError):
        empirical_marginal(np.array([[2, 0, 0]]), Variable.X, 2)


def _exact_marginal_by_sum(world, domain, var):
    # sum the factored joint directly, independent of DiscreteWorld.marginal
    px, pwx, pywx = world.tables(domain)
    out = np.zeros({"x": world.x_card, "w": world.w_card, "y": world.y_card}[var])
    for x in range(world.x_card):
        for w in range(world.w_card):
            for y in range(world.y_card):
                p = px[x] * pwx[x, w] * pywx[w, x, y]
                out[{"x": x, "w": w, "y": y}[var]] += p
    return out


@pytest.mark.parametrize("var", ["x", "w", "y"])
def test_empirical_marginal_converges(var):
    world = gen_world(WorldGenSpec(x_card=4, w_card=3, y_card=3, seed=2))
    for domain in Domain:
        exact = _exact_marginal_by_sum(world, domain, var)
        assert np.allclose(world.marginal(domain, var), exact, atol=1e-12)
        small = sample_world(world, domain, 10_000, seed=4)
        card = len(exact)
        assert np.max(np.abs(empirical_marginal(small, var, card) - exact)) < 0.02
        big = sample_world(world, domain, 100_000, seed=3)
        assert np.max(np.abs(empirical_marginal(big, var, card) - exact)) < 0.02


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_joint_sums_to_one(xc, wc, yc, seed):
    w = gen_world(WorldGenSpec(x_card=xc, w_card=wc, y_card=yc, seed=seed))
    for d in Domain:
        assert abs(w.joint(d).sum() - 1.0) < 1e-12
        assert np.all(w.joint(d) >= 0)


def test_world_json_round_trip(tmp_path):
    w = gen_world(WorldGenSpec(x_card=3, w_card=2, y_card=2, seed=1))
    path = tmp_path / "w.json"
    dump_json(w, path)
    d = json.loads(path.read_text())
    assert d["format"] == "dalupi-world/1"
    back = load_json(path)
    assert isinstance(back, DiscreteWorld)
    for name in ("source_px", "target_pw_given_x", "source_py_given_wx", "y_values"):
        assert np.array_equal(getattr(back, name), getattr(w, name))


def test_world_json_wrong_format():
    with pytest.raises(ValidationError):
        DiscreteWorld.from_dict({"format": "something-else/1"})
