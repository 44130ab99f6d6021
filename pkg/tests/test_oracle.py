import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import make_world
from dalupi.oracle import (
    RiskLoss,
    TabularHypothesis,
    Unidentified,
    check_assumptions,
    identified_target_risk,
    minimal_gamma,
    optimal_hypothesis,
    raw_gamma_ratio,
    relaxed_sufficiency_bound,
    true_target_risk,
)
from dalupi.taskgen import Knob, WorldGenSpec, gen_world
from dalupi.world import make_rng


def random_h(world, rng):
    return TabularHypothesis(rng.uniform(-0.5, world.y_card - 0.5, size=world.x_card))


# --- check_assumptions -------------------------------------------------------


def test_identical_domains(two_point_world):
    r = check_assumptions(two_point_world)
    assert r.labeling_invariant and not r.marginals_differ
    assert r.overlap_w and r.sufficiency
    assert r.labeling_violations == r.overlap_violations == r.sufficiency_violations == []


def test_overlap_violation_names_w():
    px = [0.5, 0.5]
    spwx = [[0.5, 0.5, 0.0], [0.5, 0.5, 0.0]]
    tpwx = [[0.2, 0.3, 0.5], [0.2, 0.3, 0.5]]
    py = np.full((3, 2, 2), 0.5)
    r = check_assumptions(make_world(px, px, spwx, tpwx, py, py))
    assert not r.overlap_w
    assert r.overlap_violations == [2]


def test_sufficiency_violation_listed():
    # S(y|w=0, x) differs between x=0 and x=1
    pwx = [[1.0, 0.0], [1.0, 0.0]]
    spy = [[[0.9, 0.1], [0.3, 0.7]], [[0.5, 0.5], [0.5, 0.5]]]
    tpy = [[[0.6, 0.4], [0.6, 0.4]], [[0.5, 0.5], [0.5, 0.5]]]
    r = check_assumptions(make_world([0.5, 0.5], [0.5, 0.5], pwx, pwx, spy, tpy))
    assert not r.sufficiency
    # direct comparison: S(y|w=0) = (0.6, 0.4) so both inputs deviate
    assert ("source", 0, 0) in r.sufficiency_violations
    assert ("source", 0, 1) in r.sufficiency_violations
    assert all(d == "source" for d, _, _ in r.sufficiency_violations)


def test_flags_match_violation_lists():
    for knobs in ([], [Knob.BREAK_OVERLAP_W], [Knob.BREAK_SUFFICIENCY], [Knob.BREAK_COVARIATE_SHIFT_W]):
        for seed in range(20):
            r = check_assumptions(gen_world(WorldGenSpec(knobs=knobs, seed=seed)))
            assert r.labeling_invariant == (not r.labeling_violations)
            assert r.overlap_w == (not r.overlap_violations)
            assert r.sufficiency == (not r.sufficiency_violations)


# --- risks ---------------------------------------------------------------------


def test_true_risk_two_point(two_point_world):
    h = TabularHypothesis([0.0, 1.0])
    assert true_target_risk(two_point_world, h, RiskLoss.SQUARED) == pytest.approx(0.15, abs=1e-15)


def test_true_risk_deterministic_match():
    pwx = [[1, 0], [0, 1]]
    py = [[[1, 0], [1, 0]], [[0, 1], [0, 1]]]
    w = make_world([0.3, 0.7], [0.6, 0.4], pwx, pwx, py, py)
    assert true_target_risk(w, TabularHypothesis([0.0, 1.0]), "squared") == 0.0
    assert true_target_risk(w, TabularHypothesis([[1, 0], [0, 1]]), "zero_one") == 0.0


def test_zero_one_uniform_labels_is_half():
    rng = make_rng(0)
    py = np.full((2, 3, 2), 0.5)
    pwx = [[0.5, 0.5]] * 3
    w = make_world([0.2, 0.3, 0.5], [0.1, 0.1, 0.8], pwx, pwx, py, py)
    for _ in range(10):
        rows = rng.dirichlet(np.ones(2), size=3)
        assert true_target_risk(w, TabularHypothesis(rows), "zero_one") == pytest.approx(0.5, abs=1e-12)
        assert true_target_risk(w, TabularHypothesis(rng.normal(size=3)), "zero_one") == pytest.approx(0.5)


def test_squared_loss_rejects_classification_form(two_point_world):
    with pytest.raises(ValueError):
        true_target_risk(two_point_world, TabularHypothesis([[0.5, 0.5], [0.5, 0.5]]), "squared")


def test_hypothesis_validation():
    with pytest.raises(ValueError):
        TabularHypothesis([np.inf, 0.0])
    with pytest.raises(ValueError):
        TabularHypothesis([[0.7, 0.7]])


def test_identified_equals_true_under_assumptions():
    rng = make_rng(1)
    for seed in range(50):
        world = gen_world(WorldGenSpec(x_card=4, w_card=3, y_card=3, seed=seed))
        for _ in range(5):
            h = random_h(world, rng)
            ident = identified_target_risk(world, h, "squared")
            assert abs(ident - true_target_risk(world, h, "squared")) <= 1e-12
            # library path against the loop oracle
            assert ident == pytest.approx(oracles.loop_identified_risk(world, h.values), abs=1e-12)


def test_identified_reduces_to_true_for_equal_domains(two_point_world):
    h = TabularHypothesis([0.3, 0.9])
    assert identified_target_risk(two_point_world, h, "squared") == pytest.approx(
        true_target_risk(two_point_world, h, "squared"), abs=1e-15)


def test_identified_differs_without_sufficiency(hand_world):
    h = TabularHypothesis([0.0, 1.0])
    true = true_target_risk(hand_world, h, "squared")
    ident = identified_target_risk(hand_world, h, "squared")
    # frozen loop-oracle values
    assert true == pytest.approx(0.45, abs=1e-12)
    assert ident == pytest.approx(0.525, abs=1e-12)
    assert abs(true - ident) > 1e-3


def test_identified_refuses_outside_source_support():
    world = gen_world(WorldGenSpec(knobs=[Knob.BREAK_OVERLAP_W], w_card=3, seed=4))
    with pytest.raises(Unidentified) as exc:
        identified_target_risk(world, TabularHypothesis(np.zeros(world.x_card)), "squared")
    assert exc.value.violating_w == [2]
    assert "w=[2]" in str(exc.value)
    with pytest.raises(Unidentified):
        optimal_hypothesis(world)


def test_identified_ignores_source_x_marginal():
    rng = make_rng(3)
    for seed in range(20):
        world = gen_world(WorldGenSpec(x_card=4, w_card=3, y_card=2, seed=seed))
        h = random_h(world, rng)
        base = identified_target_risk(world, h, "squared")
        # a new S(x) moves S(w) and S(x|w); under sufficiency S(y|w) stays put
        new_px = rng.dirichlet(np.ones(world.x_card))
        d = world.to_dict()
        d["source_px"] = new_px.tolist()
        moved = type(world).from_dict(d)
        assert identified_target_risk(moved, h, "squared") == pytest.approx(base, abs=1e-12)


# --- optimal hypothesis --------------------------------------------------------


def test_optimal_deterministic_labeling():
    pwx = np.eye(3)
    py = np.zeros((3, 3, 3))
    for w in range(3):
        py[w, :, w] = 1.0
    world = make_world([0.2, 0.3, 0.5], [0.5, 0.25, 0.25], pwx, pwx, py, py, y_values=[-1.0, 0.5, 2.0])
    assert np.allclose(optimal_hypothesis(world).values, [-1.0, 0.5, 2.0])


def test_optimal_two_point(two_point_world):
    assert np.allclose(optimal_hypothesis(two_point_world).values, [0.1, 0.8], atol=1e-15)


def test_optimal_beats_grid():
    for seed in range(10):
        world = gen_world(WorldGenSpec(x_card=3, w_card=3, y_card=2, seed=seed))
        h_star = optimal_hypothesis(world)
        grid_h, grid_risk = oracles.grid_minimizer(world, 1e-3)
        r_star = identified_target_risk(world, h_star, "squared")
        assert r_star <= grid_risk + 1e-12
        mass = world.target_px > 0
        assert np.all(np.abs(h_star.values - grid_h)[mass] <= 1e-3)


# --- relaxed sufficiency -------------------------------------------------------


def test_relaxed_equals_identified_at_gamma_one():
    rng = make_rng(5)
    for seed in range(30):
        world = gen_world(WorldGenSpec(x_card=3, w_card=3, y_card=3, seed=seed))
        h = random_h(world, rng)
        ident = identified_target_risk(world, h, "squared")
        assert abs(relaxed_sufficiency_bound(world, h, 1.0, "squared") - ident) <= 1e-12
        assert relaxed_sufficiency_bound(world, h, 2.0, "squared") == pytest.approx(2 * ident, abs=1e-12)


def test_minimal_gamma_sufficient_world_is_one():
    for seed in range(30):
        assert minimal_gamma(gen_world(WorldGenSpec(seed=seed))) == pytest.approx(1.0, abs=1e-12)


def test_minimal_gamma_hand_world(hand_world):
    # exact rational enumeration gives 9/8
    assert minimal_gamma(hand_world) == pytest.approx(9 / 8, abs=1e-12)
    assert raw_gamma_ratio(hand_world) == pytest.approx(9 / 8, abs=1e-12)


def test_source_only_insufficiency_clamps_gamma():
    pwx = [[1.0, 0.0], [1.0, 0.0]]
    spy = [[[0.9, 0.1], [0.3, 0.7]], [[0.5, 0.5], [0.5, 0.5]]]
    tpy = [[[0.6, 0.4], [0.6, 0.4]], [[0.5, 0.5], [0.5, 0.5]]]
    world = make_world([0.5, 0.5], [0.5, 0.5], pwx, pwx, spy, tpy)
    assert raw_gamma_ratio(world) < 1.0
    assert minimal_gamma(world) == 1.0


def test_relaxed_bound_covers_true_risk(hand_world):
    rng = make_rng(7)
    g = minimal_gamma(hand_world)
    for _ in range(50):
        h = TabularHypothesis(rng.uniform(-1, 2, size=2))
        assert relaxed_sufficiency_bound(hand_world, h, g, "squared") >= true_target_risk(hand_world, h, "squared")


def test_relaxed_bound_errors(two_point_world):
    h = TabularHypothesis([0.0, 1.0])
    with pytest.raises(ValueError):
        relaxed_sufficiency_bound(two_point_world, h, 0.5, "squared")
    # an input with mass just above the support tolerance whose label
    # conditional is positive, while S(y|w) itself falls below it
    tiny = 1e-11
    pwx = [[1.0, 0.0], [1.0, 0.0]]
    py = [[[1.0, 0.0], [0.99, 0.01]], [[0.5, 0.5], [0.5, 0.5]]]
    world = make_world([1 - tiny, tiny], [1.0, 0.0], pwx, pwx, py, py)
    with pytest.raises(ZeroDivisionError):
        relaxed_sufficiency_bound(world, h, 1.0, "squared")
    with pytest.raises(ZeroDivisionError):
        minimal_gamma(world)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([(), (Knob.BREAK_SUFFICIENCY,)]))
def test_relaxed_bound_property(seed, knobs):
    world = gen_world(WorldGenSpec(x_card=3, w_card=3, y_card=2, knobs=knobs, seed=seed))
    h = random_h(world, make_rng(seed))
    g = minimal_gamma(world)
    assert relaxed_sufficiency_bound(world, h, g, "squared") >= true_target_risk(world, h, "squared") - 1e-12
