import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgdm.reward import (
    HalfplaneMargin,
    NegChamferToTemplate,
    RegionIndicator,
    RewardSpec,
    SolverError,
    make_reward,
    payoff_sample,
    project_to_ball,
    solve_shift_annealing,
    solve_shift_gradient,
)
from rgdm.schedule import make_linear_schedule


def quadratic(c, a=1.0):
    c = np.asarray(c, dtype=np.float64)
    return (lambda X: -a * float(np.sum((X - c) ** 2))), (lambda X: -2.0 * a * (X - c))


def ball_maximizer(X_tilde, c, d):
    """argmax over ||eps|| <= d of -||X_tilde + eps - c||^2 is the projection of c - X_tilde."""
    v = c - X_tilde
    n = np.linalg.norm(v)
    return v if n <= d else v * d / n


def test_projection_inside_is_identity():
    v = np.array([[0.3, 0.4]])
    assert np.array_equal(project_to_ball(v, 1.0), v)


def test_projection_onto_sphere():
    v = np.array([[3.0, 4.0]])
    np.testing.assert_allclose(project_to_ball(v, 1.0), [[0.6, 0.8]], rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 10.0))
def test_projection_is_idempotent_and_bounded(seed, d):
    v = 5 * np.random.default_rng(seed).standard_normal((4, 2))
    p = project_to_ball(v, d)
    assert np.linalg.norm(p) <= d * (1 + 1e-12)
    np.testing.assert_allclose(project_to_ball(p, d), p, rtol=1e-12)


def test_spec_validation():
    r = lambda X: 0.0  # noqa: E731
    with pytest.raises(ValueError):
        RewardSpec(r, solver="gradient")
    with pytest.raises(ValueError):
        RewardSpec(r, solver="newton")
    with pytest.raises(ValueError):
        RewardSpec(r, radius=0.0)
    with pytest.raises(ValueError):
        RewardSpec(r, kappa=-1.0)


def test_radius_rule():
    s = make_linear_schedule(100, 1e-4, 0.05)
    spec = RewardSpec(lambda X: 0.0)
    assert spec.radius_at(40, s) == pytest.approx(2 * math.sqrt(s.post_var[40]), rel=1e-15)
    assert spec.radius_at(1, s) == 0.0
    assert RewardSpec(lambda X: 0.0, radius=0.3).radius_at(40, s) == 0.3


def test_gradient_solver_interior_optimum():
    c = np.array([[0.5, 0.5]])
    r, g = quadratic(c)
    res = solve_shift_gradient(RewardSpec(r, g, "gradient", steps=200), np.zeros((1, 2)), 1.0)
    np.testing.assert_allclose(res.eps_star, c, atol=1e-9)
    assert res.reward_before == pytest.approx(-0.5) and res.reward_after == pytest.approx(0.0, abs=1e-12)


def test_gradient_solver_boundary_optimum():
    c = np.array([[3.0, 4.0]])
    r, g = quadratic(c)
    res = solve_shift_gradient(RewardSpec(r, g, "gradient"), np.zeros((1, 2)), 1.0)
    np.testing.assert_allclose(res.eps_star, [[0.6, 0.8]], atol=1e-9)
    assert res.reward_after == pytest.approx(-16.0, rel=1e-9)


def test_gradient_solver_flat_reward_keeps_zero_shift():
    spec = RewardSpec(lambda X: 1.0, lambda X: np.zeros_like(X), "gradient")
    res = solve_shift_gradient(spec, np.ones((3, 2)), 0.5)
    assert not res.eps_star.any() and res.reward_after == res.reward_before == 1.0


@pytest.mark.parametrize("inside", [True, False])
def test_gradient_solver_matches_closed_form(inside):
    rng = np.random.default_rng(1 if inside else 2)
    for _ in range(10):
        d = rng.uniform(0.5, 3.0)
        X = rng.standard_normal((4, 2))
        u = rng.standard_normal((4, 2))
        u /= np.linalg.norm(u)
        c = X + (rng.uniform(0.1, 0.9) if inside else rng.uniform(1.5, 4.0)) * d * u
        r, g = quadratic(c)
        res = solve_shift_gradient(RewardSpec(r, g, "gradient", steps=200), X, d)
        assert np.linalg.norm(res.eps_star - ball_maximizer(X, c, d)) < 1e-6


def test_gradient_solver_reports_iterations():
    r, g = quadratic(np.zeros((2, 2)))
    res = solve_shift_gradient(RewardSpec(r, g, "gradient", steps=7), np.ones((2, 2)), 0.1)
    assert res.iterations_used == 7


def test_solver_failure_carries_iterate():
    calls = {"n": 0}

    def r(X):
        calls["n"] += 1
        return float("nan") if calls["n"] > 3 else float(X.sum())

    spec = RewardSpec(r, lambda X: np.ones_like(X), "gradient")
    with pytest.raises(SolverError) as info:
        solve_shift_gradient(spec, np.zeros((2, 2)), 1.0)
    assert info.value.iterate is not None and info.value.iterate.shape == (2, 2)


def test_non_finite_gradient_is_a_solver_failure():
    spec = RewardSpec(lambda X: 0.0, lambda X: np.full_like(X, np.inf), "gradient")
    with pytest.raises(SolverError):
        solve_shift_gradient(spec, np.zeros((2, 2)), 1.0)


def test_annealing_non_finite_reward():
    with pytest.raises(SolverError):
        solve_shift_annealing(RewardSpec(lambda X: float("inf"), solver="annealing"), np.zeros((2, 2)), 1.0)


def test_annealing_flat_reward():
    res = solve_shift_annealing(RewardSpec(lambda X: 2.0, solver="annealing"), np.zeros((3, 2)), 1.0)
    assert res.reward_after == res.reward_before == 2.0


def mean_x_indicator(X):
    return 1.0 if X[:, 0].mean() > 0 else 0.0


def test_annealing_escapes_indicator_plateau():
    X = np.zeros((10, 2))
    X[:, 0] = -0.05
    wins = 0
    for seed in range(100):
        spec = RewardSpec(mean_x_indicator, solver="annealing", seed=seed)
        wins += solve_shift_annealing(spec, X, 1.0).reward_after == 1.0
    assert wins >= 99


def test_annealing_is_seed_deterministic():
    r, _ = quadratic(np.ones((3, 2)))
    X = np.zeros((3, 2))
    a = solve_shift_annealing(RewardSpec(r, solver="annealing", seed=4), X, 0.7)
    b = solve_shift_annealing(RewardSpec(r, solver="annealing", seed=4), X, 0.7)
    assert np.array_equal(a.eps_star, b.eps_star)
    c = solve_shift_annealing(RewardSpec(r, solver="annealing", seed=5), X, 0.7)
    assert not np.array_equal(a.eps_star, c.eps_star)


def test_annealing_agrees_with_gradient_on_quadratics():
    # four coordinates; the default proposal budget gets looser as the dimension grows
    rng = np.random.default_rng(3)
    for _ in range(20):
        d = rng.uniform(0.5, 2.0)
        X = rng.standard_normal((2, 2))
        c = X + rng.uniform(0.2, 2.0) * d * rng.standard_normal((2, 2)) / 2.0
        r, g = quadratic(c)
        grad_res = solve_shift_gradient(RewardSpec(r, g, "gradient", steps=200), X, d)
        ann_res = solve_shift_annealing(RewardSpec(r, solver="annealing", seed=int(rng.integers(1000))), X, d)
        assert abs(grad_res.reward_after - ann_res.reward_after) <= 0.05 * d


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 3.0), st.sampled_from(["gradient", "annealing"]))
def test_solver_invariants(seed, d, solver):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((5, 2))
    r, g = quadratic(rng.standard_normal((5, 2)))
    spec = RewardSpec(r, g, solver, proposals=100, seed=seed)
    _, res = payoff_sample(spec, X, d)
    assert np.linalg.norm(res.eps_star) <= d + 1e-9
    assert res.reward_after >= res.reward_before - 1e-12


def test_payoff_without_solver_is_identity():
    X = np.random.default_rng(0).standard_normal((4, 2))
    out, res = payoff_sample(RewardSpec(lambda X: 1.5), X, 1.0)
    assert np.array_equal(out, X) and res.reward_after == 1.5


def test_payoff_reaches_interior_quadratic_optimum():
    c = np.array([[0.1, 0.2], [0.0, -0.1]])
    r, g = quadratic(c)
    out, _ = payoff_sample(RewardSpec(r, g, "gradient"), np.zeros((2, 2)), 2.5)
    np.testing.assert_allclose(out, c, atol=1e-9)


def test_payoff_needs_a_radius():
    r, g = quadratic(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        payoff_sample(RewardSpec(r, g, "gradient"), np.zeros((1, 2)))


def test_region_indicator_counts_fraction():
    r = RegionIndicator([0, 0], [1, 1])
    X = np.array([[0.5, 0.5], [1.0, 1.0], [2.0, 0.5], [-0.1, 0.2]])
    assert r(X) == 0.5


def test_halfplane_margin_value():
    r = HalfplaneMargin([2.0, 0.0], 2.0)
    X = np.array([[3.0, 7.0], [-1.0, 2.0]])
    assert r(X) == pytest.approx(0.0)
    assert r(X + [1.0, 0.0]) == pytest.approx(1.0)


def fd_grad(f, X, h=1e-6):
    g = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        Xp, Xm = X.copy(), X.copy()
        Xp[idx] += h
        Xm[idx] -= h
        g[idx] = (f(Xp) - f(Xm)) / (2 * h)
    return g


@pytest.mark.parametrize(
    "reward",
    [HalfplaneMargin([1.0, -2.0], 0.3), NegChamferToTemplate(np.random.default_rng(9).standard_normal((5, 2)))],
    ids=["halfplane", "chamfer"],
)
def test_builtin_gradients_match_finite_differences(reward):
    X = np.random.default_rng(10).standard_normal((6, 2))
    np.testing.assert_allclose(reward.grad(X), fd_grad(reward, X), atol=1e-7)


def test_neg_chamfer_is_zero_on_template():
    T = np.random.default_rng(11).standard_normal((7, 2))
    assert NegChamferToTemplate(T)(T) == 0.0


@pytest.mark.parametrize(
    "name,params,has_grad",
    [
        ("region_indicator", {"low": [0, 0], "high": [1, 1]}, False),
        ("halfplane_margin", {"normal": [1, 0]}, True),
        ("neg_chamfer_to_template", {"template": [[0, 0], [1, 1]]}, True),
        ("zero", {}, True),
    ],
)
def test_make_reward(name, params, has_grad):
    r, g = make_reward(name, params)
    X = np.zeros((3, 2))
    assert math.isfinite(r(X))
    assert (g is not None) == has_grad


def test_make_reward_unknown():
    with pytest.raises(KeyError):
        make_reward("qed", {})
