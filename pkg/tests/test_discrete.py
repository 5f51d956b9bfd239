import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfglearn.beliefs import BeliefState, LearningRule
from mfglearn.discrete import (
    DiscreteModel,
    Histogram,
    PerceivedPriceKernel,
    SimplexGrid,
    bellman_backward,
    chapman_step,
    equilibrium_tree,
    induced_price_kernel,
    master_oracle,
    mrp_value_bruteforce,
    mrp_value_montecarlo,
    quantile_price_grid,
    run_discrete_learning,
    stationary_histogram,
    toy_model,
)
from mfglearn.errors import BudgetError, DomainError

M0 = np.array([0.6, 0.4])


def test_rejects_non_stochastic_kernel():
    model = toy_model()
    bad = model.x_kernel.copy()
    bad[0, 0, 0] = [0.5, 0.6]
    with pytest.raises(DomainError):
        DiscreteModel(model.z_kernel, bad, model.reward_coef, model.terminal_coef, model.price_intercept, model.price_weights)


def test_histogram_validation():
    with pytest.raises(DomainError):
        Histogram([0.5, 0.6])
    with pytest.raises(DomainError):
        Histogram([1.2, -0.2])


# ---------------------------------------------------------------------------
# backward induction


def _fixed_price_mdp(model, z_kernel, p, T):
    """Plain loops over a constant price."""
    V = np.array([model.terminal(z, p) for z in range(model.n_z)])
    for _ in range(T):
        new = np.empty_like(V)
        for z in range(model.n_z):
            R = model.reward(z, p)
            for x in range(model.n_x):
                best = -np.inf
                for a in range(model.n_act):
                    cont = sum(
                        z_kernel[z, w] * model.x_kernel[z, a, x, y] * V[w, y] for w in range(model.n_z) for y in range(model.n_x)
                    )
                    best = max(best, R[x, a] + model.discount * cont)
                new[z, x] = best
        V = new
    return V


def test_zero_horizon_is_terminal():
    model = toy_model()
    grid = np.linspace(0.3, 1.3, 5)
    sol = bellman_backward(model, PerceivedPriceKernel("degenerate", grid), horizon=0)
    for z in range(2):
        assert np.array_equal(sol.values[0, z], model.terminal(z, grid))


def test_no_discount_is_myopic():
    from dataclasses import replace

    model = replace(toy_model(), discount=0.0)
    grid = np.linspace(0.3, 1.3, 7)
    sol = bellman_backward(model, PerceivedPriceKernel("degenerate", grid))
    for z in range(2):
        assert np.array_equal(sol.policy[:, z], np.broadcast_to(np.argmax(model.reward(z, grid), axis=-1), sol.policy[:, z].shape))


def test_matches_policy_enumeration():
    model = toy_model(n_z=1, horizon=2)
    p = 0.9
    sol = bellman_backward(model, PerceivedPriceKernel("degenerate", [p]))
    R = model.reward(0, p)
    best = np.full(2, -np.inf)
    for assign in itertools.product(range(2), repeat=4):
        pol = np.array(assign).reshape(2, 2)  # (t, x)
        V = model.terminal(0, p)
        for t in (1, 0):
            V = np.array([R[x, pol[t, x]] + model.discount * model.x_kernel[0, pol[t, x], x] @ V for x in range(2)])
        best = np.maximum(best, V)
    np.testing.assert_allclose(sol.values[0, 0, 0], best, rtol=0, atol=1e-14)


def test_degenerate_kernel_is_fixed_price_mdp():
    model = toy_model(horizon=4)
    grid = np.linspace(0.3, 1.3, 5)
    sol = bellman_backward(model, PerceivedPriceKernel("degenerate", grid))
    for j, p in enumerate(grid):
        ref = _fixed_price_mdp(model, model.z_kernel, p, 4)
        np.testing.assert_allclose(sol.values[0, :, j], ref, rtol=0, atol=1e-13)


def test_stochastic_mode_spreads_over_ties():
    model = toy_model(variant="linear", n_z=1, horizon=1)
    # equal rewards across actions make every state a tie
    from dataclasses import replace

    R = model.reward_coef.copy()
    R[..., 1] = R[..., 0]
    model = replace(model, reward_coef=R)
    k = PerceivedPriceKernel("degenerate", [0.8])
    det = bellman_backward(model, k)
    sto = bellman_backward(model, k, stochastic=True)
    assert np.all(det.policy == 0)
    np.testing.assert_array_equal(sto.probs, 0.5)
    np.testing.assert_array_equal(det.values, sto.values)


@pytest.mark.parametrize("kind,theta,sigma", [("level", [0.7], 0.0), ("var", [0.2, 0.7, 0.05], 0.0), ("var", [0.2, 0.7, 0.05], 0.1)])
def test_kernels_are_stochastic(kind, theta, sigma):
    model = toy_model()
    K = PerceivedPriceKernel(kind, np.linspace(0.2, 1.4, 9), sigma=sigma).joint(model, theta)
    assert np.all(K >= 0)
    np.testing.assert_allclose(K.sum(axis=(-2, -1)), 1.0, atol=1e-14)


def test_quantile_grid_covers_sample():
    x = np.random.default_rng(1).normal(size=500)
    g = quantile_price_grid(x, 11)
    assert g[0] == x.min() and g[-1] == x.max() and g.size == 11


# ---------------------------------------------------------------------------
# histogram dynamics


def test_doubly_stochastic_keeps_uniform():
    model = toy_model(variant="mrp", n_z=1)
    from dataclasses import replace

    model = replace(model, x_kernel=np.array([[[[0.3, 0.7], [0.7, 0.3]]]]))
    out = chapman_step(Histogram([0.5, 0.5]), np.zeros(2, dtype=int), 0, model)
    np.testing.assert_array_equal(out.probs, [0.5, 0.5])


def test_point_mass_follows_deterministic_map():
    model = toy_model(n_z=1)
    from dataclasses import replace

    swap = np.array([[[[0.0, 1.0], [1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]]]])
    model = replace(model, x_kernel=swap)
    assert np.array_equal(chapman_step(Histogram([1.0, 0.0]), np.array([0, 0]), 0, model).probs, [0.0, 1.0])
    assert np.array_equal(chapman_step(Histogram([1.0, 0.0]), np.array([1, 1]), 0, model).probs, [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0.01, 1.0), min_size=2, max_size=2),
    st.lists(st.floats(0.0, 1.0), min_size=2, max_size=2),
    st.integers(0, 1),
)
def test_step_preserves_mass(w, mix, z):
    m = np.array(w) / np.sum(w)
    pol = np.column_stack([1.0 - np.array(mix), mix])
    out = chapman_step(m, pol, z, toy_model())
    assert abs(out.probs.sum() - 1.0) <= 1e-14


# ---------------------------------------------------------------------------
# histogram-as-state oracle


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 3), st.lists(st.floats(-2, 2), min_size=4, max_size=4), st.integers(0, 10_000))
def test_simplex_interpolation_reproduces_affine(n_x, coef, seed):
    g = SimplexGrid(n_x, 11)
    a = np.array(coef[:n_x])
    m = np.random.default_rng(seed).dirichlet(np.ones(n_x), 50)
    got = g.interpolate(g.nodes @ a + coef[3], m)
    np.testing.assert_allclose(got, m @ a + coef[3], rtol=0, atol=1e-13)


def test_oracle_zero_horizon_is_terminal():
    from dataclasses import replace

    model = replace(toy_model(), horizon=0)
    sol = master_oracle(model, 11)
    for z in range(2):
        assert np.array_equal(sol.values[0, z], model.terminal(z, model.price(sol.simplex.nodes, z)))


def test_oracle_rejects_large_state_space():
    with pytest.raises(DomainError):
        SimplexGrid(4, 11)
    with pytest.raises(DomainError):
        SimplexGrid(2, 5)


def _tree_gap(variant, resolution):
    model = toy_model(variant)
    oracle = master_oracle(model, resolution)
    tree = equilibrium_tree(model, oracle, M0, 0)
    sol = bellman_backward(model, induced_price_kernel(model, tree))
    gap = 0.0
    for k in range(tree.t.size):
        t, z = tree.t[k], tree.z[k]
        gap = max(gap, float(np.max(np.abs(sol.values[t, z, k] - oracle.value_at(t, z, tree.m[k])))))
    return gap, oracle


def test_linear_economy_recovers_exactly():
    gap, oracle = _tree_gap("linear", 101)
    assert gap < 1e-12
    assert oracle.unsettled.sum() == 0


def test_controlled_economy_recovers_within_interpolation_error():
    gap, _ = _tree_gap("controlled", 101)
    assert gap < 1e-3


def test_tree_probabilities_sum_to_one():
    model = toy_model()
    tree = equilibrium_tree(model, master_oracle(model, 21), M0, 1)
    for t in range(model.horizon + 1):
        assert abs(tree.prob[tree.t == t].sum() - 1.0) < 1e-14


def test_coarse_lattice_warns():
    with pytest.warns(UserWarning, match="too coarse"):
        sol = master_oracle(toy_model("mrp"), 21, tolerance=1e-9)
    assert sol.error_estimate > 1e-9


# ---------------------------------------------------------------------------
# reward processes


def test_mrp_single_aggregate_state_is_deterministic_sum():
    model = toy_model("mrp", n_z=1, horizon=4)
    m = M0.copy()
    total, disc = np.zeros(2), 1.0
    D = np.eye(2)
    for t in range(4):
        total += disc * D @ model.reward(0, model.price(m, 0))[:, 0]
        A = model.x_kernel[0, 0]
        m, D, disc = m @ A, D @ A, disc * model.discount
    total += disc * D @ model.terminal(0, model.price(m, 0))
    np.testing.assert_allclose(mrp_value_bruteforce(model, M0, 0), total, rtol=0, atol=1e-14)


def test_mrp_two_branch_tree():
    from dataclasses import replace

    model = toy_model("mrp", horizon=1)
    # make reward and terminal independent of the individual state
    R = np.repeat(model.reward_coef[:, :, 1:, :], 2, axis=2)
    V = np.repeat(model.terminal_coef[:, :, 1:], 2, axis=2)
    model = replace(model, reward_coef=R, terminal_coef=V)
    m1 = M0 @ model.x_kernel[0, 0]
    hand = model.reward(0, model.price(M0, 0))[0, 0] + model.discount * sum(
        model.z_kernel[0, w] * model.terminal(w, model.price(m1, w))[0] for w in range(2)
    )
    assert mrp_value_bruteforce(model, M0, 0, x0=0) == pytest.approx(hand, abs=1e-14)


def test_mrp_oracle_exact_when_linear():
    model = toy_model("mrp_linear", horizon=6)
    oracle = master_oracle(model, 101)
    np.testing.assert_allclose(oracle.value_at(0, 0, M0), mrp_value_bruteforce(model, M0, 0), rtol=0, atol=1e-12)


def test_mrp_oracle_converges_at_second_order():
    model = toy_model("mrp", horizon=6)
    coarse, mid, fine = (master_oracle(model, r) for r in (51, 101, 201))
    d_coarse = np.max(np.abs(mid.values[:, :, mid.simplex.lookup[2 * coarse.simplex.cum[:, 0]]] - coarse.values))
    d_fine = np.max(np.abs(fine.values[:, :, fine.simplex.lookup[2 * mid.simplex.cum[:, 0]]] - mid.values))
    assert 3.0 < d_coarse / d_fine < 5.0


def test_mrp_oracle_error_within_self_convergence_tolerance():
    model = toy_model("mrp", horizon=6)
    mid, fine = master_oracle(model, 101), master_oracle(model, 201)
    for z in range(2):
        for w in np.linspace(0.0, 1.0, 17):
            m = np.array([w, 1.0 - w])
            err = np.abs(mid.value_at(0, z, m) - mrp_value_bruteforce(model, m, z))
            tol = 2.0 * np.abs(mid.value_at(0, z, m) - fine.value_at(0, z, m))
            assert np.all(err <= tol + 1e-14)


def test_montecarlo_agrees_with_enumeration():
    model = toy_model("mrp", horizon=5)
    exact = mrp_value_bruteforce(model, M0, 1, x0=0)
    mean, se = mrp_value_montecarlo(model, M0, 1, 0, 4000, seed=3)
    assert abs(mean - exact) < 3 * se


def test_enumeration_budget():
    with pytest.raises(BudgetError, match="montecarlo"):
        mrp_value_bruteforce(toy_model("mrp", horizon=30), M0, 0)


def test_mrp_requires_no_choice():
    with pytest.raises(DomainError):
        mrp_value_bruteforce(toy_model(), M0, 0)


# ---------------------------------------------------------------------------
# learning


@pytest.fixture(scope="module")
def level_kernel():
    return PerceivedPriceKernel("level", np.linspace(0.2, 1.4, 25))


def test_stationary_start_with_consistent_beliefs_stays(level_kernel):
    model = toy_model(n_z=1, horizon=10)
    m, p, theta = stationary_histogram(model, level_kernel)
    tr = run_discrete_learning(model, m, BeliefState(theta), LearningRule("decreasing_gain"), 30, level_kernel)
    assert np.max(np.abs(tr.prices - p)) < 1e-12
    assert np.max(np.abs(tr.densities - m.probs)) < 1e-12
    assert tr.diagnostics["cache_solves"] == 1


def test_learning_is_deterministic(level_kernel):
    model = toy_model(horizon=5)
    run = lambda: run_discrete_learning(
        model, M0, BeliefState([0.5]), LearningRule("constant_gain", gain=0.3), 40, level_kernel, seed=9
    )
    a, b = run(), run()
    assert np.array_equal(a.prices, b.prices) and np.array_equal(a.beliefs, b.beliefs)
    assert np.array_equal(a.diagnostics["z"], b.diagnostics["z"])
    assert a.diagnostics["z"].std() > 0


def test_least_squares_learns_constant_price(level_kernel):
    from dataclasses import replace

    # price does not respond to the histogram
    model = replace(toy_model(n_z=1, horizon=5), price_weights=np.zeros((1, 2)))
    pbar = model.price_intercept[0]
    tr = run_discrete_learning(model, M0, BeliefState([0.3]), LearningRule("recursive_least_squares", t0=2.0), 64, level_kernel)
    dev = np.abs(tr.beliefs[:, 0] - pbar)
    for t in (4, 8, 16, 32):
        assert dev[2 * t] <= 0.75 * dev[t]


def test_var_beliefs_run(level_kernel):
    model = toy_model(horizon=4)
    kernel = PerceivedPriceKernel("var", level_kernel.grid, sigma=0.05)
    tr = run_discrete_learning(model, M0, BeliefState([0.5, 0.3, 0.0]), LearningRule("recursive_least_squares"), 30, kernel, seed=2)
    assert np.all(np.isfinite(tr.beliefs))
    assert np.all(np.abs(tr.densities.sum(axis=1) - 1.0) < 1e-14)
