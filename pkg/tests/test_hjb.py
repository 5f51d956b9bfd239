import numpy as np
import pytest

from mfglearn.errors import ConstraintError, DomainError
from mfglearn.hjb import (
    PolicyField,
    ValueField,
    apply_coefficients,
    build_generator,
    build_perceived_generator,
    coefficients_to_sparse,
    generator_coefficients,
    hamiltonian,
    hjb_backward_step,
    optimal_consumption,
    solve_hjb_path,
    solve_shifted,
    solve_stationary_hjb,
    stationary_residual,
)
from mfglearn.model import ModelParams, OUIncome, StateGrid, utility


@pytest.mark.parametrize("lam, crra, expected", [(4.0, 2.0, 0.5), (1.0, 2.0, 1.0), (1.0, 5.0, 1.0), (4.0, 1.0, 0.25)])
def test_foc(lam, crra, expected):
    assert optimal_consumption(lam, crra) == pytest.approx(expected, rel=1e-15)


def test_foc_rejects_nonpositive():
    with pytest.raises(DomainError):
        optimal_consumption(0.0, 2.0)


def test_hamiltonian_examples():
    # resources 1 at (a, y) = (0, 1) with wage 1
    assert hamiltonian((0.0, 1.0), 4.0, (0.03, 1.0), 2.0) == pytest.approx(0.0, abs=1e-15)
    lam = 2.3
    c = optimal_consumption(lam, 2.0)
    assert hamiltonian((0.0, c), lam, (0.0, 1.0), 2.0) == pytest.approx(float(utility(c, 2.0)), rel=1e-15)


def test_hamiltonian_dominates_brute_force(rng):
    for _ in range(50):
        a, y = rng.uniform(0, 20), rng.uniform(0.2, 2)
        p = (rng.uniform(0, 0.05), rng.uniform(0.1, 2))
        lam = rng.uniform(0.05, 5)
        crra = rng.choice([1.0, 2.0, 3.5])
        H = hamiltonian((a, y), lam, p, crra)
        res = p[0] * a + p[1] * y
        cs = rng.uniform(1e-3, 10, size=100)
        brute = utility(cs, crra) + lam * (res - cs)
        assert np.all(H >= brute - 1e-12)


def _grid(n_a=11, a_max=10.0, income=(0.5, 1.5)):
    return StateGrid(np.linspace(0, a_max, n_a), np.array(income))


def test_pure_diffusion_stencil():
    params = ModelParams(nu=0.3)
    g = _grid()
    h = g.wealth_nodes[1]
    op = build_generator(PolicyField(np.ones(g.shape), np.zeros(g.shape)), g, params)
    A = op.matrix.toarray()
    n_y = 2
    i = 5 * n_y  # interior wealth node, low income
    expected = np.array([1.0, -2.0, 1.0]) * params.nu / h**2
    np.testing.assert_allclose(A[i, [i - n_y, i, i + n_y]] - [0, -0.25, 0], expected, rtol=1e-14)
    assert A[i, i + 1] == 0.25


def test_upwind_drift_stencil():
    params = ModelParams()
    g = _grid()
    h = g.wealth_nodes[1]
    s = np.zeros(g.shape)
    s[4, 1] = 0.7
    s[6, 0] = -0.2
    A = build_generator(PolicyField(np.ones(g.shape), s), g, params).matrix.toarray()
    i = 4 * 2 + 1
    assert A[i, i + 2] == pytest.approx(0.7 / h, rel=1e-15)
    assert A[i, i - 2] == 0.0
    j = 6 * 2
    assert A[j, j - 2] == pytest.approx(0.2 / h, rel=1e-15)
    assert A[j, j + 2] == 0.0


@pytest.mark.parametrize("params", [ModelParams(), ModelParams(nu=0.05), ModelParams(nu=0.01, income=OUIncome())])
def test_generator_rows_and_signs(params, rng):
    g = StateGrid(np.sort(np.r_[0.0, rng.uniform(0, 30, 40)]), params.income.nodes())
    s = rng.normal(size=g.shape)
    s[0] = np.abs(s[0])
    s[-1] = -np.abs(s[-1])
    op = build_generator(PolicyField(np.ones(g.shape), s), g, params)
    assert np.max(np.abs(op.row_sums())) < 1e-14 * max(1.0, abs(op.matrix).max())
    assert op.offdiagonal_min() >= 0


def test_constraint_violation():
    g = _grid()
    s = np.zeros(g.shape)
    s[0, 0] = -0.1
    with pytest.raises(ConstraintError):
        build_generator(PolicyField(np.ones(g.shape), s), g, ModelParams())


def test_matrix_free_matches_assembled(rng):
    params = ModelParams(nu=0.02)
    g = _grid(30)
    s = rng.normal(size=g.shape)
    s[0] = 0.1
    s[-1] = -0.1
    coeffs = generator_coefficients(s, g, params)
    A = coefficients_to_sparse(coeffs, g)
    U = rng.normal(size=g.shape)
    np.testing.assert_allclose(apply_coefficients(coeffs, U).ravel(), A @ U.ravel(), atol=1e-12)


@pytest.mark.parametrize("transpose", [False, True])
def test_banded_solve_matches_sparse(transpose, rng):
    params = ModelParams(nu=0.01, income=OUIncome(n_y=5))
    g = StateGrid(np.linspace(0, 10, 25), params.income.nodes())
    s = rng.normal(size=g.shape)
    s[0] = np.abs(s[0])
    s[-1] = -np.abs(s[-1])
    coeffs = generator_coefficients(s, g, params)
    A = coefficients_to_sparse(coeffs, g)
    M = 3.0 * np.eye(g.size) - (A.T if transpose else A).toarray()
    rhs = rng.normal(size=g.shape)
    ref = np.linalg.solve(M, rhs.ravel())
    np.testing.assert_allclose(solve_shifted(coeffs, 3.0, rhs, transpose).ravel(), ref, rtol=1e-12, atol=1e-12)


def test_banded_solve_stacked_cells(rng):
    params = ModelParams()
    g = _grid(20)
    s = rng.normal(size=(3,) + g.shape)
    s[:, 0] = np.abs(s[:, 0])
    s[:, -1] = -np.abs(s[:, -1])
    coeffs = generator_coefficients(s, g, params)
    rhs = rng.normal(size=s.shape)
    stacked = solve_shifted(coeffs, 2.0, rhs)
    for k in range(3):
        single = {key: v[k] for key, v in coeffs.items()}
        np.testing.assert_allclose(stacked[k], solve_shifted(single, 2.0, rhs[k]), rtol=1e-13)


def test_perceived_equals_actual_when_beliefs_correct(rng):
    params = ModelParams(nu=0.03)
    g = _grid(15)
    s = rng.normal(size=g.shape)
    s[0], s[-1] = 0.2, -0.2
    pol = PolicyField(np.ones(g.shape), s)
    actual = build_generator(pol, g, params).matrix.toarray()
    perceived = build_perceived_generator(lambda x, q: q.drift, lambda x, q: params.nu, pol, g, params)
    np.testing.assert_array_equal(perceived.matrix.toarray(), actual)


def test_perceived_drift_shift():
    params = ModelParams()
    g = _grid(15)
    h = g.wealth_nodes[1]
    s = np.full(g.shape, 0.3)
    s[-1] = 0.0
    pol = PolicyField(np.ones(g.shape), s)
    A = build_perceived_generator(lambda x, q: q.drift + 0.1, lambda x, q: 0.0, pol, g, params).matrix
    np.testing.assert_allclose(A.toarray()[4, 6], 0.4 / h, rtol=1e-14)
    assert np.max(np.abs(np.asarray(A.sum(axis=1)))) < 1e-14


def test_perceived_negative_diffusion():
    g = _grid()
    pol = PolicyField(np.ones(g.shape), np.zeros(g.shape))
    with pytest.raises(DomainError):
        build_perceived_generator(lambda x, q: 0.0, lambda x, q: -0.1, pol, g, ModelParams())


# --- stationary problem -----------------------------------------------------


def test_stationary_residual_and_shape(steady, grid, params):
    V = steady.value.values
    res = stationary_residual(V, steady.prices, grid, params)
    assert np.max(np.abs(res[1:-1])) < 1e-8
    d1 = np.diff(V, axis=0)
    d2 = np.diff(V, 2, axis=0)
    assert d1.min() >= -1e-8
    assert d2.max() <= 1e-8
    assert np.all(steady.policy.consumption > 0)
    assert np.all(steady.policy.drift[0] >= 0)


def test_top_node_not_forced_to_dissave(steady, grid):
    # the saving type at the top consumes no more than its resources
    c = steady.policy.consumption[-1]
    res = grid.resources(steady.prices)[-1]
    saving = steady.policy.drift[-2] >= 0
    assert np.all(c[saving] <= res[saving] + 1e-12)


def test_refinement_changes_value_at_first_order(params):
    p = np.array([0.04, 0.12])
    vals = []
    for n_a in (101, 201, 401):
        g = StateGrid.build(params, a_max=25.0, n_a=n_a)
        V = solve_stationary_hjb(p, g, params)[0].values
        step = (n_a - 1) // 100
        vals.append(V[::step])
    e1 = np.max(np.abs(vals[1] - vals[0]))
    e2 = np.max(np.abs(vals[2] - vals[1]))
    # successive differences shrink like the grid step
    assert 0.3 < e2 / e1 < 0.7


def test_stationary_value_is_backward_fixed_point(steady, grid, params):
    u_s, _ = hjb_backward_step(steady.value, steady.prices, 0.5, grid, params)
    assert np.max(np.abs(u_s.values - steady.value.values)) < 1e-10


def test_myopic_limit(steady, grid):
    # the continuation term u_next / dt must be negligible next to the reward
    params = ModelParams(rho=1e6)
    u_s, pol = hjb_backward_step(steady.value, steady.prices, 1e7, grid, params)
    R = utility(pol.consumption, params.crra)
    np.testing.assert_allclose(u_s.values, R / params.rho, rtol=1e-4)


def test_comparison_principle(steady, grid, params, rng):
    a = grid.wealth_nodes[:, None]
    for _ in range(20):
        # smooth nonnegative perturbation that keeps both inputs concave
        amp = rng.uniform(0, 1.0, size=2)
        bump = amp * np.exp(-rng.uniform(0.01, 0.2) * a) + rng.uniform(0, 0.5)
        uA = steady.value.values
        uB = uA - bump
        sA, _ = hjb_backward_step(ValueField(uA), steady.prices, 0.5, grid, params)
        sB, _ = hjb_backward_step(ValueField(uB), steady.prices, 0.5, grid, params)
        assert np.all(sA.values >= sB.values - 1e-12)


def test_path_turnpike(steady, grid, params):
    dt = 10.0
    n = int(50 / params.rho / dt)
    start = ValueField(steady.value.values + 5.0)
    values, _ = solve_hjb_path(np.tile(steady.prices, (n, 1)), start, grid, params, dt)
    assert np.max(np.abs(values[0] - steady.value.values)) < 1e-6


def test_path_of_length_one(steady, grid, params):
    term = ValueField(steady.value.values * 1.01)
    p = steady.prices * 1.02
    values, pols = solve_hjb_path(p[None, :], term, grid, params)
    single, pol = hjb_backward_step(term, p, params.dt, grid, params)
    np.testing.assert_array_equal(values[0], single.values)
    np.testing.assert_array_equal(pols.consumption[0], pol.consumption)


def test_terminal_contraction(steady, grid, params, rng):
    n = 40
    prices = steady.prices * (1 + 0.05 * np.sin(np.arange(n))[:, None])
    VA = steady.value.values
    for _ in range(5):
        VB = VA + rng.uniform(-1, 1) + 0.1 * rng.normal(size=grid.shape).cumsum(axis=0) / 10
        pathA, _ = solve_hjb_path(prices, ValueField(VA), grid, params)
        pathB, _ = solve_hjb_path(prices, ValueField(VB), grid, params)
        gap = np.max(np.abs(VA - VB))
        for k in range(n + 1):
            factor = (1 + params.rho * params.dt) ** -(n - k)
            assert np.max(np.abs(pathA[k] - pathB[k])) <= factor * gap * (1 + 1e-10)
