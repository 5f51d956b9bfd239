import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfglearn.errors import DomainError, ShapeError
from mfglearn.model import (
    Density,
    ModelParams,
    OUIncome,
    StateGrid,
    TwoStateIncome,
    aggregate_moments,
    market_clearing_residual,
    price_functional,
    production,
    wage_on_frontier,
)


def unit_params():
    return ModelParams(production_scale=1.0)


def two_node_grid(values):
    return StateGrid(np.array(values, dtype=float), np.array([1.0, 2.0]))


def test_point_mass_moments():
    g = StateGrid(np.array([0.0, 1.0, 2.0, 3.0]), np.array([1.0, 2.0]))
    m = Density.point_mass(g, 2, 0)
    assert aggregate_moments(m, g) == (2.0, 1.0)


def test_two_node_uniform_moments():
    g = two_node_grid([0.0, 4.0])
    mass = np.zeros((2, 2))
    mass[0, 0] = mass[1, 0] = 0.5
    assert aggregate_moments(Density(mass), g) == (2.0, 1.0)


def test_moment_shape_mismatch():
    g = two_node_grid([0.0, 4.0])
    g3 = StateGrid(np.array([0.0, 1.0, 4.0]), np.array([1.0, 2.0]))
    with pytest.raises(ShapeError):
        aggregate_moments(Density.point_mass(g3, 0, 0), g)


@pytest.mark.parametrize(
    "K, L, z, expected",
    [
        (1.0, 1.0, 0.0, (1.0, 0.5, 0.5)),
        (4.0, 1.0, 0.0, (2.0, 0.25, 1.0)),
        (1.0, 1.0, np.log(4.0), (4.0, 2.0, 2.0)),
    ],
)
def test_production_values(K, L, z, expected):
    np.testing.assert_allclose(production(K, L, z), expected, rtol=1e-14)


@pytest.mark.parametrize("K, L", [(0.0, 1.0), (1.0, 0.0), (-1.0, 2.0)])
def test_production_domain(K, L):
    with pytest.raises(DomainError):
        production(K, L)


@given(
    st.floats(1e-3, 1e3),
    st.floats(1e-3, 1e3),
    st.floats(-2, 2),
)
def test_euler_homogeneity(K, L, z):
    out, fk, fl = production(K, L, z)
    assert abs(K * fk + L * fl - out) <= 1e-12 * out


@given(st.floats(1e-2, 1e2), st.floats(0.1, 10), st.floats(-1, 1), st.floats(0.05, 2))
def test_factor_price_frontier(K, L, z, scale):
    _, fk, fl = production(K, L, z, scale)
    np.testing.assert_allclose(wage_on_frontier(fk, z, scale), fl, rtol=1e-12)


def _density_with_moments(K, L):
    # two wealth nodes {0, 2K} and income nodes {L/2, 3L/2}
    g = StateGrid(np.array([0.0, 2 * K]), np.array([0.5 * L, 1.5 * L]))
    return Density(np.full((2, 2), 0.25)), g


@pytest.mark.parametrize(
    "K, L, z, expected",
    [(1.0, 1.0, 0.0, (0.5, 0.5)), (4.0, 1.0, 0.0, (0.25, 1.0)), (1.0, 1.0, np.log(4.0), (2.0, 2.0))],
)
def test_price_functional_values(K, L, z, expected):
    m, g = _density_with_moments(K, L)
    np.testing.assert_allclose(price_functional(m, z, g, unit_params()), expected, rtol=1e-14)


def test_price_functional_degenerate():
    g = two_node_grid([0.0, 4.0])
    with pytest.raises(DomainError):
        price_functional(Density.point_mass(g, 0, 0), 0.0, g, unit_params())


def test_market_clearing_examples():
    m, g = _density_with_moments(1.0, 1.0)
    np.testing.assert_allclose(market_clearing_residual([0.5, 0.5], m, 0.0, g, unit_params()), 0.0, atol=1e-15)
    np.testing.assert_allclose(market_clearing_residual([1.0, 1.0], m, 0.0, g, unit_params()), 0.5, atol=1e-15)


def test_clearing_at_functional_is_zero(grid, params, rng):
    for _ in range(20):
        m = Density.from_unnormalized(rng.random(grid.shape))
        z = rng.normal()
        p = price_functional(m, z, grid, params)
        assert np.max(np.abs(market_clearing_residual(p, m, z, grid, params))) <= 1e-14


def test_moments_linear(grid, rng):
    m1 = Density.from_unnormalized(rng.random(grid.shape))
    m2 = Density.from_unnormalized(rng.random(grid.shape) ** 3)
    for alpha in (0.0, 0.3, 0.77, 1.0):
        mix = Density.from_unnormalized(alpha * m1.mass + (1 - alpha) * m2.mass)
        lhs = np.array(aggregate_moments(mix, grid))
        rhs = alpha * np.array(aggregate_moments(m1, grid)) + (1 - alpha) * np.array(aggregate_moments(m2, grid))
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12)


def test_density_validation(grid):
    with pytest.raises(DomainError):
        Density(np.full(grid.shape, 2.0 / grid.size))
    bad = np.zeros(grid.shape)
    bad[0, 0] = 1.5
    bad[1, 0] = -0.5
    with pytest.raises(DomainError):
        Density(bad)
    with pytest.raises(ShapeError):
        Density(np.ones(4) / 4)


def test_density_values_integrate_to_one(grid, rng):
    m = Density.from_unnormalized(rng.random(grid.shape))
    assert abs(np.sum(m.values(grid) * grid.weights) - 1.0) < 1e-12


def test_grid_validation():
    with pytest.raises(DomainError):
        StateGrid(np.array([0.1, 1.0]), np.array([1.0, 2.0]))
    with pytest.raises(DomainError):
        StateGrid(np.array([0.0, 1.0, 1.0]), np.array([1.0, 2.0]))
    with pytest.raises(DomainError):
        StateGrid(np.array([0.0, np.inf]), np.array([1.0, 2.0]))


def test_trapezoid_weights(grid):
    w = grid.wealth_weights
    assert np.all(w > 0)
    assert abs(w.sum() - grid.wealth_nodes[-1]) < 1e-12


def test_param_validation():
    with pytest.raises(DomainError):
        TwoStateIncome(rate_up=0.0)
    with pytest.raises(DomainError):
        OUIncome(kappa=0.0)
    with pytest.raises(DomainError):
        ModelParams(nu=-1.0)
    with pytest.raises(DomainError):
        ModelParams(dt=0.0)


def test_two_state_stationary_law():
    np.testing.assert_allclose(TwoStateIncome(rate_up=1.0, rate_down=3.0).stationary(), [0.75, 0.25])
