"""Model primitives: parameters, grids, densities and the price functional.

The state of an individual is ``x = (wealth, income)``. Arrays over the state
grid have shape ``(n_a, n_y)``; flattened vectors use C order, so the wealth
neighbour of a node sits ``n_y`` entries away and the income neighbour one
entry away.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class TwoStateIncome:
    """Continuous-time two-state income switching between ``y_lo`` and ``y_hi``.

    ``rate_up`` is the intensity of lo -> hi, ``rate_down`` of hi -> lo.
    """

    y_lo: float = 0.5
    y_hi: float = 1.5
    rate_up: float = 0.25
    rate_down: float = 0.25

    def __post_init__(self):
        if self.rate_up <= 0 or self.rate_down <= 0:
            raise DomainError("two-state switching rates must be strictly positive")
        if not 0 < self.y_lo < self.y_hi:
            raise DomainError("income levels must satisfy 0 < y_lo < y_hi")

    def nodes(self):
        return np.array([self.y_lo, self.y_hi])

    def stationary(self):
        tot = self.rate_up + self.rate_down
        return np.array([self.rate_down / tot, self.rate_up / tot])


@dataclass(frozen=True)
class OUIncome:
    """Mean-reverting income diffusion ``dy = kappa (mean - y) dt + sqrt(2 nu) dB``.

    Discretised on ``n_y`` equally spaced nodes spanning ``width`` stationary
    standard deviations either side of the mean, with reflecting ends.
    """

    kappa: float = 0.5
    mean: float = 1.0
    nu: float = 0.02
    n_y: int = 7
    width: float = 3.0

    def __post_init__(self):
        if self.kappa <= 0:
            raise DomainError("OU mean reversion kappa must be > 0")
        if self.nu < 0:
            raise DomainError("OU income nu must be >= 0")
        if self.n_y < 2:
            raise DomainError("OU income needs at least two nodes")

    def nodes(self):
        sd = np.sqrt(self.nu / self.kappa)
        lo = max(self.mean - self.width * sd, 1e-3 * self.mean)
        return np.linspace(lo, self.mean + self.width * sd, self.n_y)


@dataclass(frozen=True)
class ModelParams:
    """Economic parameters of the wealth-income model.

    ``nu`` is diffusion of wealth (zero in the standard savings problem),
    ``beta`` the common-noise intensity of the aggregate state and
    ``production_scale`` multiplies the production function.
    """

    rho: float = 0.05
    crra: float = 2.0
    nu: float = 0.0
    beta: float = 0.0
    horizon: float = 50.0
    dt: float = 0.5
    income: TwoStateIncome | OUIncome = field(default_factory=TwoStateIncome)
    production_scale: float = 0.15

    def __post_init__(self):
        if self.rho < 0:
            raise DomainError("rho must be >= 0")
        if self.crra <= 0:
            raise DomainError("crra must be > 0")
        if self.nu < 0:
            raise DomainError("nu must be >= 0")
        if self.beta < 0:
            raise DomainError("beta must be >= 0")
        if self.dt <= 0 or self.horizon <= 0:
            raise DomainError("dt and horizon must be > 0")
        if self.production_scale <= 0:
            raise DomainError("production_scale must be > 0")

    @property
    def n_steps(self):
        return int(round(self.horizon / self.dt))


def _trapezoid_weights(nodes):
    h = np.diff(nodes)
    w = np.zeros_like(nodes)
    w[:-1] += h / 2
    w[1:] += h / 2
    return w


@dataclass(frozen=True, eq=False)
class StateGrid:
    """Discretised individual state space plus optional aggregate axes."""

    wealth_nodes: np.ndarray
    income_nodes: np.ndarray
    z_nodes: Optional[np.ndarray] = None
    p_nodes: tuple = ()
    theta_nodes: tuple = ()

    def __post_init__(self):
        a = np.asarray(self.wealth_nodes, dtype=float)
        y = np.asarray(self.income_nodes, dtype=float)
        if a[0] != 0.0:
            raise DomainError("wealth grid must start at 0 (state constraint)")
        for name, arr in [("wealth", a), ("income", y)]:
            if arr.ndim != 1 or arr.size < 2 or np.any(np.diff(arr) <= 0):
                raise DomainError(f"{name} nodes must be strictly increasing")
        if not np.all(np.isfinite(a)):
            raise DomainError("wealth grid bounds must be finite")
        object.__setattr__(self, "wealth_nodes", a)
        object.__setattr__(self, "income_nodes", y)

    @classmethod
    def build(cls, params: ModelParams, a_max=50.0, n_a=200, **extra):
        return cls(np.linspace(0.0, a_max, n_a), params.income.nodes(), **extra)

    @property
    def shape(self):
        return (self.wealth_nodes.size, self.income_nodes.size)

    @property
    def size(self):
        return self.wealth_nodes.size * self.income_nodes.size

    @property
    def wealth_weights(self):
        return _trapezoid_weights(self.wealth_nodes)

    @property
    def weights(self):
        """Quadrature weight of every node: trapezoid in wealth, counting in income."""
        return np.repeat(self.wealth_weights[:, None], self.income_nodes.size, axis=1)

    def resources(self, prices):
        """Income flow ``r a + w y`` at every node; ``prices`` broadcasts as ``(..., 2)``."""
        prices = np.asarray(prices, dtype=float)
        r = prices[..., 0, None, None]
        w = prices[..., 1, None, None]
        return r * self.wealth_nodes[:, None] + w * self.income_nodes[None, :]


@dataclass(frozen=True, eq=False)
class Density:
    """Probability mass attached to each grid node.

    ``mass[i, j]`` is the probability of node ``(a_i, y_j)``. Dividing by the
    grid's quadrature weights gives the density values whose weighted sum is
    one.
    """

    mass: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=float)
        if m.ndim != 2:
            raise ShapeError("density mass must be a (n_a, n_y) array")
        if np.any(m < 0):
            raise DomainError("density mass must be nonnegative")
        if abs(m.sum() - 1.0) > 1e-10:
            raise DomainError(f"density mass sums to {m.sum():.16g}, not 1")
        object.__setattr__(self, "mass", m)

    @classmethod
    def from_unnormalized(cls, mass):
        m = np.clip(np.asarray(mass, dtype=float), 0.0, None)
        return cls(m / m.sum())

    @classmethod
    def point_mass(cls, grid, wealth_index, income_index):
        m = np.zeros(grid.shape)
        m[wealth_index, income_index] = 1.0
        return cls(m)

    def values(self, grid):
        """Density per unit wealth (mass over quadrature weight)."""
        return self.mass / grid.weights

    @property
    def total(self):
        return float(self.mass.sum())


def aggregate_moments(m: Density, grid: StateGrid):
    """Mean wealth and mean income of ``m``."""
    if m.mass.shape != grid.shape:
        raise ShapeError(f"density shape {m.mass.shape} does not match grid {grid.shape}")
    mean_wealth = float(np.sum(m.mass * grid.wealth_nodes[:, None]))
    mean_income = float(np.sum(m.mass * grid.income_nodes[None, :]))
    return mean_wealth, mean_income


def production(K, L, z=0.0, scale=1.0):
    """Output ``scale * e^z sqrt(K L)`` and its two marginal products."""
    K = np.asarray(K, dtype=float)
    L = np.asarray(L, dtype=float)
    if np.any(K <= 0) or np.any(L <= 0):
        raise DomainError("production needs K > 0 and L > 0")
    tfp = scale * np.exp(z)
    output = tfp * np.sqrt(K * L)
    return output, 0.5 * tfp * np.sqrt(L / K), 0.5 * tfp * np.sqrt(K / L)


def prices_from_aggregates(K, L, z=0.0, scale=1.0):
    _, mpk, mpl = production(K, L, z, scale)
    return np.stack([mpk, mpl], axis=-1)


def price_functional(m: Density, z, grid: StateGrid, params: ModelParams):
    """Interest rate and wage implied by the marginal products at ``m``'s moments."""
    K, L = aggregate_moments(m, grid)
    if K <= 0 or L <= 0:
        raise DomainError("degenerate aggregate: mean wealth and income must be > 0")
    return prices_from_aggregates(K, L, z, params.production_scale)


def market_clearing_residual(p, m: Density, z, grid: StateGrid, params: ModelParams):
    return np.asarray(p, dtype=float) - price_functional(m, z, grid, params)


def capital_from_rate(r, L, z=0.0, scale=1.0):
    """Invert the marginal product of capital: the ``K`` at which ``F_K = r``."""
    return L * (0.5 * scale * np.exp(z) / r) ** 2


def wage_on_frontier(r, z=0.0, scale=1.0):
    """Wage consistent with interest rate ``r`` under the production function.

    Marginal products of ``scale e^z sqrt(K L)`` satisfy ``r w = (scale e^z / 2)^2``.
    """
    return (0.5 * scale * np.exp(z)) ** 2 / r


def utility(c, crra):
    c = np.asarray(c, dtype=float)
    if crra == 1.0:
        return np.log(c)
    return c ** (1.0 - crra) / (1.0 - crra)


def marginal_utility(c, crra):
    return np.asarray(c, dtype=float) ** (-crra)
