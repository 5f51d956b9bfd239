"""Rational-expectations benchmarks: stationary equilibrium and transitions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .density import forward_step_array, stationary_density
from .errors import CalibrationError, ConvergenceError, NonUniquenessError
from .hjb import (
    PolicyField,
    TransitionOperator,
    ValueField,
    generator_coefficients,
    solve_hjb_path,
    solve_stationary_hjb,
)
from .model import (
    Density,
    ModelParams,
    StateGrid,
    TwoStateIncome,
    aggregate_moments,
    capital_from_rate,
    prices_from_aggregates,
)
from .trajectory import Trajectory

log = logging.getLogger(__name__)


@dataclass(eq=False)
class StationaryEquilibrium:
    prices: np.ndarray
    density: Density
    value: ValueField
    policy: PolicyField
    operator: TransitionOperator
    capital: float
    labor: float
    trace: list = field(default_factory=list)

    @property
    def clearing_residual(self):
        return self.trace[-1]["residual"] if self.trace else np.nan


def mean_income(grid: StateGrid, params: ModelParams):
    """Mean of the stationary income distribution on the grid."""
    inc = params.income
    if isinstance(inc, TwoStateIncome):
        return float(inc.stationary() @ grid.income_nodes)
    from .hjb import income_coefficients

    # stationary law of the discretised income chain alone
    y_up, y_dn = income_coefficients(grid, params)
    n_y = grid.shape[1]
    Q = np.zeros((n_y, n_y))
    for j in range(n_y - 1):
        Q[j, j + 1] = y_up[0, j]
        Q[j + 1, j] = y_dn[0, j + 1]
    Q -= np.diag(Q.sum(axis=1))
    A = Q.T.copy()
    A[0] = 1.0
    b = np.zeros(n_y)
    b[0] = 1.0
    pi = np.linalg.solve(A, b)
    return float(pi @ grid.income_nodes)


def _supply(K, L, grid, params, V0, hjb_opts):
    p = prices_from_aggregates(K, L, 0.0, params.production_scale)
    value, policy, op = solve_stationary_hjb(p, grid, params, V0=V0, **hjb_opts)
    m = stationary_density(op, grid.shape)
    return p, value, policy, op, m


def solve_stationary_equilibrium(
    grid: StateGrid,
    params: ModelParams,
    tol=1e-9,
    max_iter=200,
    rate_bracket=None,
    hjb_opts=None,
):
    """Bisection on aggregate capital until supply meets demand.

    For a capital guess ``K`` the prices are the marginal products at
    ``(K, L)``; households' stationary savings give the supply ``S(K)``,
    which falls as ``K`` rises (lower interest rate). ``rate_bracket`` bounds
    the interest rate; by default it is ``(rho / 50, 0.98 rho)``.
    """
    hjb_opts = hjb_opts or {}
    L = mean_income(grid, params)
    scale = params.production_scale
    r_lo, r_hi = rate_bracket or (params.rho / 50.0, 0.98 * params.rho)
    K_lo = capital_from_rate(r_hi, L, 0.0, scale)
    K_hi = capital_from_rate(r_lo, L, 0.0, scale)

    trace = []
    V0 = None

    def evaluate(K):
        nonlocal V0
        try:
            p, value, policy, op, m = _supply(K, L, grid, params, V0, hjb_opts)
        except NonUniquenessError as exc:
            raise CalibrationError(f"no unique stationary density at K={K:.6g}: {exc}", trace) from exc
        V0 = value.values
        S, L_m = aggregate_moments(m, grid)
        p_star = prices_from_aggregates(S, L_m, 0.0, scale) if S > 0 else np.array([np.inf, 0.0])
        resid = float(np.max(np.abs(p - p_star)))
        trace.append({"capital": K, "rate": float(p[0]), "supply": S, "residual": resid})
        return S - K, (p, value, policy, op, m, resid)

    f_lo, _ = evaluate(K_lo)
    f_hi, _ = evaluate(K_hi)
    if not (f_lo > 0 > f_hi):
        raise CalibrationError(
            f"excess supply does not change sign on K in [{K_lo:.4g}, {K_hi:.4g}] "
            f"(values {f_lo:.4g}, {f_hi:.4g})",
            trace,
        )
    lo, hi = K_lo, K_hi
    for _ in range(max_iter):
        # bisect in log K: the bracket spans orders of magnitude
        K = float(np.sqrt(lo * hi))
        f, payload = evaluate(K)
        p, value, policy, op, m, resid = payload
        if resid < tol:
            return StationaryEquilibrium(p, m, value, policy, op, K, L, trace)
        if f > 0:
            lo = K
        else:
            hi = K
        if hi / lo - 1 < 1e-15:
            break
    raise ConvergenceError(f"stationary equilibrium: residual {trace[-1]['residual']:.3e} above {tol}", trace)


def supply_is_monotone(trace):
    """Diagnostic: along the bisection trace, supply rises with the interest rate."""
    pts = sorted((t["rate"], t["supply"]) for t in trace)
    s = np.array([q for _, q in pts])
    return bool(np.all(np.diff(s) >= -1e-10))


def forward_densities(m0: Density, drifts, grid, params, dt):
    """Chain of implicit Kolmogorov-forward steps under stacked drifts."""
    n = drifts.shape[0]
    out = np.empty((n + 1,) + grid.shape)
    out[0] = m0.mass
    for k in range(n):
        coeffs = generator_coefficients(drifts[k], grid, params)
        out[k + 1] = forward_step_array(out[k], coeffs, dt)
    return out


def path_prices(densities, grid, params, z=0.0):
    K = np.einsum("tij,i->t", densities, grid.wealth_nodes)
    L = np.einsum("tij,j->t", densities, grid.income_nodes)
    return prices_from_aggregates(K, L, z, params.production_scale)


def solve_perfect_foresight_transition(
    m0: Density,
    grid: StateGrid,
    params: ModelParams,
    n_steps=None,
    terminal: ValueField = None,
    dt=None,
    damping=0.1,
    max_damping=1.0,
    tol=1e-7,
    max_iter=2000,
    initial_guess=None,
    steady_prices=None,
):
    """Damped fixed point on the price path of the forward-backward system.

    Each iteration solves households backward against the guessed path,
    pushes ``m0`` forward under the resulting policies and moves the guess a
    fraction ``damping`` towards the implied prices. The fraction grows by
    10% after every improving iteration and halves after a worsening one.
    Converged once the largest clearing residual is below ``tol``.
    """
    dt = params.dt if dt is None else dt
    n_steps = params.n_steps if n_steps is None else n_steps
    if terminal is None or steady_prices is None:
        eq = solve_stationary_equilibrium(grid, params)
        terminal = terminal or eq.value
        steady_prices = eq.prices if steady_prices is None else steady_prices
    if initial_guess is None:
        guess = np.tile(np.asarray(steady_prices, float), (n_steps, 1))
    else:
        guess = np.array(initial_guess, dtype=float)
    history = []
    omega = damping
    for it in range(max_iter):
        values, pols = solve_hjb_path(guess, terminal, grid, params, dt)
        dens = forward_densities(m0, pols.drift, grid, params, dt)
        implied = path_prices(dens, grid, params)
        resid = float(np.max(np.abs(implied[:-1] - guess)))
        history.append(resid)
        if resid < tol:
            times = np.arange(n_steps + 1) * dt
            return Trajectory(
                times=times,
                prices=implied,
                densities=dens,
                consumption=pols.consumption,
                diagnostics={
                    "perceived_prices": guess,
                    "clearing_residuals": implied[:-1] - guess,
                    "iterations": it + 1,
                    "residual_history": history,
                    "values": values,
                    "drift": pols.drift,
                },
            )
        if len(history) > 1:
            omega = min(omega * 1.1, max_damping) if resid < history[-2] else max(omega / 2, 1e-3)
        guess = (1 - omega) * guess + omega * implied[:-1]
    raise ConvergenceError(f"transition did not converge: residual {history[-1]:.3e}", history)
