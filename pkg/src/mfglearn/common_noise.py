"""Aggregate shocks with learning.

The aggregate state ``z`` follows a driftless diffusion and scales total
factor productivity. Households perceive the interest rate as a diffusion
reverting to a level that is linear in ``z``,

    dr = kappa (theta0 + theta_z z - r) dt + sigma dW,

and take the wage from the factor-price frontier. For frozen ``theta`` their
problem is a finite-dimensional HJB on (wealth, income, z, r); the
population density never enters it. Beliefs are learned by regressing the
realized rate on ``(1, z)``, and the HJB is re-solved only when beliefs have
moved enough since the last solve.
"""

from __future__ import annotations

import logging
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .beliefs import BeliefState, LearningRule
from .density import fp_forward_step
from .errors import ConvergenceError, DomainError, NumericalError, ShapeError
from .hjb import (
    PolicyField,
    ValueField,
    apply_coefficients,
    backward_step_array,
    build_generator,
    generator_coefficients,
    upwind_policy,
)
from .model import Density, ModelParams, StateGrid, price_functional, utility
from .seeding import substream
from .temporary import PriceSpaceSolution, _report_courant, apply_stages, make_stage
from .trajectory import Trajectory
from .transport import PriceAxes, axis_rates, linear_weights

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# aggregate state


@dataclass(frozen=True, eq=False)
class AggregatePath:
    seed: int
    times: np.ndarray
    z: np.ndarray
    clamped: int = 0


def simulate_aggregate_path(seed, horizon, dt, beta, z0=0.0, bounds=None) -> AggregatePath:
    """Euler-Maruyama for ``dZ = sqrt(2 beta) dW``.

    With ``bounds`` the path reflects off the ends of the interval; each
    reflection is counted in ``clamped``.
    """
    if beta < 0:
        raise DomainError("beta must be >= 0")
    n = int(round(horizon / dt))
    rng = substream(seed, "aggregate_shocks")
    shocks = rng.standard_normal(n)
    z = np.empty(n + 1)
    z[0] = z0
    clamped = 0
    scale = np.sqrt(2.0 * beta * dt)
    for k in range(n):
        nxt = z[k] + scale * shocks[k]
        if bounds is not None:
            lo, hi = bounds
            if nxt < lo or nxt > hi:
                clamped += 1
                nxt = 2 * lo - nxt if nxt < lo else 2 * hi - nxt
                nxt = min(max(nxt, lo), hi)
        z[k + 1] = nxt
    if clamped:
        log.warning("aggregate state reflected at the grid bounds %d times", clamped)
    return AggregatePath(int(seed), np.arange(n + 1) * dt, z, clamped)


def z_nodes_for(beta, horizon, n=11, min_width=0.05):
    """Symmetric aggregate-state grid of half-width ``3 sqrt(beta horizon)`` with a node at zero."""
    half = max(3.0 * np.sqrt(beta * horizon), min_width)
    if n % 2 == 0:
        raise DomainError("use an odd number of aggregate-state nodes so that 0 is a node")
    nodes = np.linspace(-half, half, n)
    nodes[n // 2] = 0.0
    return nodes


# ---------------------------------------------------------------------------
# perceived law with noise


@dataclass(frozen=True)
class NoisePLM:
    """Perceived rate dynamics ``kappa (theta0 + theta_z z - r)`` plus noise ``sigma``."""

    kappa: float = 0.5
    sigma: float = 0.0

    def __post_init__(self):
        if self.kappa < 0 or self.sigma < 0:
            raise DomainError("kappa and sigma must be >= 0")

    def drift(self, r, z, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != 2:
            raise ShapeError("the noise PLM has two parameters (level, slope in z)")
        return self.kappa * (theta[..., 0] + theta[..., 1] * z - r)

    def forecast(self, r, z, theta, dt):
        """One-step-ahead mean of the rate (aggregate state held fixed)."""
        target = theta[0] + theta[1] * z
        return target + (r - target) * np.exp(-self.kappa * dt)


def _node_prices(axes: PriceAxes, z_nodes):
    return np.stack([axes.prices(z) for z in z_nodes])


def _aggregate_rates(axes, z_nodes, theta, plm: NoisePLM, beta):
    """Jump rates along z (diffusion) and r (perceived drift plus diffusion)."""
    z_up, z_dn = axis_rates(np.zeros(z_nodes.size), z_nodes, beta)
    r = axes.nodes[0]
    mu = plm.drift(r[None, :], z_nodes[:, None], theta)
    r_up, r_dn = axis_rates(mu, r, 0.5 * plm.sigma**2)
    return z_up, z_dn, r_up, r_dn


def _apply_aggregate(U, z_up, z_dn, r_up, r_dn):
    out = np.zeros_like(U)
    zu = z_up[:, None, None, None]
    zd = z_dn[:, None, None, None]
    out[:-1] += zu[:-1] * (U[1:] - U[:-1])
    out[1:] += zd[1:] * (U[:-1] - U[1:])
    ru = r_up[:, :, None, None]
    rd = r_dn[:, :, None, None]
    out[:, :-1] += ru[:, :-1] * (U[:, 1:] - U[:, :-1])
    out[:, 1:] += rd[:, 1:] * (U[:, :-1] - U[:, 1:])
    return out


def _slice_matrix(coeffs, r_up, r_dn, diag_extra, n_y):
    """Sparse ``diag_extra I - A_x - A_r`` over one z-slice ``(n_r, n_a, n_y)``."""
    shape = coeffs["a+"].shape
    n = int(np.prod(shape))
    idx = np.arange(n).reshape(shape)
    cell = shape[1] * shape[2]
    offs = {"a+": n_y, "a-": -n_y, "y+": 1, "y-": -1}
    rows, cols, vals = [], [], []
    out = np.zeros(shape)
    for key, o in offs.items():
        c = coeffs[key]
        m = c != 0
        rows.append(idx[m])
        cols.append(idx[m] + o)
        vals.append(-c[m])
        out += c
    up = np.broadcast_to(r_up[:, None, None], shape)
    dn = np.broadcast_to(r_dn[:, None, None], shape)
    rows += [idx[:-1].ravel(), idx[1:].ravel()]
    cols += [idx[:-1].ravel() + cell, idx[1:].ravel() - cell]
    vals += [-up[:-1].ravel(), -dn[1:].ravel()]
    out += up + dn
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append((out + diag_extra).ravel())
    return sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


@dataclass(eq=False)
class StationaryExtendedSolution:
    """Stationary value over ``(z, r, wealth, income)`` for one belief ``theta``."""

    values: np.ndarray
    theta: np.ndarray
    axes: PriceAxes
    z_nodes: np.ndarray
    howard_iterations: int = 0
    krylov_iterations: int = 0
    residual: float = np.nan
    preconditioner: Optional[list] = field(default=None, repr=False)

    def value_at(self, z, p):
        return _bilinear(self.values, self.z_nodes, self.axes.nodes[0], z, p[0])

    def policy_at(self, z, p, grid, params) -> PolicyField:
        """Policy at aggregate state ``z`` and realized prices ``p``."""
        c, s = upwind_policy(self.value_at(z, p), np.asarray(p, float), grid, params)
        return PolicyField(c, s)


def _bilinear(values, z_nodes, r_nodes, z, r):
    i, wz = linear_weights(z_nodes, z)
    j, wr = linear_weights(r_nodes, r)
    lo = (1 - wr) * values[i, j] + wr * values[i, j + 1]
    hi = (1 - wr) * values[i + 1, j] + wr * values[i + 1, j + 1]
    return (1 - wz) * lo + wz * hi


def _stationary_extended(theta, grid, axes, z_nodes, params, plm, V0, tol, max_howard, precond, refresh_after=8):
    prices = _node_prices(axes, z_nodes)
    shape = (z_nodes.size,) + axes.shape + grid.shape
    z_up, z_dn, r_up, r_dn = _aggregate_rates(axes, z_nodes, theta, plm, params.beta)
    V = np.array(np.broadcast_to(V0, shape), dtype=float)
    n = V.size
    z_out = (z_up + z_dn)[:, None, None, None] * np.ones((1,) + axes.shape + grid.shape)
    krylov = 0
    history = []
    resid = np.inf
    for it in range(1, max_howard + 1):
        c, s = upwind_policy(V, prices, grid, params)
        coeffs = generator_coefficients(s, grid, params)
        u = utility(c, params.crra)
        agg = _apply_aggregate(V, z_up, z_dn, r_up, r_dn)
        resid = float(np.max(np.abs(params.rho * V - u - apply_coefficients(coeffs, V) - agg)))
        history.append(resid)
        scale = max(1.0, float(np.max(np.abs(u))))
        bound = tol * scale
        if resid <= bound:
            return V, it - 1, krylov, resid, precond
        if precond is None:
            precond = [
                spla.splu(_slice_matrix({k: v[i] for k, v in coeffs.items()}, r_up[i], r_dn[i], params.rho + z_out[i], grid.shape[1]))
                for i in range(z_nodes.size)
            ]
        lus = precond

        def matvec(x):
            X = x.reshape(shape)
            return (params.rho * X - apply_coefficients(coeffs, X) - _apply_aggregate(X, z_up, z_dn, r_up, r_dn)).ravel()

        def psolve(x):
            # symmetric block Gauss-Seidel over z slices
            X = x.reshape((z_nodes.size, -1))
            nz = z_nodes.size
            Y = np.empty_like(X)
            for i in range(nz):
                b = X[i] + (z_dn[i] * Y[i - 1] if i > 0 else 0.0)
                Y[i] = lus[i].solve(b)
            Z = np.empty_like(X)
            for i in range(nz - 1, -1, -1):
                b = X[i] + (z_dn[i] * Y[i - 1] if i > 0 else 0.0) + (z_up[i] * Z[i + 1] if i < nz - 1 else 0.0)
                Z[i] = lus[i].solve(b)
            return Z.ravel()

        A = spla.LinearOperator((n, n), matvec, dtype=float)
        M = spla.LinearOperator((n, n), psolve, dtype=float)
        count = [0]

        def cb(_):
            count[0] += 1

        # inexact Newton: early linear solves only need to beat the next
        # nonlinear residual; a 2-norm bound also bounds the largest entry
        target = max(0.1 * bound, 0.1 * resid * min(1.0, resid / scale))
        V_new, info = spla.gmres(
            A, u.ravel(), x0=V.ravel(), M=M, rtol=0.0, atol=target, restart=40, maxiter=10, callback=cb, callback_type="pr_norm"
        )
        krylov += count[0]
        if info != 0 or count[0] > refresh_after:
            # the stored factorisation has drifted too far from the current policy
            precond = None
        if not np.all(np.isfinite(V_new)):
            raise NumericalError(f"extended HJB solve produced non-finite values (theta={theta})")
        V = V_new.reshape(shape)
    raise ConvergenceError(f"extended HJB did not converge in {max_howard} policy iterations", history)


def solve_extended_hjb(
    theta,
    grid: StateGrid,
    axes: PriceAxes,
    z_nodes,
    params: ModelParams,
    terminal=None,
    plm: NoisePLM = NoisePLM(),
    n_steps=None,
    dt=None,
    mode="finite",
    store_path=True,
    transport="semi_lagrangian",
    V0=None,
    tol=1e-8,
    max_howard=50,
    preconditioner=None,
):
    """HJB over ``(z, r, wealth, income)`` for frozen beliefs ``theta = (theta0, theta_z)``.

    ``mode="finite"`` steps backward from ``terminal`` over ``n_steps``:
    each step diffuses along z (implicit), carries the value along the
    perceived rate flow, then takes the household step; it returns a
    :class:`PriceSpaceSolution` whose leading belief-free axis is ``z``.

    ``mode="stationary"`` solves the infinite-horizon equation by policy
    iteration, each linear solve by GMRES preconditioned with an exact
    factorisation of every z-slice. ``V0`` warm-starts it and
    ``preconditioner`` reuses a factorisation from a nearby solve.
    """
    theta = np.asarray(theta, dtype=float)
    z_nodes = np.asarray(z_nodes, dtype=float)
    if axes.mode != "rate":
        raise DomainError("the extended HJB perceives the interest rate only (price mode 'rate')")
    if theta.shape != (2,):
        raise ShapeError("theta must be (level, slope in z)")
    if mode == "stationary":
        if V0 is None:
            if terminal is None:
                raise DomainError("stationary mode needs V0 or a terminal value to start from")
            V0 = terminal.values if isinstance(terminal, ValueField) else terminal
        V, its, kry, resid, pre = _stationary_extended(theta, grid, axes, z_nodes, params, plm, V0, tol, max_howard, preconditioner)
        return StationaryExtendedSolution(V, theta, axes, z_nodes, its, kry, resid, pre)
    if mode != "finite":
        raise DomainError(f"unknown mode {mode!r}")
    dt = params.dt if dt is None else dt
    n_steps = params.n_steps if n_steps is None else n_steps
    if terminal is None:
        raise DomainError("finite mode needs a terminal value")
    prices = _node_prices(axes, z_nodes)
    shape = (z_nodes.size,) + axes.shape + grid.shape
    T = terminal.values if isinstance(terminal, ValueField) else terminal
    V = np.array(np.broadcast_to(T, shape), dtype=float)
    agg_shape = (z_nodes.size,) + axes.shape
    stages = []
    if params.beta > 0:
        z_coord = np.broadcast_to(z_nodes[:, None], agg_shape)
        stages.append(make_stage(0, z_nodes, z_coord, np.zeros_like, dt, "upwind", diffusion=params.beta))
    r_coord = np.broadcast_to(axes.nodes[0][None, :], agg_shape)
    zz = np.broadcast_to(z_nodes[:, None], agg_shape)
    stages.append(
        make_stage(1, axes.nodes[0], r_coord, lambda r: plm.drift(r, zz, theta), dt, transport, diffusion=0.5 * plm.sigma**2)
    )
    courant = _report_courant(stages, dt)
    out = [None] * n_steps + [V]
    for k in range(n_steps - 1, -1, -1):
        V, _, _ = backward_step_array(apply_stages(V, stages, dt), prices, dt, grid, params)
        out[k] = V
        if not store_path and k + 2 <= n_steps:
            out[k + 2] = None
    if not store_path:
        out = out[:2]
    return PriceSpaceSolution(np.array(out), axes, theta, plm, dt, stages, (z_nodes,), courant)


# ---------------------------------------------------------------------------
# learning


def regression_update(rule: LearningRule, belief: BeliefState, r, z, dt) -> BeliefState:
    """Stochastic-gradient (or recursive least-squares) step of ``r`` on ``(1, z)``."""
    x = np.array([1.0, z])
    t_next = belief.t + dt
    if rule.kind == "none":
        return replace(belief, t=t_next, last_price=np.array([r]))
    theta = belief.theta
    err = r - x @ theta
    g = rule.step_gain(belief.t, dt)
    if rule.kind in ("decreasing_gain", "constant_gain"):
        return replace(belief, theta=theta + g * x * err, t=t_next, last_price=np.array([r]))
    R = np.eye(2) if belief.moment is None else np.array(belief.moment)
    R = R + g * (np.outer(x, x) - R)
    step = np.linalg.solve(R + rule.regularization * np.eye(2), x * err)
    identified = bool(np.linalg.eigvalsh(R)[0] > 1e-8 * np.trace(R))
    return BeliefState(theta + g * step, t_next, R, np.array([r]), identified)


class ThetaCache:
    """Extended-HJB solutions keyed by the beliefs they were solved for.

    A stored solution is reused while ``||theta - theta_cached||_inf`` stays
    within ``threshold * ||theta||_inf``. Threshold zero solves at every
    call. New solves warm-start from the most recent one, extrapolated
    along the belief path. ``solver(theta, last, start)`` gets the last
    solution (for its factorisation) and the starting values.
    """

    def __init__(self, solver, threshold=0.01, max_entries=16):
        if threshold < 0:
            raise DomainError("cache threshold must be >= 0")
        if threshold == 0:
            warnings.warn("belief cache threshold is zero: the extended HJB is solved at every step", stacklevel=2)
        self.solver = solver
        self.threshold = threshold
        self.max_entries = max_entries
        self.entries: OrderedDict = OrderedDict()
        self.solves = 0
        self.hits = 0
        self.log = []
        self._last = None
        self._prev = None

    def _start(self, theta):
        """Warm start: the last solution, extrapolated along the recent belief path."""
        if self._last is None:
            return None
        V = self._last.values
        if self._prev is None:
            return V
        d = self._last.theta - self._prev.theta
        dd = float(d @ d)
        if dd == 0.0:
            return V
        s = float((theta - self._last.theta) @ d) / dd
        # only extrapolate over steps comparable to the last one
        s = min(max(s, 0.0), 2.0)
        return V + s * (V - self._prev.values)

    def get(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.threshold > 0:
            bound = self.threshold * float(np.max(np.abs(theta)))
            best = None
            for key, sol in self.entries.items():
                gap = float(np.max(np.abs(theta - sol.theta)))
                if gap <= bound and (best is None or gap < best[0]):
                    best = (gap, key, sol)
            if best is not None:
                self.hits += 1
                self.entries.move_to_end(best[1])
                return best[2], best[0]
        sol = self.solver(theta, self._last, self._start(theta))
        self.solves += 1
        entry = {f"theta{i}": float(v) for i, v in enumerate(theta)}
        entry.update({k: getattr(sol, k + "_iterations", None) for k in ("howard", "krylov")})
        self.log.append(entry)
        self._prev, self._last = self._last, sol
        if self.threshold > 0:
            self.entries[self.solves] = sol
            if len(self.entries) > self.max_entries:
                self.entries.popitem(last=False)
        return sol, 0.0


def run_learning_simulation(
    m0: Density,
    z0,
    belief0: BeliefState,
    rule: LearningRule,
    seed,
    grid: StateGrid,
    params: ModelParams,
    n_steps,
    axes: PriceAxes,
    z_nodes,
    terminal: ValueField,
    plm: NoisePLM = NoisePLM(),
    dt=None,
    cache_threshold=0.01,
    density_every=1,
    path: Optional[AggregatePath] = None,
):
    """Forward pass with aggregate shocks and belief learning.

    At each date: realized prices from the density and the aggregate state,
    the stationary extended HJB for the current beliefs (from the cache),
    the policy at the realized ``(z, r)``, one density step under the true
    generator, one belief update. ``terminal`` seeds the first solve.
    """
    dt = params.dt if dt is None else dt
    z_nodes = np.asarray(z_nodes, dtype=float)
    if path is None:
        path = simulate_aggregate_path(seed, n_steps * dt, dt, params.beta, z0, (z_nodes[0], z_nodes[-1]))
    if path.z.size < n_steps + 1:
        raise ShapeError("aggregate path shorter than the run")

    def solver(theta, warm, start):
        if warm is None:
            return solve_extended_hjb(theta, grid, axes, z_nodes, params, terminal, plm, mode="stationary")
        return solve_extended_hjb(
            theta, grid, axes, z_nodes, params, plm=plm, mode="stationary", V0=start, preconditioner=warm.preconditioner
        )

    cache = ThetaCache(solver, cache_threshold)
    m = m0
    belief = belief0
    prices, thetas, errors, gaps, masses = [], [], [], [], []
    dens = []
    off_grid = 0
    for n in range(n_steps + 1):
        z = float(path.z[n])
        p_t = price_functional(m, z, grid, params)
        prices.append(p_t)
        thetas.append(belief.theta.copy())
        masses.append(float(m.mass.sum()))
        if n % density_every == 0:
            dens.append(m.mass)
        if n == n_steps:
            break
        if not axes.contains(p_t):
            off_grid += 1
        sol, gap = cache.get(belief.theta)
        gaps.append(gap)
        policy = sol.policy_at(z, p_t, grid, params)
        m = fp_forward_step(m, build_generator(policy, grid, params), dt)
        errors.append(plm.forecast(p_t[0], z, belief.theta, dt))
        belief = regression_update(rule, belief, p_t[0], z, dt)
    prices = np.array(prices)
    forecast_err = np.full(n_steps + 1, np.nan)
    forecast_err[1:] = np.array(errors) - prices[1:, 0]
    if off_grid:
        log.warning("realized rate left the price grid on %d dates", off_grid)
    return Trajectory(
        times=np.arange(n_steps + 1) * dt,
        prices=prices,
        densities=np.array(dens),
        beliefs=np.array(thetas),
        diagnostics={
            "z": path.z[: n_steps + 1].copy(),
            "z_clamped": path.clamped,
            "forecast_errors": forecast_err[:, None],
            "cache_gaps": np.array(gaps),
            "cache_solves": cache.solves,
            "cache_hits": cache.hits,
            "cache_log": cache.log,
            "masses": np.array(masses),
            "price_off_grid": off_grid,
            "density_every": density_every,
            "final_belief": belief,
        },
    )


def belief_sensitivity(theta, m: Density, z, grid, axes, z_nodes, params, terminal, relative_step=0.01, plm=NoisePLM(), dt=None):
    """One-step price sensitivity to beliefs, per unit change in ``theta``.

    Each belief coordinate is moved by ``relative_step * ||theta||_inf``,
    the density is advanced one step from ``m`` under both policies and the
    largest resulting price change is divided by the move. Multiplied by
    the summed belief gaps of a cached run this gives a first-order size for
    how far the cached run can drift from a solve-every-step run.
    """
    dt = params.dt if dt is None else dt
    theta = np.asarray(theta, dtype=float)
    delta = relative_step * float(np.max(np.abs(theta)))
    if delta == 0.0:
        raise DomainError("sensitivity needs nonzero beliefs")
    base = solve_extended_hjb(theta, grid, axes, z_nodes, params, terminal, plm, mode="stationary")
    p_now = price_functional(m, z, grid, params)

    def next_price(sol):
        policy = sol.policy_at(z, p_now, grid, params)
        return price_functional(fp_forward_step(m, build_generator(policy, grid, params), dt), z, grid, params)

    p0 = next_price(base)
    worst = 0.0
    for e in np.eye(theta.size):
        moved = solve_extended_hjb(
            theta + delta * e, grid, axes, z_nodes, params, plm=plm, mode="stationary", V0=base.values,
            preconditioner=base.preconditioner,
        )
        worst = max(worst, float(np.max(np.abs(next_price(moved) - p0))) / delta)
    return worst
