"""Finite-state mean field games in discrete time.

A small economy: individual states ``x``, actions, an aggregate Markov
state ``z`` and a scalar price set by the cross-sectional histogram. Three
ways of solving it live here:

* :func:`bellman_backward` treats the price as an exogenous Markov chain
  (the agents' perceived kernel) and runs ordinary backward induction on
  ``(x, z, p)``.
* :func:`master_oracle` carries the whole histogram as a state variable on a
  barycentric lattice of the simplex. It is only feasible for two or three
  individual states and serves as ground truth.
* :func:`mrp_value_bruteforce` enumerates aggregate paths of an economy
  without choices.

Arrays are laid out ``(z, p, x, action)``; time, when present, comes first.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.stats import norm

from .beliefs import BeliefState, LearningRule
from .common_noise import ThetaCache
from .errors import BudgetError, DomainError, ShapeError
from .seeding import substream
from .trajectory import Trajectory

log = logging.getLogger(__name__)

STOCHASTIC_TOL = 1e-12


def _check_stochastic(P, name, axis=-1):
    P = np.asarray(P, dtype=float)
    if np.any(P < 0):
        raise DomainError(f"{name} has negative entries")
    if np.max(np.abs(P.sum(axis=axis) - 1.0)) > STOCHASTIC_TOL:
        raise DomainError(f"{name} rows must sum to one")
    return P


def _poly(coef, p):
    """Evaluate ``sum_k coef[k] p**k`` with ``p`` broadcast over leading axes."""
    p = np.asarray(p, dtype=float)
    out = np.zeros(p.shape + coef.shape[1:])
    for k in range(coef.shape[0] - 1, -1, -1):
        out = out * p.reshape(p.shape + (1,) * (coef.ndim - 1)) + coef[k]
    return out


@dataclass(frozen=True, eq=False)
class DiscreteModel:
    """Finite economy with a price that is affine in the histogram.

    Parameters
    ----------
    z_kernel : (n_z, n_z)
        Aggregate transition matrix.
    x_kernel : (n_z, n_act, n_x, n_x)
        Individual transition ``x -> x'`` given ``z`` and the action.
    reward_coef : (deg + 1, n_z, n_x, n_act)
        Flow reward as a polynomial in the price.
    terminal_coef : (deg + 1, n_z, n_x)
        Terminal value as a polynomial in the price.
    price_intercept, price_weights : (n_z,), (n_z, n_x)
        ``P(m, z) = price_intercept[z] + price_weights[z] @ m``.
    discount : float
        Per-period discount factor in ``[0, 1]``.
    horizon : int
        Number of decision dates.
    z_values : (n_z,), optional
        Numerical level of each aggregate state, used by VAR beliefs.
    """

    z_kernel: np.ndarray
    x_kernel: np.ndarray
    reward_coef: np.ndarray
    terminal_coef: np.ndarray
    price_intercept: np.ndarray
    price_weights: np.ndarray
    discount: float = 0.95
    horizon: int = 3
    z_values: Optional[np.ndarray] = None

    def __post_init__(self):
        conv = lambda name: object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        for name in ("z_kernel", "x_kernel", "reward_coef", "terminal_coef", "price_intercept", "price_weights"):
            conv(name)
        _check_stochastic(self.z_kernel, "z_kernel")
        _check_stochastic(self.x_kernel, "x_kernel")
        n_z, n_act, n_x, _ = self.x_kernel.shape
        if self.z_kernel.shape != (n_z, n_z):
            raise ShapeError("z_kernel must be (n_z, n_z) matching x_kernel")
        if self.reward_coef.ndim != 4 or self.reward_coef.shape[1:] != (n_z, n_x, n_act):
            raise ShapeError(f"reward_coef must be (deg+1, {n_z}, {n_x}, {n_act})")
        if self.terminal_coef.ndim != 3 or self.terminal_coef.shape[1:] != (n_z, n_x):
            raise ShapeError(f"terminal_coef must be (deg+1, {n_z}, {n_x})")
        if self.price_intercept.shape != (n_z,) or self.price_weights.shape != (n_z, n_x):
            raise ShapeError("price map must be (n_z,) and (n_z, n_x)")
        if not 0.0 <= self.discount <= 1.0:
            raise DomainError("discount must lie in [0, 1]")
        if int(self.horizon) != self.horizon or self.horizon < 0:
            raise DomainError("horizon must be a nonnegative integer")
        zv = np.arange(n_z, dtype=float) if self.z_values is None else np.array(self.z_values, dtype=float)
        if zv.shape != (n_z,):
            raise ShapeError("z_values must have one entry per aggregate state")
        object.__setattr__(self, "z_values", zv)

    @property
    def n_x(self):
        return self.x_kernel.shape[2]

    @property
    def n_act(self):
        return self.x_kernel.shape[1]

    @property
    def n_z(self):
        return self.z_kernel.shape[0]

    def reward(self, z, p):
        """``(..., n_x, n_act)`` rewards at prices ``p`` in aggregate state ``z``."""
        return _poly(self.reward_coef[:, z], p)

    def terminal(self, z, p):
        return _poly(self.terminal_coef[:, z], p)

    def price(self, m, z):
        return self.price_intercept[z] + np.asarray(m, dtype=float) @ self.price_weights[z]

    def induced_matrix(self, policy, z):
        """Row-stochastic ``x -> x'`` matrix under ``policy`` (probabilities ``(n_x, n_act)``)."""
        return np.einsum("xa,axy->xy", _as_probs(policy, self.n_act), self.x_kernel[z])


def _as_probs(policy, n_act):
    policy = np.asarray(policy)
    if policy.ndim >= 1 and policy.dtype.kind in "iu":
        return np.eye(n_act)[policy]
    return np.asarray(policy, dtype=float)


@dataclass(frozen=True, eq=False)
class Histogram:
    """Probability vector over individual states."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float).ravel()
        if np.any(p < 0):
            raise DomainError("histogram has negative entries")
        if abs(p.sum() - 1.0) > 1e-12:
            raise DomainError(f"histogram sums to {p.sum()!r}, not one")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)


def chapman_step(m, policy, z, model: DiscreteModel) -> Histogram:
    """Push the histogram one period forward under ``policy``.

    ``policy`` holds either one action index per state or action
    probabilities of shape ``(n_x, n_act)``.
    """
    probs = m.probs if isinstance(m, Histogram) else np.asarray(m, dtype=float)
    return Histogram(probs @ model.induced_matrix(policy, z))


# ---------------------------------------------------------------------------
# perceived price kernels

KERNEL_KINDS = ("degenerate", "level", "var", "matrix", "joint")


def _grid_weights(grid, values):
    """Linear interpolation weights of ``values`` on a sorted ``grid`` (clamped)."""
    values = np.clip(np.asarray(values, dtype=float), grid[0], grid[-1])
    W = np.zeros(values.shape + (grid.size,))
    if grid.size == 1:
        W[..., 0] = 1.0
        return W
    i = np.clip(np.searchsorted(grid, values, side="right") - 1, 0, grid.size - 2)
    w = (values - grid[i]) / (grid[i + 1] - grid[i])
    np.put_along_axis(W, i[..., None], (1.0 - w)[..., None], axis=-1)
    np.put_along_axis(W, (i + 1)[..., None], w[..., None], axis=-1)
    return W


@dataclass(frozen=True, eq=False)
class PerceivedPriceKernel:
    """Agents' model of next period's price on a finite price grid.

    ``degenerate``: the price stays where it is.
    ``level``: next price is the belief ``theta[0]``.
    ``var``: ``p' = theta0 + theta1 p + theta2 z + sigma eps`` with Gaussian
    ``eps``, discretised on the grid cells (linear weights when ``sigma=0``).
    ``matrix``: a fixed ``(n_p, n_z, n_p)`` kernel, with ``z'`` drawn
    independently from the aggregate chain.
    ``joint``: a full ``(n_p, n_z, n_z, n_p)`` kernel over ``(z', p')``.
    """

    kind: str
    grid: np.ndarray
    matrix: Optional[np.ndarray] = None
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise DomainError(f"unknown kernel kind {self.kind!r}")
        g = np.array(self.grid, dtype=float).ravel()
        object.__setattr__(self, "grid", g)
        if self.kind != "joint" and np.any(np.diff(g) <= 0):
            raise DomainError("price grid must be strictly increasing")
        if self.kind in ("matrix", "joint"):
            if self.matrix is None:
                raise DomainError(f"{self.kind} kernel needs a matrix")
            object.__setattr__(self, "matrix", _check_stochastic(self.matrix, "price kernel", axis=-1 if self.kind == "matrix" else (-2, -1)))
        if self.sigma < 0:
            raise DomainError("sigma must be >= 0")

    @property
    def n_params(self):
        return {"level": 1, "var": 3}.get(self.kind, 0)

    def expected_next(self, p, z_value, theta):
        if self.kind == "level":
            return float(theta[0])
        if self.kind == "var":
            return float(theta[0] + theta[1] * p + theta[2] * z_value)
        return float(p)

    def joint(self, model: DiscreteModel, theta=None):
        """Joint transition array ``K[p, z, z', p']``."""
        g = self.grid
        n_p, n_z = g.size, model.n_z
        Tz = model.z_kernel
        if self.kind == "joint":
            if self.matrix.shape != (n_p, n_z, n_z, n_p):
                raise ShapeError("joint kernel has the wrong shape")
            return self.matrix
        if self.kind == "degenerate":
            M = np.broadcast_to(np.eye(n_p)[:, None, :], (n_p, n_z, n_p))
        elif self.kind == "matrix":
            M = self.matrix
        else:
            theta = np.asarray(theta, dtype=float)
            if theta.size != self.n_params:
                raise ShapeError(f"{self.kind} kernel needs {self.n_params} parameters")
            if self.kind == "level":
                M = np.broadcast_to(_grid_weights(g, theta[0]), (n_p, n_z, n_p))
            else:
                mean = theta[0] + theta[1] * g[:, None] + theta[2] * model.z_values[None, :]
                if self.sigma == 0:
                    M = _grid_weights(g, mean)
                else:
                    edges = np.concatenate([[-np.inf], 0.5 * (g[1:] + g[:-1]), [np.inf]])
                    M = np.diff(norm.cdf((edges - mean[..., None]) / self.sigma), axis=-1)
        return M[:, :, None, :] * Tz[None, :, :, None]


def quantile_price_grid(prices, n):
    """``n`` price nodes at evenly spaced quantiles of a pilot sample."""
    q = np.quantile(np.asarray(prices, dtype=float).ravel(), np.linspace(0.0, 1.0, n))
    return np.unique(q)


# ---------------------------------------------------------------------------
# backward induction with perceived prices


@dataclass(eq=False)
class BellmanSolution:
    """Values ``(T+1, n_z, n_p, n_x)``, greedy actions ``(T, n_z, n_p, n_x)``,
    action values ``(T, n_z, n_p, n_x, n_act)`` and action probabilities."""

    values: np.ndarray
    policy: np.ndarray
    q: np.ndarray
    probs: np.ndarray
    grid: np.ndarray
    theta: np.ndarray


def _greedy(Q, stochastic, tie_tol=0.0):
    best = Q.max(axis=-1)
    if not stochastic:
        idx = np.argmax(Q, axis=-1)
        return best, np.eye(Q.shape[-1])[idx]
    top = Q >= best[..., None] - tie_tol
    return best, top / top.sum(axis=-1, keepdims=True)


def bellman_backward(model: DiscreteModel, kernel: PerceivedPriceKernel, theta=None, horizon=None, stochastic=False) -> BellmanSolution:
    """Backward induction on ``(x, z, p)`` with prices following ``kernel``.

    Greedy actions break ties towards the lowest index. With
    ``stochastic=True`` the action probabilities spread evenly over the
    maximisers instead; values are identical either way.
    """
    T = model.horizon if horizon is None else int(horizon)
    K = kernel.joint(model, theta)
    g = kernel.grid
    n_z = model.n_z
    R = np.stack([model.reward(z, g) for z in range(n_z)])
    V = np.empty((T + 1, n_z, g.size, model.n_x))
    V[T] = np.stack([model.terminal(z, g) for z in range(n_z)])
    Q = np.empty((T, n_z, g.size, model.n_x, model.n_act))
    probs = np.empty_like(Q)
    for t in range(T - 1, -1, -1):
        cont = np.einsum("pzwq,wqy->zpy", K, V[t + 1])
        Q[t] = R + model.discount * np.einsum("zaxy,zpy->zpxa", model.x_kernel, cont)
        V[t], probs[t] = _greedy(Q[t], stochastic)
    th = np.zeros(0) if theta is None else np.asarray(theta, dtype=float)
    return BellmanSolution(V, np.argmax(Q, axis=-1), Q, probs, g, th)


# ---------------------------------------------------------------------------
# histogram-as-state oracle


class SimplexGrid:
    """Barycentric lattice on the probability simplex with ``resolution`` nodes per edge.

    Points are located through cumulative coordinates
    ``c_i = (resolution - 1) * (m_1 + ... + m_i)`` and interpolated over the
    Kuhn triangulation of that lattice, which reproduces affine functions of
    ``m`` exactly.
    """

    def __init__(self, n_x, resolution):
        if not 2 <= n_x <= 3:
            raise DomainError("the histogram oracle supports two or three individual states")
        if resolution < 11:
            raise DomainError("simplex resolution must be at least 11 nodes per edge")
        self.n_x = n_x
        self.N = N = int(resolution) - 1
        d = n_x - 1
        cum = np.array(list(itertools.combinations_with_replacement(range(N + 1), d)), dtype=int)
        self.cum = cum
        full = np.concatenate([np.zeros((cum.shape[0], 1), int), cum, np.full((cum.shape[0], 1), N)], axis=1)
        self.nodes = np.diff(full, axis=1) / N
        self.lookup = np.full((N + 1,) * d, -1, dtype=int)
        self.lookup[tuple(cum.T)] = np.arange(cum.shape[0])

    @property
    def size(self):
        return self.nodes.shape[0]

    def locate(self, m):
        """Vertex indices and weights ``(k, n_x)`` for points ``m`` of shape ``(k, n_x)``."""
        m = np.atleast_2d(np.asarray(m, dtype=float))
        N = self.N
        c = np.clip(N * np.cumsum(m[:, :-1], axis=1), 0.0, N)
        base = np.minimum(np.floor(c), N - 1).astype(int)
        frac = c - base
        k, d = c.shape
        # largest fraction first; ties go to the later coordinate to stay on the lattice
        order = np.lexsort((np.broadcast_to(-np.arange(d), (k, d)), -frac), axis=-1)
        idx = np.empty((k, d + 1), dtype=int)
        w = np.empty((k, d + 1))
        vert = base.copy()
        idx[:, 0] = self.lookup[tuple(vert.T)]
        fs = np.take_along_axis(frac, order, axis=1)
        w[:, 0] = 1.0 - fs[:, 0]
        rows = np.arange(k)
        for j in range(d):
            vert[rows, order[:, j]] += 1
            idx[:, j + 1] = self.lookup[tuple(vert.T)]
            w[:, j + 1] = fs[:, j] - (fs[:, j + 1] if j + 1 < d else 0.0)
        return idx, w

    def interpolate(self, values, m):
        """Interpolate node ``values`` (leading axis = node) at points ``m``."""
        idx, w = self.locate(m)
        return np.einsum("kv,kv...->k...", w, values[idx])


@dataclass(eq=False)
class MasterSolution:
    """Individual values ``(T+1, n_z, n_nodes, n_x)`` over the histogram lattice.

    ``policy`` holds action probabilities ``(T, n_z, n_nodes, n_x, n_act)``;
    ``unsettled`` counts lattice points per date where the within-date
    policy iteration had to be damped and ended at a mixed policy.
    """

    model: DiscreteModel
    simplex: SimplexGrid
    values: np.ndarray
    policy: np.ndarray
    unsettled: np.ndarray
    stochastic: bool
    error_estimate: Optional[float] = None

    def value_at(self, t, z, m):
        return self.simplex.interpolate(self.values[t, z], np.atleast_2d(m))[0]

    def policy_at(self, t, z, m):
        """Equilibrium action probabilities at an arbitrary histogram ``m``."""
        if t >= self.values.shape[0] - 1:
            raise DomainError("no decision at the terminal date")
        cont = np.einsum("w,wkx->kx", self.model.z_kernel[z], self.values[t + 1])
        _, pol, _ = _date_fixed_point(self.model, self.simplex, cont, z, np.atleast_2d(m), self.stochastic)
        return pol[0]

    def step(self, t, z, m):
        """Next-period histogram from ``m`` under the equilibrium policy."""
        m = np.asarray(m, dtype=float)
        return m @ self.model.induced_matrix(self.policy_at(t, z, m), z)


def _date_fixed_point(model, simplex, cont, z, m, stochastic, n_plain=20, max_iter=200):
    """Policies consistent with the histogram motion they induce, at each point of ``m``.

    ``cont`` is the expected next-date value on the lattice, already averaged
    over ``z'``. Plain best-response iteration runs first; points where it
    has not settled switch to averaging successive best responses with
    weight ``1 / (k + 2)``.
    """
    p = model.price(m, z)
    R = model.reward(z, p)
    Tx = model.x_kernel[z]
    n_act = model.n_act

    def respond(pol):
        m_next = np.einsum("kx,kxa,axy->ky", m, pol, Tx)
        c = simplex.interpolate(cont, m_next)
        Q = R + model.discount * np.einsum("axy,ky->kxa", Tx, c)
        return _greedy(Q, stochastic)

    pol = np.full(m.shape + (n_act,), 1.0 / n_act)
    val, br = respond(pol)
    pol = br
    unsettled = np.zeros(m.shape[0], dtype=bool)
    for it in range(max_iter):
        val, br = respond(pol)
        moving = np.max(np.abs(br - pol), axis=(1, 2)) > 0
        if not moving.any():
            break
        if it < n_plain:
            pol = np.where(moving[:, None, None], br, pol)
        else:
            unsettled |= moving
            lam = 1.0 / (it - n_plain + 2)
            pol = np.where(moving[:, None, None], pol + lam * (br - pol), pol)
    else:
        unsettled |= moving
    if unsettled.any():
        # report the value of the mixed policy the damping ended on
        m_next = np.einsum("kx,kxa,axy->ky", m, pol, Tx)
        c = simplex.interpolate(cont, m_next)
        Q = R + model.discount * np.einsum("axy,ky->kxa", Tx, c)
        val = np.where(unsettled[:, None], np.einsum("kxa,kxa->kx", pol, Q), val)
    return val, pol, unsettled


def master_oracle(model: DiscreteModel, resolution=101, stochastic=False, tolerance=None) -> MasterSolution:
    """Backward induction with the histogram as a state on a simplex lattice.

    The next histogram at each lattice point is computed exactly and the
    continuation value there is interpolated. With controls the policy and
    the histogram motion are solved jointly at every lattice point and date.
    When ``tolerance`` is given the interpolation error is estimated against
    a half-resolution solve and a warning is raised if it is exceeded.
    """
    simplex = SimplexGrid(model.n_x, resolution)
    T, n_z = model.horizon, model.n_z
    nodes = simplex.nodes
    U = np.empty((T + 1, n_z, simplex.size, model.n_x))
    for z in range(n_z):
        U[T, z] = model.terminal(z, model.price(nodes, z))
    policy = np.empty((T, n_z, simplex.size, model.n_x, model.n_act))
    unsettled = np.zeros((T, n_z), dtype=int)
    for t in range(T - 1, -1, -1):
        for z in range(n_z):
            cont = np.einsum("w,wkx->kx", model.z_kernel[z], U[t + 1])
            U[t, z], policy[t, z], bad = _date_fixed_point(model, simplex, cont, z, nodes, stochastic)
            unsettled[t, z] = int(bad.sum())
    if unsettled.any():
        log.warning("within-date policy iteration did not settle at %d lattice points", int(unsettled.sum()))
    sol = MasterSolution(model, simplex, U, policy, unsettled, stochastic)
    if tolerance is not None:
        coarse_res = (resolution - 1) // 2 + 1
        if coarse_res < 11 or (resolution - 1) % 2:
            raise DomainError("error estimate needs an even number of lattice intervals, coarse level >= 11 nodes")
        coarse = master_oracle(model, coarse_res, stochastic)
        fine_at_coarse = simplex.lookup[tuple((2 * coarse.simplex.cum).T)]
        # second-order interpolation: the fine error is about a third of the difference
        sol.error_estimate = float(np.max(np.abs(U[:, :, fine_at_coarse] - coarse.values))) / 3.0
        if sol.error_estimate > tolerance:
            warnings.warn(
                f"simplex resolution {resolution} too coarse: interpolation error about {sol.error_estimate:.3g} "
                f"exceeds {tolerance:.3g}",
                stacklevel=2,
            )
    return sol


@dataclass(eq=False)
class EventTree:
    """All aggregate histories from one starting point under given dynamics."""

    t: np.ndarray
    z: np.ndarray
    m: np.ndarray
    price: np.ndarray
    prob: np.ndarray
    children: np.ndarray  # (n_nodes, n_z), -1 where absent


def equilibrium_tree(model: DiscreteModel, oracle: MasterSolution, m0, z0) -> EventTree:
    """Histories of ``(z, m)`` when the histogram moves under the oracle's policy."""
    t_, z_, m_, pr_, ch_ = [0], [int(z0)], [np.asarray(m0, dtype=float)], [1.0], []
    k = 0
    while k < len(t_):
        row = np.full(model.n_z, -1)
        if t_[k] < model.horizon:
            m_next = oracle.step(t_[k], z_[k], m_[k])
            for w in range(model.n_z):
                if model.z_kernel[z_[k], w] > 0:
                    row[w] = len(t_)
                    t_.append(t_[k] + 1)
                    z_.append(w)
                    m_.append(m_next)
                    pr_.append(pr_[k] * model.z_kernel[z_[k], w])
        ch_.append(row)
        k += 1
    m_arr = np.array(m_)
    z_arr = np.array(z_)
    price = np.array([model.price(m, z) for m, z in zip(m_arr, z_arr)])
    return EventTree(np.array(t_), z_arr, m_arr, price, np.array(pr_), np.array(ch_))


def induced_price_kernel(model: DiscreteModel, tree: EventTree) -> PerceivedPriceKernel:
    """The price kernel implied by the true dynamics on an event tree.

    Each tree node is its own price node; next period's price depends on
    the realized ``z'``, so the kernel is joint over ``(z', p')``. Rows for
    aggregate states other than the node's own, and for final nodes, keep
    the price where it is.
    """
    n = tree.t.size
    n_z = model.n_z
    K = np.zeros((n, n_z, n_z, n))
    for k in range(n):
        for z in range(n_z):
            for w in range(n_z):
                j = tree.children[k, w] if z == tree.z[k] and tree.children[k, w] >= 0 else k
                K[k, z, w, j] += model.z_kernel[z, w]
    return PerceivedPriceKernel("joint", tree.price, K)


# ---------------------------------------------------------------------------
# economies without choices


def _mrp_check(model):
    if model.n_act != 1:
        raise DomainError("a reward process has exactly one action")


def mrp_value_bruteforce(model: DiscreteModel, m0, z0, x0=None, horizon=None, budget=10**6):
    """Expected discounted reward by enumerating every aggregate path.

    The histogram moves deterministically along each path; the individual
    state is averaged exactly. Returns the value per starting state, or the
    entry for ``x0``.
    """
    _mrp_check(model)
    T = model.horizon if horizon is None else int(horizon)
    if model.n_z**T > budget:
        raise BudgetError(f"{model.n_z}**{T} aggregate paths exceed the budget {budget}; use mrp_value_montecarlo")
    zs = np.array([int(z0)])
    prob = np.ones(1)
    ms = np.atleast_2d(np.asarray(m0, dtype=float))
    D = np.eye(model.n_x)[None]
    total = np.zeros(model.n_x)
    disc = 1.0
    for t in range(T + 1):
        p = np.array([model.price(m, z) for m, z in zip(ms, zs)])
        if t == T:
            flow = np.stack([model.terminal(z, q) for z, q in zip(zs, p)])
        else:
            flow = np.stack([model.reward(z, q)[:, 0] for z, q in zip(zs, p)])
        total += disc * np.einsum("k,kxy,ky->x", prob, D, flow)
        if t == T:
            break
        A = model.x_kernel[zs, 0]
        ms = np.einsum("kx,kxy->ky", ms, A)
        D = np.einsum("kux,kxy->kuy", D, A)
        n_z = model.n_z
        prob = (prob[:, None] * model.z_kernel[zs]).ravel()
        zs = np.tile(np.arange(n_z), zs.size)
        ms = np.repeat(ms, n_z, axis=0)
        D = np.repeat(D, n_z, axis=0)
        keep = prob > 0
        prob, zs, ms, D = prob[keep], zs[keep], ms[keep], D[keep]
        disc *= model.discount
    return total if x0 is None else float(total[x0])


def mrp_value_montecarlo(model: DiscreteModel, m0, z0, x0, n_paths, seed, horizon=None):
    """Sample-path estimate of :func:`mrp_value_bruteforce`; returns ``(mean, standard_error)``."""
    _mrp_check(model)
    T = model.horizon if horizon is None else int(horizon)
    rng = substream(seed, "mrp_paths")
    u = rng.random((n_paths, T))
    cdf = np.cumsum(model.z_kernel, axis=1)
    out = np.empty(n_paths)
    for i in range(n_paths):
        z, m = int(z0), np.asarray(m0, dtype=float)
        d = np.eye(model.n_x)[x0]
        acc, disc = 0.0, 1.0
        for t in range(T):
            acc += disc * d @ model.reward(z, model.price(m, z))[:, 0]
            A = model.x_kernel[z, 0]
            m, d = m @ A, d @ A
            z = min(int(np.searchsorted(cdf[z], u[i, t], side="right")), model.n_z - 1)
            disc *= model.discount
        out[i] = acc + disc * d @ model.terminal(z, model.price(m, z))
    return float(out.mean()), float(out.std(ddof=1) / np.sqrt(n_paths))


# ---------------------------------------------------------------------------
# forward learning


def _regressors(kernel, p_prev, z_prev):
    return np.array([1.0]) if kernel.kind == "level" else np.array([1.0, p_prev, z_prev])


def discrete_belief_update(rule: LearningRule, belief: BeliefState, kernel, p_prev, z_prev, p_now) -> BeliefState:
    """Regress the realized price on the previous period's regressors (unit time step)."""
    if rule.kind == "none" or kernel.n_params == 0:
        return replace(belief, t=belief.t + 1.0, last_price=np.array([p_now]))
    x = _regressors(kernel, p_prev, z_prev)
    err = p_now - x @ belief.theta
    g = rule.step_gain(belief.t, 1.0)
    if rule.kind != "recursive_least_squares":
        return replace(belief, theta=belief.theta + g * x * err, t=belief.t + 1.0, last_price=np.array([p_now]))
    R = np.eye(x.size) if belief.moment is None else np.array(belief.moment)
    R = R + g * (np.outer(x, x) - R)
    step = np.linalg.solve(R + rule.regularization * np.eye(x.size), x * err)
    identified = bool(np.linalg.eigvalsh(R)[0] > 1e-8 * np.trace(R))
    return BeliefState(belief.theta + g * step, belief.t + 1.0, R, np.array([p_now]), identified)


def sample_aggregate_chain(model: DiscreteModel, z0, n_steps, seed):
    u = substream(seed, "discrete_aggregate").random(n_steps)
    cdf = np.cumsum(model.z_kernel, axis=1)
    z = np.empty(n_steps + 1, dtype=int)
    z[0] = z0
    for t in range(n_steps):
        z[t + 1] = min(int(np.searchsorted(cdf[z[t]], u[t], side="right")), model.n_z - 1)
    return z


def policy_at_price(sol: BellmanSolution, z, p, stochastic=False):
    """First-date action probabilities at price ``p``, interpolating action values on the grid."""
    w = _grid_weights(sol.grid, p) if sol.grid.size > 1 and np.all(np.diff(sol.grid) > 0) else None
    if w is None:
        Q = sol.q[0, z, int(np.argmin(np.abs(sol.grid - p)))]
    else:
        Q = np.einsum("p,pxa->xa", w, sol.q[0, z])
    return _greedy(Q, stochastic)[1]


def run_discrete_learning(
    model: DiscreteModel,
    m0,
    belief0: BeliefState,
    rule: LearningRule,
    n_steps,
    kernel: PerceivedPriceKernel,
    seed=0,
    z0=0,
    cache_threshold=0.01,
    stochastic=False,
    planning_horizon=None,
) -> Trajectory:
    """Simulate the economy with agents who re-plan each period and learn prices.

    Each period: realized price from the histogram, the perceived problem
    (solved over ``planning_horizon`` periods, cached by beliefs) gives the
    first-date policy at the realized price, the histogram moves, beliefs
    are revised.
    """
    H = model.horizon if planning_horizon is None else int(planning_horizon)
    zs = sample_aggregate_chain(model, z0, n_steps, seed)
    solver = lambda theta, last, start: bellman_backward(model, kernel, theta if kernel.n_params else None, H, stochastic)
    with warnings.catch_warnings():
        if cache_threshold == 0:
            warnings.simplefilter("ignore")
        cache = ThetaCache(solver, cache_threshold)
    if cache_threshold == 0:
        log.info("belief cache disabled: solving every period")
    if kernel.n_params == 0:
        cache.threshold = np.inf
    m = np.asarray(m0.probs if isinstance(m0, Histogram) else m0, dtype=float)
    belief = belief0
    prices, thetas, dens, pols, errs = [], [], [], [], [np.nan]
    for t in range(n_steps + 1):
        z = int(zs[t])
        p = float(model.price(m, z))
        if t > 0:
            errs.append(kernel.expected_next(prices[-1], model.z_values[zs[t - 1]], belief_prev.theta) - p)
            belief = discrete_belief_update(rule, belief, kernel, prices[-1], model.z_values[zs[t - 1]], p)
        prices.append(p)
        thetas.append(belief.theta.copy())
        dens.append(m)
        if t == n_steps:
            break
        theta = belief.theta if kernel.n_params else np.zeros(1)
        sol, _ = cache.get(theta)
        pol = policy_at_price(sol, z, p, stochastic)
        pols.append(pol)
        m = chapman_step(m, pol, z, model).probs
        belief_prev = belief
    return Trajectory(
        times=np.arange(n_steps + 1, dtype=float),
        prices=np.array(prices)[:, None],
        densities=np.array(dens),
        beliefs=np.array(thetas),
        diagnostics={
            "z": zs,
            "policies": np.array(pols),
            "forecast_errors": np.array(errs)[:, None],
            "cache_solves": cache.solves,
            "cache_hits": cache.hits,
            "final_belief": belief,
        },
    )


def stationary_histogram(model: DiscreteModel, kernel: PerceivedPriceKernel, z=0, consistent=None, max_iter=500, tol=1e-14, stochastic=False):
    """Histogram reproduced by the policy of agents holding self-confirming beliefs.

    ``consistent(p)`` maps a price to the beliefs that forecast it forever
    (default: level ``p`` or VAR ``(p, 0, 0)``). Returns
    ``(histogram, price, beliefs)``.
    """
    if consistent is None:
        consistent = lambda p: np.array([p]) if kernel.kind == "level" else np.array([p, 0.0, 0.0])[: max(kernel.n_params, 1)]
    m = np.full(model.n_x, 1.0 / model.n_x)
    for _ in range(max_iter):
        p = float(model.price(m, z))
        theta = consistent(p)
        sol = bellman_backward(model, kernel, theta if kernel.n_params else None, stochastic=stochastic)
        A = model.induced_matrix(policy_at_price(sol, z, p, stochastic), z)
        # stationary vector: left null space of A - I with unit mass
        M = np.vstack([A.T - np.eye(model.n_x), np.ones(model.n_x)])
        rhs = np.zeros(model.n_x + 1)
        rhs[-1] = 1.0
        target = np.linalg.lstsq(M, rhs, rcond=None)[0]
        target = np.clip(target, 0.0, None)
        target /= target.sum()
        step = target - m
        m = m + 0.5 * step
        if np.max(np.abs(step)) < tol:
            m = target
            break
    p = float(model.price(m, z))
    return Histogram(m), p, consistent(p)


def toy_model(variant="controlled", n_z=2, horizon=3, discount=0.9):
    """A two-state labour economy used for demonstrations and checks.

    Households are unemployed (0) or employed (1). Searching (action 1)
    raises the chance of employment at a cost; the price is a wage that
    falls with employment and rises with the aggregate state.

    ``controlled``: reward quadratic in the wage, search matters.
    ``linear``: reward affine in the wage, choice cannot depend on the
    histogram, so every value is affine in it.
    ``mrp`` / ``mrp_linear``: a single action, quadratic or affine reward.
    """
    if variant not in ("controlled", "linear", "mrp", "mrp_linear"):
        raise DomainError(f"unknown toy variant {variant!r}")
    Tz = np.array([[0.7, 0.3], [0.4, 0.6]]) if n_z == 2 else np.ones((1, 1))
    zv = np.array([-1.0, 1.0]) if n_z == 2 else np.zeros(1)
    stay = np.array([[[0.8, 0.2], [0.3, 0.7]], [[0.7, 0.3], [0.2, 0.8]]])[:n_z]
    search = np.array([[[0.4, 0.6], [0.1, 0.9]], [[0.3, 0.7], [0.05, 0.95]]])[:n_z]
    quad = variant in ("controlled", "mrp")
    R = np.zeros((3, n_z, 2, 2))
    R[0] = [[0.0, -0.35], [1.0, 0.65]]
    R[1] = [[0.0, 0.3], [0.5, 0.8]] if variant != "linear" else [[0.3, 0.3], [0.8, 0.8]]
    R[2] = [[0.0, 0.0], [-0.2, -0.2]] if quad else 0.0
    V = np.zeros((3, n_z, 2))
    V[0] = [0.0, 2.0]
    V[1] = [0.0, 0.5]
    V[2] = [0.0, -0.1] if quad else 0.0
    if variant == "controlled":
        Tx = np.stack([stay, search], axis=1)
    elif variant == "linear":
        Tx = np.stack([stay, stay], axis=1)
    else:
        Tx = stay[:, None]
        R = R[..., :1]
    return DiscreteModel(
        z_kernel=Tz,
        x_kernel=Tx,
        reward_coef=R,
        terminal_coef=V,
        price_intercept=1.0 + 0.2 * zv,
        price_weights=np.tile([0.0, -0.6], (n_z, 1)),
        discount=discount,
        horizon=horizon,
        z_values=zv,
    )
