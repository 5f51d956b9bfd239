"""Implicit upwind finite differences for the consumption-savings HJB.

All kernels accept value arrays with arbitrary leading axes ``(..., n_a, n_y)``
together with prices broadcastable to ``(..., 2)``, so the same code solves a
single household problem or a stack of problems indexed by aggregate state,
perceived price or belief parameter.

The discretised generator is carried as neighbour coefficients
``{"a+", "a-", "y+", "y-"}`` (rates towards the next/previous wealth and
income node). Every coefficient is nonnegative and the diagonal is minus
their sum, so rows of the assembled matrix sum to zero by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded

from .errors import ConstraintError, ConvergenceError, DomainError, NumericalError
from .model import ModelParams, OUIncome, StateGrid, TwoStateIncome, marginal_utility, utility

# marginal value floor: a nonpositive one-sided derivative means "consume a lot"
_LAMBDA_FLOOR = 1e-12
_DIRECTIONS = ("a+", "a-", "y+", "y-")


@dataclass(frozen=True, eq=False)
class ValueField:
    values: np.ndarray
    t: float = 0.0


@dataclass(frozen=True, eq=False)
class PolicyField:
    """Consumption at every node and the wealth drift it implies."""

    consumption: np.ndarray
    drift: np.ndarray


@dataclass(frozen=True, eq=False)
class TransitionOperator:
    """Generator matrix over the flattened grid (row = outflow node)."""

    matrix: sp.csr_matrix
    coeffs: dict

    @property
    def shape(self):
        return self.matrix.shape

    def row_sums(self):
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def offdiagonal_min(self):
        off = self.matrix - sp.diags(self.matrix.diagonal())
        return off.min() if off.nnz else 0.0


# ---------------------------------------------------------------------------
# pointwise primitives


def optimal_consumption(lam, crra):
    """Consumption solving ``U'(c) = lam``."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise DomainError("marginal value must be > 0; apply the state-constraint bound instead")
    c = lam ** (-1.0 / crra)
    return float(c) if c.ndim == 0 else c


def hamiltonian(x, lam, p, crra):
    """``max_c U(c) + lam (r a + w y - c)`` at the node ``x = (a, y)``."""
    resources = p[0] * x[0] + p[1] * x[1]
    c = optimal_consumption(lam, crra)
    return utility(c, crra) + lam * (resources - c)


# ---------------------------------------------------------------------------
# policies and generator coefficients


def upwind_policy(V, prices, grid: StateGrid, params: ModelParams):
    """Consumption and drift from one-sided wealth derivatives of ``V``.

    Forward differences are used where they imply saving, backward ones where
    they imply dissaving, otherwise the household consumes its resources.
    At ``a = 0`` the backward derivative is replaced by ``U'(resources)`` and
    at the top node the forward one, which enforces drift >= 0 at the
    constraint and drift <= 0 at the upper boundary.
    """
    V = np.asarray(V, dtype=float)
    a = grid.wealth_nodes
    h = np.diff(a)[:, None]
    res = grid.resources(prices)
    res = np.broadcast_to(res, V.shape)
    crra = params.crra

    dV = np.diff(V, axis=-2) / h
    dVf = np.empty_like(V)
    dVb = np.empty_like(V)
    dVf[..., :-1, :] = dV
    dVb[..., 1:, :] = dV
    edge = marginal_utility(np.maximum(res[..., [0, -1], :], 1e-300), crra)
    dVb[..., 0, :] = edge[..., 0, :]
    dVf[..., -1, :] = edge[..., 1, :]

    cf = np.maximum(dVf, _LAMBDA_FLOOR) ** (-1.0 / crra)
    cb = np.maximum(dVb, _LAMBDA_FLOOR) ** (-1.0 / crra)
    sf = res - cf
    sb = res - cb
    # boundary derivatives come from U'(resources): the drift there is zero
    sf[..., -1, :] = 0.0
    sb[..., 0, :] = 0.0
    fwd = sf > 0
    bwd = sb < 0
    both = fwd & bwd
    if np.any(both):
        # non-concave pocket: keep the larger Hamiltonian
        with np.errstate(over="ignore", invalid="ignore"):
            Hf = utility(cf, crra) + dVf * sf
            Hb = utility(cb, crra) + dVb * sb
        prefer_f = Hf >= Hb
        fwd = fwd & (~both | prefer_f)
        bwd = bwd & (~both | ~prefer_f)
    c = np.where(fwd, cf, np.where(bwd, cb, res))
    s = np.where(fwd, sf, np.where(bwd, sb, 0.0))
    return c, s


def wealth_coefficients(drift, grid: StateGrid, nu: float):
    """Upwind drift plus central diffusion (reflecting ends) along wealth."""
    a = grid.wealth_nodes
    h = np.diff(a)
    up = np.zeros(np.shape(drift))
    down = np.zeros(np.shape(drift))
    hf = np.append(h, np.inf)[:, None]
    hb = np.insert(h, 0, np.inf)[:, None]
    up += np.maximum(drift, 0.0) / hf
    down += np.maximum(-drift, 0.0) / hb
    if np.any(np.maximum(drift, 0.0)[..., -1, :] > 0) or np.any(np.minimum(drift, 0.0)[..., 0, :] < 0):
        raise ConstraintError("drift leaves the wealth grid")
    if nu > 0:
        dif_up = np.zeros(a.size)
        dif_dn = np.zeros(a.size)
        dif_up[1:-1] = 2 * nu / ((h[1:] + h[:-1]) * h[1:])
        dif_dn[1:-1] = 2 * nu / ((h[1:] + h[:-1]) * h[:-1])
        dif_up[0] = 2 * nu / h[0] ** 2
        dif_dn[-1] = 2 * nu / h[-1] ** 2
        up = up + dif_up[:, None]
        down = down + dif_dn[:, None]
    return up, down


def income_coefficients(grid: StateGrid, params: ModelParams):
    """Transition rates between income nodes (independent of the policy)."""
    n_a, n_y = grid.shape
    up = np.zeros(grid.shape)
    down = np.zeros(grid.shape)
    inc = params.income
    if isinstance(inc, TwoStateIncome):
        up[:, 0] = inc.rate_up
        down[:, 1] = inc.rate_down
    elif isinstance(inc, OUIncome):
        y = grid.income_nodes
        h = np.diff(y)
        mu = inc.kappa * (inc.mean - y)
        hf = np.append(h, np.inf)
        hb = np.insert(h, 0, np.inf)
        u = np.maximum(mu, 0.0) / hf
        d = np.maximum(-mu, 0.0) / hb
        u[1:-1] += 2 * inc.nu / ((h[1:] + h[:-1]) * h[1:])
        d[1:-1] += 2 * inc.nu / ((h[1:] + h[:-1]) * h[:-1])
        u[0] += 2 * inc.nu / h[0] ** 2
        d[-1] += 2 * inc.nu / h[-1] ** 2
        u[-1] = 0.0
        d[0] = 0.0
        up[:] = u
        down[:] = d
    else:  # pragma: no cover - guarded by config validation
        raise DomainError(f"unknown income process {inc!r}")
    return up, down


def generator_coefficients(drift, grid: StateGrid, params: ModelParams, nu=None):
    nu = params.nu if nu is None else nu
    a_up, a_dn = wealth_coefficients(drift, grid, nu)
    y_up, y_dn = income_coefficients(grid, params)
    shape = np.shape(drift)
    return {
        "a+": a_up,
        "a-": a_dn,
        "y+": np.broadcast_to(y_up, shape),
        "y-": np.broadcast_to(y_dn, shape),
    }


def _offsets(n_y):
    return {"a+": n_y, "a-": -n_y, "y+": 1, "y-": -1}


def coefficients_to_sparse(coeffs, grid: StateGrid):
    """Assemble a single-cell coefficient dict into a CSR generator."""
    n = grid.size
    offs = _offsets(grid.shape[1])
    rows, cols, vals = [], [], []
    outflow = np.zeros(n)
    idx = np.arange(n)
    for key in _DIRECTIONS:
        c = np.asarray(coeffs[key], dtype=float).reshape(n)
        mask = c != 0
        rows.append(idx[mask])
        cols.append(idx[mask] + offs[key])
        vals.append(c[mask])
        outflow += c
    rows.append(idx)
    cols.append(idx)
    vals.append(-outflow)
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def apply_coefficients(coeffs, U):
    """``A U`` for stacked values ``U`` of shape ``(..., n_a, n_y)``."""
    out = np.zeros_like(U)
    out[..., :-1, :] += coeffs["a+"][..., :-1, :] * (U[..., 1:, :] - U[..., :-1, :])
    out[..., 1:, :] += coeffs["a-"][..., 1:, :] * (U[..., :-1, :] - U[..., 1:, :])
    out[..., :, :-1] += coeffs["y+"][..., :, :-1] * (U[..., :, 1:] - U[..., :, :-1])
    out[..., :, 1:] += coeffs["y-"][..., :, 1:] * (U[..., :, :-1] - U[..., :, 1:])
    return out


def solve_shifted(coeffs, shift, rhs, transpose=False):
    """Solve ``(shift I - A) U = rhs`` (or with ``A^T``) for stacked cells.

    The flattened node ordering makes ``A`` banded with half-bandwidth
    ``n_y``; consecutive cells are independent blocks, so one banded LU
    factorisation covers the whole stack.
    """
    rhs = np.asarray(rhs, dtype=float)
    shape = rhs.shape
    n_y = shape[-1]
    n = rhs.size
    offs = _offsets(n_y)
    shift = np.broadcast_to(np.asarray(shift, dtype=float), shape).reshape(n)
    ab = np.zeros((2 * n_y + 1, n))
    outflow = np.zeros(n)
    for key in _DIRECTIONS:
        c = np.broadcast_to(coeffs[key], shape).reshape(n)
        outflow += c
        k = offs[key]
        if transpose:
            # (A^T)[i + k, i] = A[i, i + k]: stays in column i
            if k > 0:
                ab[n_y + k, : n - k] -= c[: n - k]
            else:
                ab[n_y + k, -k:] -= c[-k:]
        else:
            if k > 0:
                ab[n_y - k, k:] -= c[: n - k]
            else:
                ab[n_y - k, : n + k] -= c[-k:]
    ab[n_y] = shift + outflow
    try:
        sol = solve_banded((n_y, n_y), ab, rhs.reshape(n), check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"banded solve failed: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise NumericalError("banded solve returned non-finite values")
    return sol.reshape(shape)


# ---------------------------------------------------------------------------
# public generator builders


def build_generator(policy: PolicyField, grid: StateGrid, params: ModelParams, p=None):
    """Generator of the actual state dynamics under ``policy``.

    ``p`` is accepted for symmetry with the perceived builder; the drift is
    already stored on the policy.
    """
    drift = np.asarray(policy.drift, dtype=float)
    if np.any(drift[0, :] < -1e-12):
        raise ConstraintError("policy drift is negative at the borrowing constraint")
    coeffs = generator_coefficients(drift, grid, params)
    return TransitionOperator(coefficients_to_sparse(coeffs, grid), coeffs)


def perceived_coefficients(perceived_drift, perceived_diffusion, policy: PolicyField, grid, params):
    a = grid.wealth_nodes[:, None] * np.ones(grid.shape)
    y = grid.income_nodes[None, :] * np.ones(grid.shape)
    x = (a, y)
    mu = np.asarray(perceived_drift(x, policy), dtype=float) * np.ones(grid.shape)
    nu = np.asarray(perceived_diffusion(x, policy), dtype=float) * np.ones(grid.shape)
    if np.any(nu < 0):
        raise DomainError("perceived diffusion must be nonnegative")
    # the perceived process cannot leave the grid either
    mu[0, :] = np.maximum(mu[0, :], 0.0)
    mu[-1, :] = np.minimum(mu[-1, :], 0.0)
    h = np.diff(grid.wealth_nodes)
    hf = np.append(h, np.inf)[:, None]
    hb = np.insert(h, 0, np.inf)[:, None]
    up = np.maximum(mu, 0.0) / hf
    down = np.maximum(-mu, 0.0) / hb
    # node-dependent diffusion, same stencil as the actual generator
    dif_up = np.zeros(grid.shape)
    dif_dn = np.zeros(grid.shape)
    dif_up[1:-1] = 2 * nu[1:-1] / ((h[1:] + h[:-1]) * h[1:])[:, None]
    dif_dn[1:-1] = 2 * nu[1:-1] / ((h[1:] + h[:-1]) * h[:-1])[:, None]
    dif_up[0] = 2 * nu[0] / h[0] ** 2
    dif_dn[-1] = 2 * nu[-1] / h[-1] ** 2
    y_up, y_dn = income_coefficients(grid, params)
    return {"a+": up + dif_up, "a-": down + dif_dn, "y+": y_up, "y-": y_dn}


def build_perceived_generator(perceived_drift, perceived_diffusion, policy: PolicyField, grid, params):
    """Generator of the state dynamics as the household believes them to be.

    ``perceived_drift(x, policy)`` and ``perceived_diffusion(x, policy)``
    receive ``x = (wealth, income)`` node arrays. The result only enters value
    computations; densities always move with :func:`build_generator`.
    """
    coeffs = perceived_coefficients(perceived_drift, perceived_diffusion, policy, grid, params)
    return TransitionOperator(coefficients_to_sparse(coeffs, grid), coeffs)


# ---------------------------------------------------------------------------
# time stepping


def backward_step_array(V_next, prices, dt, grid, params, coeff_override=None):
    """Array-level implicit step for stacked cells; returns ``(V, c, s)``."""
    c, s = upwind_policy(V_next, prices, grid, params)
    if coeff_override is None:
        coeffs = generator_coefficients(s, grid, params)
    else:
        coeffs = coeff_override(PolicyField(c, s))
    rhs = utility(c, params.crra) + V_next / dt
    V = solve_shifted(coeffs, params.rho + 1.0 / dt, rhs)
    return V, c, s


def hjb_backward_step(
    u_next: ValueField,
    p_s,
    dt,
    grid: StateGrid,
    params: ModelParams,
    generator_override: Optional[Callable[[PolicyField], TransitionOperator]] = None,
):
    """One backward-Euler step of the HJB at prices ``p_s``.

    The policy is read off ``u_next``; the new value solves
    ``(rho + 1/dt - A) u = U(c) + u_next / dt``. ``generator_override`` maps
    the policy to a perceived :class:`TransitionOperator` used in place of
    the actual one.
    """
    override = None
    if generator_override is not None:
        override = lambda pol: generator_override(pol).coeffs  # noqa: E731
    V, c, s = backward_step_array(u_next.values, np.asarray(p_s, float), dt, grid, params, override)
    return ValueField(V, u_next.t - dt), PolicyField(c, s)


def solve_hjb_path(price_path, terminal: ValueField, grid, params, dt=None):
    """Backward sweep against a price path ``(n_steps, 2)``.

    Returns ``(values, policies)`` with ``values[n]`` the value at the start
    of step ``n`` (``values[-1]`` is the terminal condition) and
    ``policies[n]`` the consumption used over step ``n``.
    """
    dt = params.dt if dt is None else dt
    price_path = np.atleast_2d(np.asarray(price_path, dtype=float))
    n = price_path.shape[0]
    values = np.empty((n + 1,) + grid.shape)
    cons = np.empty((n,) + grid.shape)
    drift = np.empty((n,) + grid.shape)
    values[n] = terminal.values
    for k in range(n - 1, -1, -1):
        values[k], cons[k], drift[k] = backward_step_array(values[k + 1], price_path[k], dt, grid, params)
    return values, PolicyArrays(cons, drift)


@dataclass(frozen=True, eq=False)
class PolicyArrays:
    """Policies stacked along a leading time axis."""

    consumption: np.ndarray
    drift: np.ndarray

    def __getitem__(self, k):
        return PolicyField(self.consumption[k], self.drift[k])

    def __len__(self):
        return self.consumption.shape[0]


def stationary_residual(V, prices, grid, params):
    """``rho V - U(c) - A_c V`` with ``c`` the upwind policy of ``V``."""
    c, s = upwind_policy(V, prices, grid, params)
    coeffs = generator_coefficients(s, grid, params)
    return params.rho * V - utility(c, params.crra) - apply_coefficients(coeffs, V)


def myopic_value(prices, grid, params):
    """Value of consuming current resources forever."""
    res = np.maximum(grid.resources(prices), 1e-12)
    return utility(res, params.crra) / params.rho


def solve_stationary_array(prices, grid, params, V0=None, dt=1000.0, tol=1e-12, max_iter=2000):
    """Stacked stationary HJB by repeated large implicit steps."""
    if params.rho <= 0:
        raise DomainError("the stationary HJB needs rho > 0")
    V = myopic_value(prices, grid, params) if V0 is None else np.array(V0, dtype=float)
    history = []
    for _ in range(max_iter):
        V_new, c, s = backward_step_array(V, prices, dt, grid, params)
        change = float(np.max(np.abs(V_new - V)))
        history.append(change)
        V = V_new
        if change < tol * max(1.0, float(np.max(np.abs(V)))):
            return V, c, s, history
    raise ConvergenceError(f"stationary HJB did not converge (last change {history[-1]:.3e})", history)


def solve_stationary_hjb(p, grid: StateGrid, params: ModelParams, dt=1000.0, tol=1e-12, max_iter=2000, V0=None):
    """Infinite-horizon HJB at constant prices ``p``."""
    V, c, s, _ = solve_stationary_array(np.asarray(p, float), grid, params, V0, dt, tol, max_iter)
    policy = PolicyField(c, s)
    return ValueField(V), policy, build_generator(policy, grid, params)
