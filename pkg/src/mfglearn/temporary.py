"""Temporary equilibrium: households plan against forecast prices.

At every date households re-solve their problem backward against the price
path they currently predict, act on the first instant of that plan, and the
population moves under the policy they actually executed. Beliefs are then
revised from the realized price. One forward pass, no fixed point.

The second half of the module solves the same household problem once for a
whole range of prices (the price becomes a state that drifts according to the
perceived law of motion), optionally with the belief parameters as further
states moved by the learning rule.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.interpolate import make_interp_spline

from .beliefs import PLM, BeliefState, LearningRule, Predictor, plm_drift, predict_price_path, update_beliefs
from .density import forward_step_array, fp_forward_step
from .errors import DomainError, MFGError, ShapeError
from .hjb import PolicyField, ValueField, backward_step_array, build_generator, upwind_policy
from .model import Density, ModelParams, StateGrid, price_functional
from .trajectory import Trajectory
from .transport import PriceAxes, axis_rates, implicit_axis_step, multilinear, rk4_foot, semi_lagrangian_step

log = logging.getLogger(__name__)

Terminal = Union[ValueField, Callable[[np.ndarray], ValueField]]


def terminal_values(terminal: Terminal, p_end):
    """Continuation value at the horizon for a predicted final price."""
    if callable(terminal):
        return np.asarray(terminal(p_end).values, dtype=float)
    return np.asarray(terminal.values, dtype=float)


def plan_backward(path, V_T, grid, params, dt, inner_stride=1):
    """Sweep back from ``V_T`` against ``path`` and return the first-step plan.

    ``path[k]`` is the price over step ``k``; ``path`` has one entry per step.
    With ``inner_stride > 1`` the far end of the horizon is crossed in
    strides of ``inner_stride * dt`` (prices sampled at the stride start)
    while the last ``n % inner_stride`` steps near the present stay fine.
    Returns ``(V_t, consumption, drift)``.
    """
    n = path.shape[0]
    if n == 0:
        raise DomainError("no steps left before the horizon")
    V = V_T
    k = max(int(inner_stride), 1)
    rest = n % k if k > 1 else n
    if k > 1:
        if rest == 0:
            rest = k
        for j in range((n - rest) // k - 1, -1, -1):
            V, _, _ = backward_step_array(V, path[rest + j * k], k * dt, grid, params)
    c = s = None
    for i in range(rest - 1, -1, -1):
        V, c, s = backward_step_array(V, path[i], dt, grid, params)
    return V, c, s


def temporary_equilibrium_step(
    m_t: Density,
    belief: BeliefState,
    t,
    predictor: Predictor,
    rule: LearningRule,
    grid: StateGrid,
    params: ModelParams,
    terminal: Terminal,
    horizon=None,
    dt=None,
    inner_stride=1,
):
    """Advance the economy by one date.

    Returns ``(policy, m_next, belief_next, p_t, info)``; ``info`` holds the
    predicted path, whether it was clipped, and the value at ``t``.
    """
    dt = params.dt if dt is None else dt
    horizon = params.horizon if horizon is None else horizon
    try:
        p_t = price_functional(m_t, 0.0, grid, params)
        pred = predict_price_path(predictor, t, p_t, belief.theta, horizon - t, dt)
        path = np.array(pred.values[:-1], dtype=float)
        start_gap = float(np.max(np.abs(path[0] - p_t)))
        # the plan for today uses today's realized price
        path[0] = p_t
        V_T = terminal_values(terminal, pred.values[-1])
        V_t, c, s = plan_backward(path, V_T, grid, params, dt, inner_stride)
        policy = PolicyField(c, s)
        op = build_generator(policy, grid, params)
        m_next = fp_forward_step(m_t, op, dt)
        belief_next = update_beliefs(rule, belief, p_t, dt)
    except MFGError as exc:
        raise type(exc)(f"at t={t:g}: {exc}") from exc
    info = {
        "predicted": pred.values,
        "clipped": pred.clipped,
        "start_gap": start_gap,
        "value": V_t,
    }
    return policy, m_next, belief_next, p_t, info


def run_temporary_equilibrium(
    m0: Density,
    belief0: BeliefState,
    predictor: Predictor,
    rule: LearningRule,
    grid: StateGrid,
    params: ModelParams,
    n_steps=None,
    terminal: Terminal = None,
    dt=None,
    inner_stride=1,
    keep_densities=True,
):
    """Single forward pass over ``n_steps`` dates.

    The horizon agents plan against is ``n_steps * dt``. ``prices[n]`` is
    the price functional of ``densities[n]`` for every stored date, the last
    included.
    """
    dt = params.dt if dt is None else dt
    n_steps = params.n_steps if n_steps is None else n_steps
    horizon = n_steps * dt
    if terminal is None:
        raise DomainError("a terminal value is required")
    m = m0
    belief = belief0
    prices = [price_functional(m0, 0.0, grid, params)]
    dens = [m0.mass]
    thetas = [belief0.theta.copy()]
    cons = []
    # forecast_err[n]: forecast made at date n - 1 for date n, minus the realized price
    forecast_err = [np.full(2, np.nan)]
    clipped = []
    gaps = []
    for n in range(n_steps):
        t = n * dt
        policy, m, belief, p_t, info = temporary_equilibrium_step(
            m, belief, t, predictor, rule, grid, params, terminal, horizon, dt, inner_stride
        )
        cons.append(policy.consumption)
        clipped.append(info["clipped"])
        gaps.append(info["start_gap"])
        p_next = price_functional(m, 0.0, grid, params)
        prices.append(p_next)
        forecast_err.append(info["predicted"][1] - p_next)
        thetas.append(belief.theta.copy())
        if keep_densities:
            dens.append(m.mass)
    return Trajectory(
        times=np.arange(n_steps + 1) * dt,
        prices=np.array(prices),
        densities=np.array(dens) if keep_densities else m.mass[None],
        consumption=np.array(cons) if cons else None,
        beliefs=np.array(thetas),
        diagnostics={
            "forecast_errors": np.array(forecast_err),
            "clipped": np.array(clipped, dtype=bool),
            "start_gaps": np.array(gaps),
            "final_belief": belief,
        },
    )


# ---------------------------------------------------------------------------
# value over prices

TRANSPORTS = ("semi_lagrangian", "upwind")


@dataclass(frozen=True, eq=False)
class Stage:
    """One split transport step along an aggregate axis.

    Semi-Lagrangian stages carry ``foot``, the position each node reaches
    after ``dt``; implicit upwind stages carry jump rates ``up``/``down``.
    """

    axis: int
    nodes: np.ndarray
    foot: Optional[np.ndarray] = None
    up: Optional[np.ndarray] = None
    down: Optional[np.ndarray] = None

    def apply(self, U, dt):
        if self.foot is not None:
            return semi_lagrangian_step(U, self.axis, self.nodes, self.foot, self.foot.ndim)
        return implicit_axis_step(U, self.axis, self.up, self.down, dt)

    def courant(self, dt):
        """Largest distance moved per step, in cells."""
        h = float(np.min(np.diff(self.nodes)))
        if self.foot is not None:
            x = self.nodes.reshape((-1,) + (1,) * (self.foot.ndim - self.axis - 1))
            return float(np.max(np.abs(self.foot - x))) / h
        return float(np.max(self.up + self.down)) * dt


def make_stage(axis, nodes, coord, drift, dt, transport="semi_lagrangian", diffusion=0.0):
    """Split stage along ``axis``.

    ``coord`` is this axis' coordinate at every aggregate node and ``drift``
    maps such an array to the drift there (other coordinates held fixed).
    Diffusion forces the implicit upwind scheme.
    """
    if transport not in TRANSPORTS:
        raise DomainError(f"unknown transport {transport!r}")
    nodes = np.asarray(nodes, dtype=float)
    coord = np.asarray(coord, dtype=float)
    if transport == "semi_lagrangian" and not np.any(diffusion):
        return Stage(axis, nodes, foot=rk4_foot(coord, drift, dt))
    d = np.moveaxis(drift(coord), axis, -1)
    up, down = axis_rates(d, nodes, np.moveaxis(np.broadcast_to(diffusion, coord.shape), axis, -1))
    return Stage(axis, nodes, up=np.moveaxis(up, -1, axis), down=np.moveaxis(down, -1, axis))


def apply_stages(U, stages, dt):
    for st in stages:
        U = st.apply(U, dt)
    return U


def coordinate_drift(plm: PLM, theta, i, n_prices):
    """Perceived drift of price coordinate ``i`` as a function of that coordinate."""
    theta = np.asarray(theta, dtype=float)
    if plm.family == "linear":
        a, b = theta[..., i], theta[..., n_prices + i]
        return lambda x: a + b * x
    level = theta[..., i]
    return lambda x: plm.kappa * (level - x)


def price_stages(axes: PriceAxes, theta, plm: PLM, dt, transport="semi_lagrangian", lead_shape=()):
    """Transport stages along every price axis for frozen beliefs.

    ``theta`` is either one parameter vector or an array over ``lead_shape``
    (belief axes placed in front of the price axes).
    """
    theta = np.asarray(theta, dtype=float)
    n = axes.ndim
    if theta.shape[-1] != plm.n_params(n):
        raise ShapeError(f"{plm.family} PLM on {n} price axes needs {plm.n_params(n)} parameters")
    lead = len(lead_shape)
    theta = theta.reshape(theta.shape[:-1] + (1,) * n + theta.shape[-1:]) if lead else theta
    mesh = axes.mesh()
    full = lead_shape + axes.shape
    stages = []
    for i, nodes in enumerate(axes.nodes):
        coord = np.broadcast_to(mesh[..., i], full)
        stages.append(make_stage(lead + i, nodes, coord, coordinate_drift(plm, theta, i, n), dt, transport))
    return stages


@dataclass(eq=False)
class PriceSpaceSolution:
    """Value over ``(belief axes, price axes, wealth, income)`` at each date.

    ``values[k]`` is the value at date ``t0 + k dt`` with ``values[-1]`` the
    terminal slice. When ``store_path`` was off only the first two dates are
    kept, enough for the policy over step 0. ``stages[k]`` lists the
    transports applied over step ``k`` (one list when they do not change).
    """

    values: np.ndarray
    axes: PriceAxes
    theta: np.ndarray
    plm: PLM
    dt: float
    stages: list = field(repr=False, default_factory=list)
    lead_axes: tuple = ()
    courant: float = 0.0

    def _stages(self, k):
        return self.stages[k] if self.stages and isinstance(self.stages[0], list) else self.stages

    def transported(self, k):
        """The value that feeds the household step over step ``k``."""
        return apply_stages(self.values[k + 1], self._stages(k), self.dt)

    def _point(self, p, lead_point):
        nodes = tuple(self.lead_axes) + tuple(self.axes.nodes)
        point = tuple(np.atleast_1d(lead_point)) + tuple(self.axes.coords(p))
        return nodes, point

    def policy_at(self, k, p, grid, params, lead_point=()):
        """Policy over step ``k`` at realized prices ``p``."""
        nodes, point = self._point(p, lead_point)
        U_p = interpolate(self.transported(k), nodes, point)
        c, s = upwind_policy(U_p, np.asarray(p, float), grid, params)
        return PolicyField(c, s)

    def value_at(self, k, p, lead_point=()):
        nodes, point = self._point(p, lead_point)
        return interpolate(self.values[k], nodes, point)


def interpolate(values, axes_nodes, point):
    """Cubic-spline evaluation over the leading axes (multilinear for two-node axes)."""
    out = np.asarray(values, dtype=float)
    for nodes, x in zip(axes_nodes, point):
        x = float(np.clip(x, nodes[0], nodes[-1]))
        if nodes.size < 4:
            out = multilinear(out, (nodes,), (x,))
        else:
            out = make_interp_spline(nodes, out, k=3, axis=0)(x)
    return out


def _broadcast_terminal(terminal, prices, lead_shape):
    if callable(terminal):
        V = np.stack([terminal(p).values for p in prices.reshape(-1, 2)])
        V = V.reshape(prices.shape[:-1] + V.shape[-2:])
    else:
        V = np.asarray(terminal.values if isinstance(terminal, ValueField) else terminal, dtype=float)
        V = np.broadcast_to(V, prices.shape[:-1] + V.shape[-2:])
    return np.broadcast_to(V, lead_shape + V.shape).copy()


def _report_courant(stages, dt):
    worst = max((st.courant(dt) for st in stages), default=0.0)
    if worst > 1.0:
        # both transports are unconditionally stable; large numbers cost accuracy only
        log.info("aggregate-axis transport moves up to %.3g cells per step", worst)
    return worst


def solve_price_space_hjb(
    theta,
    grid: StateGrid,
    axes: PriceAxes,
    params: ModelParams,
    terminal: Terminal,
    plm: PLM = PLM(),
    n_steps=None,
    dt=None,
    store_path=True,
    transport="semi_lagrangian",
    z=0.0,
) -> PriceSpaceSolution:
    """Backward solve with the price as a state moving by the perceived law.

    Each step first carries the value along the perceived price flow (per
    price axis), then takes the household step at the node prices. With
    zero perceived drift the transport is the identity and every price
    slice is the constant-price solution. ``z`` fixes the aggregate state
    used for the wage in ``rate`` mode.
    """
    dt = params.dt if dt is None else dt
    n_steps = params.n_steps if n_steps is None else n_steps
    theta = np.asarray(theta, dtype=float)
    prices = axes.prices(z)
    V = _broadcast_terminal(terminal, prices, ())
    stages = price_stages(axes, theta, plm, dt, transport)
    courant = _report_courant(stages, dt)
    out = [None] * n_steps + [V]
    for k in range(n_steps - 1, -1, -1):
        U = apply_stages(V, stages, dt)
        V, _, _ = backward_step_array(U, prices, dt, grid, params)
        out[k] = V
        if not store_path and k + 2 <= n_steps:
            out[k + 2] = None
    if not store_path:
        out = out[:2]
    return PriceSpaceSolution(np.array(out), axes, theta, plm, dt, stages, courant=courant)


def solve_internalized_hjb(
    grid: StateGrid,
    axes: PriceAxes,
    theta_nodes,
    params: ModelParams,
    rule: LearningRule,
    terminal: Terminal,
    plm: PLM = PLM("reverting"),
    n_steps=None,
    dt=None,
    t0=0.0,
    store_path=True,
    transport="semi_lagrangian",
) -> PriceSpaceSolution:
    """Price-space HJB with the belief parameters as further states.

    ``theta_nodes`` holds one node array per belief parameter (at most
    two). Beliefs drift by the learning rule, which must be a level rule so
    that there is one belief per price coordinate; the decreasing gain is
    evaluated at the absolute date ``t0 + k dt``. Each step transports along
    the belief axes, then the price axes, then takes the household step.
    """
    dt = params.dt if dt is None else dt
    n_steps = params.n_steps if n_steps is None else n_steps
    theta_nodes = tuple(np.asarray(n, dtype=float) for n in theta_nodes)
    d = len(theta_nodes)
    if d > 2:
        raise ShapeError("internalized learning supports at most two belief parameters")
    if d != plm.n_params(axes.ndim):
        raise ShapeError(f"{plm.family} PLM on {axes.ndim} price axes needs {plm.n_params(axes.ndim)} belief axes")
    if rule.kind == "recursive_least_squares":
        raise DomainError("internalized learning needs a level rule (decreasing/constant gain or none)")
    if rule.kind != "none" and d != axes.ndim:
        raise ShapeError("level learning needs one belief per price coordinate")
    theta_mesh = np.stack(np.meshgrid(*theta_nodes, indexing="ij"), axis=-1)
    lead_shape = theta_mesh.shape[:-1]
    full = lead_shape + axes.shape
    prices = axes.prices()
    V = _broadcast_terminal(terminal, prices, lead_shape)
    p_stages = price_stages(axes, theta_mesh, plm, dt, transport, lead_shape)
    p_mesh = axes.mesh().reshape((1,) * d + axes.shape + (axes.ndim,))
    courant = _report_courant(p_stages, dt)
    out = [None] * n_steps + [V]
    all_stages = [None] * n_steps
    for k in range(n_steps - 1, -1, -1):
        stages = []
        if rule.kind != "none":
            gain = rule.gain if rule.kind == "constant_gain" else 1.0 / (t0 + k * dt + rule.t0)
            for i, nodes in enumerate(theta_nodes):
                target = np.broadcast_to(p_mesh[..., i], full)
                coord = np.broadcast_to(theta_mesh[..., i].reshape(lead_shape + (1,) * axes.ndim), full)
                stages.append(make_stage(i, nodes, coord, lambda x, tg=target, g=gain: g * (tg - x), dt, transport))
        stages += p_stages
        V, _, _ = backward_step_array(apply_stages(V, stages, dt), prices, dt, grid, params)
        out[k] = V
        all_stages[k] = stages
        if not store_path and k + 2 <= n_steps:
            out[k + 2] = None
    if not store_path:
        out = out[:2]
        all_stages = all_stages[:1]
    return PriceSpaceSolution(np.array(out), axes, theta_mesh, plm, dt, all_stages, theta_nodes, courant)


# ---------------------------------------------------------------------------
# several belief types


def run_heterogeneous_beliefs(
    m0_joint,
    beliefs0,
    predictor: Predictor,
    rule: LearningRule,
    grid: StateGrid,
    params: ModelParams,
    n_steps=None,
    terminal: Terminal = None,
    dt=None,
    inner_stride=1,
):
    """Finite set of belief types sharing one economy.

    ``m0_joint`` has shape ``(J, n_a, n_y)`` and total mass one; type ``j``
    forecasts with its own beliefs only. Each type plans against its own
    predicted path, its mass moves with its own executed policy, and prices
    come from the aggregated density.
    """
    dt = params.dt if dt is None else dt
    n_steps = params.n_steps if n_steps is None else n_steps
    horizon = n_steps * dt
    m = np.array(m0_joint, dtype=float)
    J = m.shape[0]
    if m.shape[1:] != grid.shape or len(beliefs0) != J:
        raise ShapeError("joint density must be (J, n_a, n_y) with one belief per type")
    if abs(m.sum() - 1.0) > 1e-10 or m.min() < 0:
        raise DomainError("joint density must be nonnegative with unit mass")
    type_mass = m.sum(axis=(1, 2))
    beliefs = list(beliefs0)
    agg = Density(m.sum(axis=0))
    prices = [price_functional(agg, 0.0, grid, params)]
    dens = [m.copy()]
    thetas = [np.array([b.theta for b in beliefs])]
    cons = []
    for n in range(n_steps):
        t = n * dt
        p_t = prices[-1]
        new = np.empty_like(m)
        step_cons = []
        for j in range(J):
            pred = predict_price_path(predictor, t, p_t, beliefs[j].theta, horizon - t, dt)
            path = np.array(pred.values[:-1], dtype=float)
            path[0] = p_t
            _, c, s = plan_backward(path, terminal_values(terminal, pred.values[-1]), grid, params, dt, inner_stride)
            op = build_generator(PolicyField(c, s), grid, params)
            # the step is linear: a type's sub-probability moves as is
            new[j] = forward_step_array(m[j], op.coeffs, dt)
            step_cons.append(c)
            beliefs[j] = update_beliefs(rule, beliefs[j], p_t, dt)
        m = new
        cons.append(np.array(step_cons))
        prices.append(price_functional(Density(m.sum(axis=0)), 0.0, grid, params))
        dens.append(m.copy())
        thetas.append(np.array([b.theta for b in beliefs]))
    return Trajectory(
        times=np.arange(n_steps + 1) * dt,
        prices=np.array(prices),
        densities=np.array(dens),
        consumption=np.array(cons) if cons else None,
        beliefs=np.array(thetas),
        diagnostics={"type_mass": type_mass},
    )
