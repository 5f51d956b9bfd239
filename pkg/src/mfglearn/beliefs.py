"""Price forecasts and the learning rules that revise them.

Prediction and learning are kept apart: :func:`predict_price_path` reads a
belief and never changes it, :func:`update_beliefs` returns a new belief.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .errors import DomainError, ShapeError
from .model import wage_on_frontier

log = logging.getLogger(__name__)

PREDICTOR_KINDS = ("perfect_foresight", "constant_current", "adaptive_level", "parametric_plm")
RULE_KINDS = ("decreasing_gain", "constant_gain", "recursive_least_squares", "none")
PLM_FAMILIES = ("linear", "reverting")


@dataclass(frozen=True)
class PLM:
    """Parametric perceived law of motion for prices.

    ``linear``: drift ``theta0 + theta1 * p`` per price, with ``theta`` laid
    out as ``[theta0 (l entries), theta1 (l entries)]``.
    ``reverting``: drift ``kappa (theta - p)``, ``theta`` being the perceived
    long-run level.
    """

    family: str = "linear"
    kappa: float = 0.5

    def __post_init__(self):
        if self.family not in PLM_FAMILIES:
            raise DomainError(f"unknown PLM family {self.family!r}")

    def n_params(self, n_prices):
        return 2 * n_prices if self.family == "linear" else n_prices


def plm_drift(p, theta, plm: PLM = PLM()):
    """Perceived ``dp/dt`` at price ``p``; broadcasts over leading axes of ``p``."""
    p = np.asarray(p, dtype=float)
    theta = np.asarray(theta, dtype=float)
    n = p.shape[-1] if p.ndim else 1
    if theta.shape[-1] != plm.n_params(n):
        raise ShapeError(f"{plm.family} PLM with {n} prices needs {plm.n_params(n)} parameters, got {theta.shape[-1]}")
    if plm.family == "linear":
        th0 = theta[..., :n]
        th1 = theta[..., n:]
        out = th0 + th1 * p
    else:
        out = plm.kappa * (theta - p)
    return out if p.ndim else out.reshape(())


@dataclass(frozen=True, eq=False)
class Predictor:
    """How agents turn today's information into a price path.

    ``path`` (perfect foresight only) is indexed by absolute date on the
    model's time grid. ``smoothing`` is the adaptive-expectations weight
    carried alongside the level forecast. ``price_box`` is a pair of arrays
    bounding integrated PLM paths. With ``frontier_scale`` set the PLM moves
    the interest rate only and the wage follows the factor-price frontier at
    that production scale (aggregate state zero).
    """

    kind: str = "constant_current"
    path: Optional[np.ndarray] = None
    smoothing: float = 0.1
    plm: PLM = PLM()
    price_box: Optional[tuple] = None
    frontier_scale: Optional[float] = None

    def __post_init__(self):
        if self.kind not in PREDICTOR_KINDS:
            raise DomainError(f"unknown predictor {self.kind!r}")
        if self.kind == "adaptive_level" and self.smoothing <= 0:
            raise DomainError("adaptive smoothing must be > 0")
        if self.kind == "perfect_foresight" and self.path is None:
            raise DomainError("perfect foresight needs an external price path")


class PredictedPath(NamedTuple):
    values: np.ndarray
    clipped: bool


@dataclass(frozen=True, eq=False)
class BeliefState:
    """PLM parameters plus the statistics the learning rule carries.

    ``moment`` is the regressor second-moment matrix of least-squares
    learning (one per price when the PLM is linear), ``last_price`` the
    previous observation and ``identified`` whether the moments have become
    invertible.
    """

    theta: np.ndarray
    t: float = 0.0
    moment: Optional[np.ndarray] = None
    last_price: Optional[np.ndarray] = None
    identified: bool = True

    def __post_init__(self):
        th = np.array(self.theta, dtype=float).ravel()
        th.setflags(write=False)
        object.__setattr__(self, "theta", th)
        if th.size > 4:
            raise ShapeError("at most four belief parameters are supported")
        if self.moment is not None:
            M = np.array(self.moment, dtype=float)
            if not np.allclose(M, np.swapaxes(M, -1, -2)):
                raise DomainError("moment matrix must be symmetric")
            M.setflags(write=False)
            object.__setattr__(self, "moment", M)


def _rk4(p0, theta, plm, n, dt):
    out = np.empty((n + 1,) + p0.shape)
    out[0] = p0
    p = p0
    for k in range(n):
        k1 = plm_drift(p, theta, plm)
        k2 = plm_drift(p + 0.5 * dt * k1, theta, plm)
        k3 = plm_drift(p + 0.5 * dt * k2, theta, plm)
        k4 = plm_drift(p + dt * k3, theta, plm)
        p = p + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = p
    return out


def predict_price_path(pred: Predictor, t, current_p, theta, horizon, dt) -> PredictedPath:
    """Forecast on ``n + 1`` dates ``t, t + dt, ..., t + n dt`` with ``n = horizon / dt``.

    Every kind except perfect foresight starts at ``current_p``. The
    perfect-foresight path is returned as supplied; if it ends early its
    last entry is held.
    """
    n = int(round(horizon / dt))
    p0 = np.atleast_1d(np.asarray(current_p, dtype=float))
    clipped = False
    if pred.kind == "perfect_foresight":
        path = np.atleast_2d(np.asarray(pred.path, dtype=float))
        i0 = int(round(t / dt))
        vals = path[i0 : i0 + n + 1]
        if vals.shape[0] < n + 1:
            pad = np.repeat(path[-1:], n + 1 - vals.shape[0], axis=0)
            vals = np.concatenate([vals, pad])
        return PredictedPath(vals, False)
    if pred.kind == "constant_current":
        vals = np.tile(p0, (n + 1, 1))
    elif pred.kind == "adaptive_level":
        level = np.asarray(theta, dtype=float)[: p0.size]
        vals = np.tile(level, (n + 1, 1))
        vals[0] = p0
    elif pred.frontier_scale is not None:
        r = _rk4(p0[:1], np.asarray(theta, dtype=float), pred.plm, n, dt)
        vals = np.column_stack([r[:, 0], wage_on_frontier(r[:, 0], 0.0, pred.frontier_scale)])
        vals[0] = p0
    else:
        vals = _rk4(p0, np.asarray(theta, dtype=float), pred.plm, n, dt)
    if not np.all(np.isfinite(vals)):
        clipped = True
        vals = np.where(np.isfinite(vals), vals, np.nan)
    if pred.price_box is not None:
        lo, hi = (np.asarray(b, dtype=float) for b in pred.price_box)
        bad = ~np.isfinite(vals) | (vals < lo) | (vals > hi)
        if np.any(bad):
            clipped = True
            # once a path escapes it stays at the bound it crossed
            vals = np.clip(np.nan_to_num(vals, nan=np.inf), lo, hi)
    if clipped:
        log.warning("predicted price path left the price box at t=%g and was clipped", t)
    return PredictedPath(vals, clipped)


@dataclass(frozen=True)
class LearningRule:
    """Recursive update of beliefs from observed prices.

    ``decreasing_gain`` weights the newest observation by ``dt / (t + t0)``,
    ``constant_gain`` by ``dt * gain``. Both move a level belief towards the
    observed price. ``recursive_least_squares`` fits the linear PLM
    ``dp/dt = theta0 + theta1 p`` per price by decreasing-gain RLS on the
    observed price changes.
    """

    kind: str = "decreasing_gain"
    t0: float = 1.0
    gain: float = 0.1
    regularization: float = 1e-10

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise DomainError(f"unknown learning rule {self.kind!r}")
        if self.t0 <= 0:
            raise DomainError("t0 must be > 0")
        if not 0 < self.gain <= 1:
            raise DomainError("constant gain must lie in (0, 1]")

    def step_gain(self, t, dt):
        if self.kind == "constant_gain":
            return dt * self.gain
        return dt / (t + self.t0)

    def level_drift(self, p, theta):
        """Continuous-time rate ``d theta / dt`` of a level rule at ``(p, theta)``.

        The decreasing gain is evaluated at its ``t0`` (start of learning).
        """
        if self.kind == "none":
            return np.zeros(np.broadcast(np.asarray(p), np.asarray(theta)).shape)
        g = self.gain if self.kind == "constant_gain" else 1.0 / self.t0
        return g * (np.asarray(p) - np.asarray(theta))


def update_beliefs(rule: LearningRule, belief: BeliefState, observed_p, dt) -> BeliefState:
    p = np.atleast_1d(np.asarray(observed_p, dtype=float))
    t_next = belief.t + dt
    if rule.kind == "none":
        return replace(belief, t=t_next, last_price=p)
    if rule.kind in ("decreasing_gain", "constant_gain"):
        g = rule.step_gain(belief.t, dt)
        theta = belief.theta + g * (p - belief.theta[: p.size]) if belief.theta.size == p.size else None
        if theta is None:
            raise ShapeError("level learning needs one belief per price")
        return replace(belief, theta=theta, t=t_next, last_price=p)
    return _rls_update(rule, belief, p, dt, t_next)


def _rls_update(rule, belief, p, dt, t_next):
    n = p.size
    if belief.theta.size != 2 * n:
        raise ShapeError("least-squares learning needs the linear PLM layout")
    moment = np.zeros((n, 2, 2)) if belief.moment is None else np.array(belief.moment)
    if belief.last_price is None:
        # nothing to regress on yet
        return replace(belief, t=t_next, last_price=p, moment=moment, identified=False)
    prev = belief.last_price
    y = (p - prev) / dt
    g = dt / (belief.t + rule.t0)
    theta = belief.theta.copy()
    identified = True
    for j in range(n):
        z = np.array([1.0, prev[j]])
        moment[j] = moment[j] + g * (np.outer(z, z) - moment[j])
        # a rank-deficient moment matrix leaves the slope unidentified
        if np.linalg.eigvalsh(moment[j])[0] <= 1e-8 * np.trace(moment[j]):
            identified = False
            continue
        R = moment[j] + rule.regularization * np.eye(2)
        th = np.array([theta[j], theta[n + j]])
        th = th + g * np.linalg.solve(R, z * (y[j] - z @ th))
        theta[j], theta[n + j] = th
    return BeliefState(theta, t_next, moment, p, identified)
