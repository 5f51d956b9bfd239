"""Implicit transport along aggregate axes and price-coordinate grids.

Value arrays in the price-space solvers carry aggregate axes (belief
parameters, aggregate state, price coordinates) in front of the individual
axes ``(n_a, n_y)``. Each aggregate axis is advanced by its own implicit
upwind step; the steps are composed by Lie splitting with the individual
HJB step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import make_interp_spline
from scipy.linalg import solve_banded

from .errors import DomainError, NumericalError
from .model import ModelParams, wage_on_frontier


def axis_rates(drift, nodes, diffusion=0.0):
    """Upwind jump rates along one axis, plus central diffusion.

    ``drift`` and ``diffusion`` broadcast against each other with the axis
    last. Both ends reflect: no rate points off the grid.
    """
    nodes = np.asarray(nodes, dtype=float)
    drift = np.asarray(drift, dtype=float)
    h = np.diff(nodes)
    hf = np.append(h, np.inf)
    hb = np.insert(h, 0, np.inf)
    up = np.maximum(drift, 0.0) / hf
    down = np.maximum(-drift, 0.0) / hb
    diffusion = np.asarray(diffusion, dtype=float)
    if np.any(diffusion < 0):
        raise DomainError("diffusion along an aggregate axis must be >= 0")
    if np.any(diffusion > 0):
        d_up = np.zeros(nodes.size)
        d_dn = np.zeros(nodes.size)
        d_up[1:-1] = 2.0 / ((h[1:] + h[:-1]) * h[1:])
        d_dn[1:-1] = 2.0 / ((h[1:] + h[:-1]) * h[:-1])
        d_up[0] = 2.0 / h[0] ** 2
        d_dn[-1] = 2.0 / h[-1] ** 2
        up = up + diffusion * d_up
        down = down + diffusion * d_dn
    up = up * np.ones(nodes.size)
    down = down * np.ones(nodes.size)
    up[..., -1] = 0.0
    down[..., 0] = 0.0
    return up, down


def implicit_axis_step(U, axis, up, down, dt):
    """Solve ``(I - dt B) V = U`` where ``B`` moves along ``axis`` at the given rates.

    ``up``/``down`` must broadcast to ``U`` once ``axis`` is moved last.
    Zero rates return a copy of ``U`` untouched.
    """
    U = np.asarray(U, dtype=float)
    Um = np.moveaxis(U, axis, -1)
    shape = Um.shape
    up = np.broadcast_to(np.moveaxis(_expand(up, U.ndim, axis), axis, -1), shape)
    down = np.broadcast_to(np.moveaxis(_expand(down, U.ndim, axis), axis, -1), shape)
    if not (np.any(up) or np.any(down)):
        return U.copy()
    n = Um.size
    u = (dt * up).reshape(n)
    d = (dt * down).reshape(n)
    ab = np.zeros((3, n))
    ab[1] = 1.0 + u + d
    ab[0, 1:] = -u[:-1]
    ab[2, :-1] = -d[1:]
    try:
        sol = solve_banded((1, 1), ab, Um.reshape(n), check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"transport solve failed along axis {axis}: {exc}") from exc
    return np.moveaxis(sol.reshape(shape), -1, axis)


def _expand(rates, ndim, axis):
    """Pad an aggregate-axes rate array with trailing singleton axes."""
    rates = np.asarray(rates, dtype=float)
    return rates.reshape(rates.shape + (1,) * (ndim - rates.ndim)) if rates.ndim < ndim else rates


def semi_lagrangian_step(U, axis, nodes, foot, n_agg):
    """Evaluate ``U`` along ``axis`` at departure points ``foot``.

    ``foot`` lives on the first ``n_agg`` (aggregate) axes of ``U`` and may
    vary with the other aggregate coordinates. Interpolation is a cubic
    spline along the axis; feet outside the grid are clamped to its ends.
    A foot sitting on every node returns ``U`` unchanged.
    """
    U = np.asarray(U, dtype=float)
    nodes = np.asarray(nodes, dtype=float)
    foot = np.clip(np.broadcast_to(np.asarray(foot, dtype=float), U.shape[:n_agg]), nodes[0], nodes[-1])
    Um = np.moveaxis(U, axis, 0)
    fm = np.moveaxis(foot, axis, 0)
    out = Um.copy()
    k = min(3, nodes.size - 1)
    for idx in np.ndindex(fm.shape[1:]):
        f = fm[(slice(None),) + idx]
        if np.array_equal(f, nodes):
            continue
        col = Um[(slice(None),) + idx]
        out[(slice(None),) + idx] = make_interp_spline(nodes, col, k=k, axis=0)(f)
    return np.moveaxis(out, 0, axis)


def rk4_foot(x, drift, dt):
    """Position after ``dt`` along ``dx/dt = drift(x)`` (one RK4 step)."""
    k1 = drift(x)
    k2 = drift(x + 0.5 * dt * k1)
    k3 = drift(x + 0.5 * dt * k2)
    k4 = drift(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def linear_weights(nodes, x):
    """Bracketing index and weight for linear interpolation, clamped to the grid."""
    nodes = np.asarray(nodes, dtype=float)
    x = float(np.clip(x, nodes[0], nodes[-1]))
    i = int(np.clip(np.searchsorted(nodes, x, side="right") - 1, 0, nodes.size - 2))
    w = (x - nodes[i]) / (nodes[i + 1] - nodes[i])
    return i, w


def multilinear(values, axes_nodes, point):
    """Interpolate over the leading ``len(axes_nodes)`` axes of ``values`` at ``point``."""
    out = np.asarray(values, dtype=float)
    for nodes, x in zip(axes_nodes, point):
        i, w = linear_weights(nodes, x)
        out = (1 - w) * out[i] + w * out[i + 1]
    return out


PRICE_MODES = ("rate", "rate_wage")


@dataclass(frozen=True, eq=False)
class PriceAxes:
    """Grid over perceived price coordinates.

    ``rate``: one axis for the interest rate, the wage following from the
    factor-price frontier at the current aggregate state. ``rate_wage``: two
    independent axes.
    """

    nodes: tuple
    mode: str = "rate"
    scale: float = 1.0

    def __post_init__(self):
        if self.mode not in PRICE_MODES:
            raise DomainError(f"unknown price mode {self.mode!r}")
        nodes = tuple(np.asarray(n, dtype=float) for n in self.nodes)
        if len(nodes) != (1 if self.mode == "rate" else 2):
            raise DomainError(f"price mode {self.mode!r} needs {1 if self.mode == 'rate' else 2} axes")
        for n in nodes:
            if n.ndim != 1 or n.size < 2 or np.any(np.diff(n) <= 0):
                raise DomainError("price nodes must be strictly increasing")
        if np.any(nodes[0] <= 0):
            raise DomainError("interest-rate nodes must be positive")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def around(cls, p_star, params: ModelParams, n=21, spread=0.3, mode="rate"):
        p_star = np.asarray(p_star, dtype=float)
        k = 1 if mode == "rate" else 2
        nodes = []
        for i in range(k):
            x = np.linspace((1 - spread) * p_star[i], (1 + spread) * p_star[i], n)
            if n % 2:
                x[n // 2] = p_star[i]
            nodes.append(x)
        return cls(tuple(nodes), mode, params.production_scale)

    @property
    def shape(self):
        return tuple(n.size for n in self.nodes)

    @property
    def ndim(self):
        return len(self.nodes)

    def coords(self, p):
        p = np.asarray(p, dtype=float)
        return p[..., :1] if self.mode == "rate" else p[..., :2]

    def mesh(self):
        """Coordinates at every node, shape ``(*shape, ndim)``."""
        return np.stack(np.meshgrid(*self.nodes, indexing="ij"), axis=-1)

    def prices(self, z=0.0):
        """Price vectors ``(r, w)`` at every node, shape ``(*shape, 2)``."""
        mesh = self.mesh()
        if self.mode == "rate_wage":
            return mesh
        r = mesh[..., 0]
        return np.stack([r, wage_on_frontier(r, z, self.scale)], axis=-1)

    def contains(self, p):
        c = self.coords(p)
        return all(n[0] <= x <= n[-1] for n, x in zip(self.nodes, c))
