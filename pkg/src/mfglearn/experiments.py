"""Experiment runners behind the command-line subcommands.

Each runner builds the objects a configuration describes, calls the
solvers, writes its tables into the run directory and returns the summary
scalars. :func:`run_experiment` wraps a runner with the manifest handling.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from .beliefs import PLM, BeliefState, LearningRule, Predictor
from .common_noise import NoisePLM, run_learning_simulation, z_nodes_for
from .config import Config
from .discrete import (
    PerceivedPriceKernel,
    bellman_backward,
    equilibrium_tree,
    induced_price_kernel,
    master_oracle,
    mrp_value_bruteforce,
    mrp_value_montecarlo,
    run_discrete_learning,
    toy_model,
)
from .equilibrium import solve_perfect_foresight_transition, solve_stationary_equilibrium
from .errors import ConfigError, MFGError
from .hjb import stationary_residual
from .io import RunDirectory, write_densities
from .model import Density, ModelParams, OUIncome, StateGrid, TwoStateIncome, market_clearing_residual, price_functional
from .temporary import run_temporary_equilibrium
from .transport import PriceAxes

log = logging.getLogger(__name__)


def build_params(cfg: Config, **overrides) -> ModelParams:
    m = cfg.model
    inc = m.income
    if inc.kind == "two_state":
        income = TwoStateIncome(inc.y_lo, inc.y_hi, inc.rate_up, inc.rate_down)
    else:
        income = OUIncome(inc.kappa, inc.mean, inc.nu, inc.n_y, inc.width)
    try:
        params = ModelParams(m.rho, m.crra, m.nu, m.beta, m.horizon, m.dt, income, m.production_scale)
    except MFGError as exc:
        raise ConfigError(str(exc), key="model") from None
    return dataclasses.replace(params, **overrides)


def build_grid(cfg: Config, params) -> StateGrid:
    return StateGrid.build(params, a_max=cfg.grid.a_max, n_a=cfg.grid.n_a)


def shifted_density(density: Density, nodes):
    """Move every household ``nodes`` wealth nodes up (piling up at the top)."""
    m = density.mass
    if nodes == 0:
        return density
    out = np.zeros_like(m)
    out[nodes:] = m[:-nodes]
    out[-1] += m[-nodes:].sum(axis=0)
    return Density.from_unnormalized(out)


def _mass_drift(densities):
    return float(np.max(np.abs(np.asarray(densities).reshape(len(densities), -1).sum(axis=1) - 1.0)))


def _price_columns(times, prices, extra=None):
    cols = {"t": times}
    if extra:
        cols.update(extra)
    cols["r"] = prices[:, 0]
    if prices.shape[1] > 1:
        cols["w"] = prices[:, 1]
    return cols


def _snapshot_dates(n_steps, every):
    return list(range(0, n_steps + 1, every)) + ([n_steps] if n_steps % every else [])


# ---------------------------------------------------------------------------
# continuous-state runners


def run_stationary(cfg: Config, run: RunDirectory, seed):
    params = build_params(cfg)
    grid = build_grid(cfg, params)
    eq = solve_stationary_equilibrium(grid, params, tol=cfg.stationary.tol)
    V = eq.value.values
    resid = stationary_residual(V, eq.prices, grid, params)
    run.csv("prices.csv", {"r": eq.prices[:1], "w": eq.prices[1:]})
    cols = {"wealth": grid.wealth_nodes}
    for j in range(grid.shape[1]):
        cols[f"value_y{j}"] = V[:, j]
        cols[f"consumption_y{j}"] = eq.policy.consumption[:, j]
        cols[f"drift_y{j}"] = eq.policy.drift[:, j]
    run.csv("stationary.csv", cols)
    write_densities(run, grid, [eq.density.mass], [0])
    return {
        "interest_rate": eq.prices[0],
        "wage": eq.prices[1],
        "capital": eq.capital,
        "labor": eq.labor,
        "clearing_residual_max": float(np.max(np.abs(market_clearing_residual(eq.prices, eq.density, 0.0, grid, params)))),
        "hjb_residual_max": float(np.max(np.abs(resid))),
        "monotonicity_violation": float(max(0.0, -np.diff(V, axis=0).min())),
        "concavity_violation": float(max(0.0, np.diff(V, 2, axis=0).max())),
        "mass_drift": abs(float(eq.density.mass.sum()) - 1.0),
    }


def _transition(cfg, params, grid, eq, n_steps, shift):
    m0 = shifted_density(eq.density, shift)
    return m0, solve_perfect_foresight_transition(
        m0, grid, params, n_steps=n_steps, terminal=eq.value, steady_prices=eq.prices, tol=cfg.transition.tol
    )


def run_transition(cfg: Config, run: RunDirectory, seed):
    params = build_params(cfg)
    grid = build_grid(cfg, params)
    eq = solve_stationary_equilibrium(grid, params, tol=cfg.stationary.tol)
    n = cfg.transition.n_steps or params.n_steps
    _, tr = _transition(cfg, params, grid, eq, n, cfg.transition.shift_nodes)
    run.csv("prices.csv", _price_columns(tr.times, tr.prices))
    run.csv("perceived_prices.csv", _price_columns(tr.times[:-1], tr.diagnostics["perceived_prices"]))
    dates = _snapshot_dates(n, max(1, n // 10))
    write_densities(run, grid, tr.densities[dates], dates)
    return {
        "clearing_residual_max": float(np.max(np.abs(tr.diagnostics["clearing_residuals"]))),
        "iterations": tr.diagnostics["iterations"],
        "mass_drift_max": _mass_drift(tr.densities),
    }


def _temporary_setup(cfg, eq, params):
    tc = cfg.temporary
    scale = np.asarray(tc.belief_scale, dtype=float)
    if scale.size != 2:
        raise ConfigError("needs one scale per price", key="temporary.belief_scale")
    rule = LearningRule(tc.rule, t0=tc.t0, gain=tc.gain)
    if tc.rule == "recursive_least_squares":
        if tc.predictor != "parametric_plm":
            raise ConfigError("least-squares learning needs the parametric_plm predictor", key="temporary.rule")
        return Predictor("parametric_plm", plm=PLM("linear")), rule, np.zeros(4)
    if tc.predictor == "parametric_plm":
        return Predictor("parametric_plm", plm=PLM("reverting")), rule, eq.prices * scale
    return Predictor(tc.predictor), rule, eq.prices * scale


def run_temporary(cfg: Config, run: RunDirectory, seed):
    tc = cfg.temporary
    params = build_params(cfg)
    grid = build_grid(cfg, params)
    eq = solve_stationary_equilibrium(grid, params, tol=cfg.stationary.tol)
    n = params.n_steps if tc.n_steps is None else tc.n_steps
    summary = {}
    if tc.predictor == "perfect_foresight":
        m0, bench = _transition(cfg, params, grid, eq, n, tc.shift_nodes)
        pred = Predictor("perfect_foresight", path=bench.diagnostics["perceived_prices"])
        tr = run_temporary_equilibrium(
            m0, BeliefState(eq.prices), pred, LearningRule("none"), grid, params, n, eq.value, inner_stride=tc.inner_stride
        )
        sup = float(np.max(np.abs(tr.prices - bench.prices)))
        run.csv("rational_prices.csv", _price_columns(bench.times, bench.prices))
        summary.update(
            recovery_supnorm=sup, recovery_threshold=tc.recovery_threshold, recovery_passed=sup < tc.recovery_threshold
        )
    else:
        m0 = shifted_density(eq.density, tc.shift_nodes)
        pred, rule, theta0 = _temporary_setup(cfg, eq, params)
        tr = run_temporary_equilibrium(m0, BeliefState(theta0), pred, rule, grid, params, n, eq.value, inner_stride=tc.inner_stride)
    run.csv("prices.csv", _price_columns(tr.times, tr.prices))
    run.csv("theta.csv", {"t": tr.times, **{f"theta{i}": tr.beliefs[:, i] for i in range(tr.beliefs.shape[1])}})
    fe = tr.forecast_errors()
    run.csv("forecast_errors.csv", {"t": tr.times, "error_r": fe[:, 0], "error_w": fe[:, 1]})
    dates = _snapshot_dates(n, max(1, n // 10))
    write_densities(run, grid, tr.densities[dates], dates)
    consistency = max(
        float(np.max(np.abs(tr.prices[k] - price_functional(Density.from_unnormalized(tr.densities[k]), 0.0, grid, params))))
        for k in range(n + 1)
    )
    summary.update(
        mass_drift_max=_mass_drift(tr.densities),
        price_consistency_max=consistency,
        clipped_dates=int(np.sum(tr.diagnostics.get("clipped", []))),
        final_theta=tr.beliefs[-1],
        steady_prices=eq.prices,
    )
    return summary


def common_noise_inputs(cfg: Config):
    """Parameters, grids, steady state and run arguments of a common-noise run."""
    cn = cfg.common_noise
    params = build_params(cfg, dt=cn.dt)
    grid = build_grid(cfg, params)
    eq = solve_stationary_equilibrium(grid, params, tol=cfg.stationary.tol)
    axes = PriceAxes.around(eq.prices, params, n=cn.p_nodes, spread=cn.price_spread)
    z_nodes = z_nodes_for(params.beta, cn.n_steps * cn.dt, n=cn.z_nodes)
    belief0 = BeliefState([cn.belief_scale * eq.prices[0], 0.0])
    rule = LearningRule(cn.rule, gain=cn.gain)
    return params, grid, eq, axes, z_nodes, belief0, rule, NoisePLM(cn.kappa, cn.sigma)


def run_common_noise(cfg: Config, run: RunDirectory, seed):
    cn = cfg.common_noise
    params, grid, eq, axes, z_nodes, belief0, rule, plm = common_noise_inputs(cfg)
    tr = run_learning_simulation(
        eq.density, 0.0, belief0, rule, seed, grid, params, cn.n_steps, axes, z_nodes, eq.value, plm,
        cache_threshold=cn.cache_threshold, density_every=cn.density_every,
    )
    d = tr.diagnostics
    z = d["z"]
    run.csv("z_path.csv", {"t": tr.times, "z": z})
    run.csv("prices.csv", _price_columns(tr.times, tr.prices, {"z": z}))
    run.csv("theta.csv", {"t": tr.times, "theta0": tr.beliefs[:, 0], "theta_z": tr.beliefs[:, 1]})
    run.csv("forecast_errors.csv", {"t": tr.times, "error_r": d["forecast_errors"][:, 0]})
    dates = list(range(0, cn.n_steps + 1, cn.density_every))
    write_densities(run, grid, tr.densities, dates)
    run.json(
        "hjb_cache.json",
        {"threshold": cn.cache_threshold, "solves": d["cache_solves"], "hits": d["cache_hits"], "entries": d["cache_log"]},
    )
    consistency = max(
        float(np.max(np.abs(tr.prices[k] - price_functional(Density.from_unnormalized(m), z[k], grid, params))))
        for k, m in zip(dates, tr.densities)
    )
    return {
        "mass_drift_max": float(np.max(np.abs(d["masses"] - 1.0))),
        "price_consistency_max": consistency,
        "cache_solves": d["cache_solves"],
        "cache_hits": d["cache_hits"],
        "max_cache_gap": float(np.max(d["cache_gaps"])) if len(d["cache_gaps"]) else 0.0,
        "z_clamped": d["z_clamped"],
        "price_off_grid": d["price_off_grid"],
        "final_theta": tr.beliefs[-1],
        "steady_rate": eq.prices[0],
    }


# ---------------------------------------------------------------------------
# discrete-time runners


def discrete_model(cfg: Config):
    dc = cfg.discrete
    base = toy_model(dc.variant, n_z=dc.n_z, horizon=dc.horizon, discount=dc.discount)
    arrays = {
        k: np.asarray(getattr(dc, k), dtype=float)
        for k in ("z_kernel", "x_kernel", "reward_coef", "terminal_coef", "price_intercept", "price_weights", "z_values")
        if getattr(dc, k) is not None
    }
    try:
        return dataclasses.replace(base, **arrays)
    except MFGError as exc:
        raise ConfigError(str(exc), key="discrete") from None


def _histogram_start(cfg, model):
    m0 = np.asarray(cfg.discrete.m0, dtype=float)
    if m0.shape != (model.n_x,) or np.any(m0 < 0) or abs(m0.sum() - 1.0) > 1e-12:
        raise ConfigError(f"must be a probability vector of length {model.n_x}", key="discrete.m0")
    if cfg.discrete.z0 >= model.n_z:
        raise ConfigError("aggregate state out of range", key="discrete.z0")
    return m0


def run_discrete_learn(cfg: Config, run: RunDirectory, seed):
    dc = cfg.discrete
    model = discrete_model(cfg)
    m0 = _histogram_start(cfg, model)
    kernel = PerceivedPriceKernel(dc.kernel, np.linspace(*dc.price_range, dc.price_nodes), sigma=dc.sigma)
    theta0 = np.asarray(dc.belief0, dtype=float)
    if theta0.size != max(kernel.n_params, 1) and kernel.n_params:
        raise ConfigError(f"{dc.kernel} beliefs need {kernel.n_params} entries", key="discrete.belief0")
    rule = LearningRule(dc.rule, t0=dc.t0, gain=dc.gain)
    tr = run_discrete_learning(
        model, m0, BeliefState(theta0), rule, dc.n_steps, kernel, seed=seed, z0=dc.z0, planning_horizon=dc.planning_horizon
    )
    z = tr.diagnostics["z"]
    run.csv("z_path.csv", {"t": tr.times, "z": z})
    run.csv("prices.csv", {"t": tr.times, "z": z, "p": tr.prices[:, 0]})
    run.csv("theta.csv", {"t": tr.times, **{f"theta{i}": tr.beliefs[:, i] for i in range(tr.beliefs.shape[1])}})
    run.csv("forecast_errors.csv", {"t": tr.times, "error": tr.diagnostics["forecast_errors"][:, 0]})
    run.csv("histogram.csv", {"t": tr.times, **{f"m{i}": tr.densities[:, i] for i in range(model.n_x)}})
    return {
        "mass_drift_max": float(np.max(np.abs(tr.densities.sum(axis=1) - 1.0))),
        "cache_solves": tr.diagnostics["cache_solves"],
        "cache_hits": tr.diagnostics["cache_hits"],
        "final_theta": tr.beliefs[-1],
        "final_price": tr.prices[-1, 0],
    }


def tree_comparison(model, resolution, m0, z0):
    """Oracle values against backward induction on the induced price kernel along all histories."""
    oracle = master_oracle(model, resolution)
    tree = equilibrium_tree(model, oracle, m0, z0)
    sol = bellman_backward(model, induced_price_kernel(model, tree))
    ora = np.array([oracle.value_at(t, z, m) for t, z, m in zip(tree.t, tree.z, tree.m)])
    bel = sol.values[tree.t, tree.z, np.arange(tree.t.size)]
    return oracle, tree, ora, bel


def run_discrete_master(cfg: Config, run: RunDirectory, seed):
    dc = cfg.discrete
    model = discrete_model(cfg)
    m0 = _histogram_start(cfg, model)
    oracle, tree, ora, bel = tree_comparison(model, dc.resolution, m0, dc.z0)
    nodes = oracle.simplex.nodes
    T, n_z, K, n_x = oracle.values.shape
    tt, zz, kk = np.meshgrid(np.arange(T), np.arange(n_z), np.arange(K), indexing="ij")
    cols = {"t": tt.ravel(), "z": zz.ravel(), "node": kk.ravel()}
    cols.update({f"m{i}": np.broadcast_to(nodes[:, i], (T, n_z, K)).ravel() for i in range(n_x)})
    cols.update({f"value_x{i}": oracle.values[..., i].ravel() for i in range(n_x)})
    run.csv("master_values.csv", cols)
    tcols = {"node": np.arange(tree.t.size), "t": tree.t, "z": tree.z, "prob": tree.prob, "price": tree.price}
    tcols.update({f"m{i}": tree.m[:, i] for i in range(n_x)})
    tcols.update({f"oracle_x{i}": ora[:, i] for i in range(n_x)})
    tcols.update({f"bellman_x{i}": bel[:, i] for i in range(n_x)})
    run.csv("tree.csv", tcols)
    return {
        "tree_supnorm": float(np.max(np.abs(ora - bel))),
        "unsettled_points": int(oracle.unsettled.sum()),
        "resolution": dc.resolution,
        "tree_nodes": int(tree.t.size),
    }


def run_mrp(cfg: Config, run: RunDirectory, seed):
    dc = cfg.discrete
    model = discrete_model(cfg)
    if model.n_act != 1:
        raise ConfigError("the reward process needs a single-action economy (variant mrp or mrp_linear)", key="discrete.variant")
    m0 = _histogram_start(cfg, model)
    brute = mrp_value_bruteforce(model, m0, dc.z0)
    oracle = master_oracle(model, dc.resolution).value_at(0, dc.z0, m0)
    fine = master_oracle(model, 2 * (dc.resolution - 1) + 1).value_at(0, dc.z0, m0)
    cols = {"x": np.arange(model.n_x), "bruteforce": brute, "oracle": oracle, "oracle_fine": fine}
    summary = {
        "bruteforce": brute,
        "oracle": oracle,
        "abs_diff_max": float(np.max(np.abs(brute - oracle))),
        "selfconvergence_tolerance": float(2.0 * np.max(np.abs(oracle - fine))),
    }
    if dc.montecarlo_paths:
        mc = [mrp_value_montecarlo(model, m0, dc.z0, x, dc.montecarlo_paths, seed) for x in range(model.n_x)]
        cols["montecarlo"] = [v for v, _ in mc]
        cols["montecarlo_se"] = [s for _, s in mc]
        summary["montecarlo"] = mc
    run.csv("mrp_values.csv", cols)
    return summary


RUNNERS = {
    "stationary": run_stationary,
    "transition": run_transition,
    "temporary-eq": run_temporary,
    "common-noise": run_common_noise,
    "discrete-learn": run_discrete_learn,
    "discrete-master": run_discrete_master,
    "mrp": run_mrp,
}


def run_experiment(cfg: Config, command, out_dir, seed=None):
    """Run ``command`` with ``cfg`` into ``out_dir``; returns ``(path, summary)``."""
    if command not in RUNNERS:
        raise ConfigError(f"unknown experiment {command!r}", key="command")
    seed = cfg.run.seed if seed is None else seed
    with RunDirectory(out_dir, command, cfg, seed) as run:
        summary = RUNNERS[command](cfg, run, seed)
        run.json("summary.json", summary)
    return run.path, summary
