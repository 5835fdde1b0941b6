"""Experiment drivers shared by the CLI and the acceptance suite.

Each grid point is a pure function of its arguments, so sweeps can fan out
over processes and still produce identical tables.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import stats

from .config import build_model, limit_circle, profile_function
from .inverse.pipeline import InverseConfig, reconstruct
from .mgh import MetricMeasureNet, d_mgh_estimate
from .phd import PointHeatData, farthest_point_net, perturb, phd_discrepancy, sample_phd
from .space import DiscreteSpace, build_warped_torus
from .spectral import SpectralData, solve_space


def _pool_map(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads, initializer=_single_threaded) as ex:
        return list(ex.map(fn, items))


def _single_threaded():
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)


def is_monotone(values: Sequence[float], increasing: bool = False, rtol: float = 1e-12) -> bool:
    v = np.asarray(values, dtype=float)
    step = np.diff(v) if increasing else -np.diff(v)
    return bool(np.all(step >= -rtol * np.maximum(np.abs(v[1:]), 1e-300)))


def line_density(space: DiscreteSpace) -> np.ndarray:
    """Probability density ``d mu / d vol`` of a one-dimensional space (half incident edges per cell)."""
    if space.dim != 1:
        raise ValueError("line density is defined for one-dimensional spaces")
    cell = np.zeros(space.vertex_count)
    np.add.at(cell, space.edges[:, 0], 0.5 * space.edge_lengths)
    np.add.at(cell, space.edges[:, 1], 0.5 * space.edge_lengths)
    return space.weights / cell


def solve_model(model: dict, modes: Optional[int] = None, method: str = "auto", seed: int = 0):
    space = build_model(model)
    k = space.vertex_count if modes is None else min(int(modes), space.vertex_count)
    return space, solve_space(space, k, method=method, seed=seed)


def generate_phd(spec: SpectralData, phd_cfg: dict) -> PointHeatData:
    from .phd import averaged_phd

    space = spec.source_space
    radius = space.diameter if phd_cfg.get("radius") is None else phd_cfg["radius"]
    args = (spec, radius, phd_cfg["delta"])
    kw = {"time_delta": phd_cfg.get("time_delta"), "time_ratio": phd_cfg.get("time_ratio", 1.2)}
    data = averaged_phd(*args, phd_cfg["eps"], **kw) if phd_cfg.get("eps", 0) > 0 else sample_phd(*args, **kw)
    return perturb(data, phd_cfg.get("noise", 0.0), phd_cfg.get("seed"))


# collapse sweep ---------------------------------------------------------------

@dataclass
class CollapseContext:
    profile: object
    n_y: int
    n_z: int
    delta: float
    time_delta: float
    net_rows: int


def collapse_row(ctx: CollapseContext, sigma: float) -> dict:
    """Compare the warped torus ``M^sigma`` with the limit circle on a matched net."""
    circ = limit_circle(ctx.n_y, ctx.profile)
    rows = np.unique(np.linspace(0, ctx.n_y, ctx.net_rows, endpoint=False).round().astype(int))
    ref = sample_phd(solve_space(circ), circ.diameter, ctx.delta, ctx.time_delta, net=rows)
    tor = build_warped_torus(ctx.n_y, ctx.n_z, sigma, profile_function(ctx.profile, 2.0))
    heat = sample_phd(solve_space(tor), tor.diameter, ctx.delta, ctx.time_delta, net=rows * ctx.n_z)
    disc = phd_discrepancy(heat, ref)
    cnet = farthest_point_net(circ.distance_matrix, np.arange(circ.vertex_count), ctx.delta, 0)
    tnet = farthest_point_net(tor.distance_matrix, np.arange(tor.vertex_count), ctx.delta, 0)
    est = d_mgh_estimate(MetricMeasureNet.from_space(tor, tnet), MetricMeasureNet.from_space(circ, cnet))
    return {"sigma": float(sigma), "heat_discrepancy": disc, "mgh": est.epsilon,
            "mgh_lower_bound": est.lower_bound, "torus_net_size": int(len(tnet))}


def collapse_sweep(sweep: dict, threads: int = 1) -> List[dict]:
    ctx = CollapseContext(sweep["profile"], sweep["n_y"], sweep["n_z"], sweep["delta"],
                          sweep["time_delta"] or 0.1, sweep["net_rows"])
    from functools import partial

    rows = _pool_map(partial(collapse_row, ctx), list(sweep["sigma"]), threads)
    checked = len(rows) > 1
    for k, r in enumerate(rows):
        head = rows[: k + 1]
        r["heat_monotone"] = is_monotone([h["heat_discrepancy"] for h in head]) if checked else None
        r["mgh_monotone"] = is_monotone([h["mgh"] for h in head]) if checked else None
    return rows


# stability sweep --------------------------------------------------------------

@dataclass
class StabilityContext:
    model: dict
    modes: Optional[int]
    phd: dict
    inverse: dict


_CACHE: dict = {}


def _clean_data(ctx: StabilityContext):
    key = repr((ctx.model, ctx.modes, {k: v for k, v in ctx.phd.items() if k not in ("noise", "seed")}))
    if key not in _CACHE:
        space, spec = solve_model(ctx.model, ctx.modes)
        clean = generate_phd(spec, dict(ctx.phd, noise=0.0, seed=None))
        _CACHE.clear()
        _CACHE[key] = (space, clean)
    return _CACHE[key]


def stability_point(ctx: StabilityContext, noise: float, seed: int) -> dict:
    space, clean = _clean_data(ctx)
    data = perturb(clean, noise, seed if noise > 0 else None)
    cfg = InverseConfig.from_dict(dict({"injectivity": False}, **ctx.inverse))
    res = reconstruct(data, cfg)
    truth = MetricMeasureNet.from_space(space, clean.net_points)
    est = d_mgh_estimate(res.as_net(), truth)
    net = clean.net_points
    dist_err = float(np.max(np.abs(res.distances.matrix - space.distance_matrix[np.ix_(net, net)])))
    return {"noise": float(noise), "seed": int(seed), "mgh": est.epsilon, "mgh_lower_bound": est.lower_bound,
            "distance_error": dist_err, "modes": int(res.lsd.mode_count)}


def _stability_job(args):
    ctx, noise, seed = args
    return stability_point(ctx, noise, seed)


def stability_sweep(model: dict, modes: Optional[int], phd: dict, inverse: dict, noise: Sequence[float],
                    seeds: Sequence[int], threads: int = 1) -> tuple:
    """Rows ``(noise, seed, mgh, ...)`` and a summary with the rank correlation."""
    noise = [float(x) for x in noise]
    if len(noise) < 4 or any(b <= a for a, b in zip(noise, noise[1:])):
        raise ValueError("stability noise grid must be strictly increasing with at least 4 levels")
    ctx = StabilityContext(model, modes, phd, inverse)
    jobs = [(ctx, x, s) for x in noise for s in seeds]
    rows = _pool_map(_stability_job, jobs, threads)
    x = np.array([r["noise"] for r in rows])
    y = np.array([r["mgh"] for r in rows])
    rho = stats.spearmanr(x, y).statistic
    means = np.array([y[x == v].mean() for v in noise])
    summary = {"spearman": float(rho), "spearman_of_means": float(stats.spearmanr(noise, means).statistic),
               "mean_mgh": means.tolist(), "noise": noise, "seeds": [int(s) for s in seeds],
               "trend_positive": bool(rho > 0)}
    return rows, summary
