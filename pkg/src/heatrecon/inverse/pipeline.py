"""End-to-end reconstruction: heat data to spectrum, geometry, distances and injectivity radii."""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from ..mgh import MetricMeasureNet
from ..phd import PointHeatData
from .bc import DEFAULT_RANK_RTOL
from .charts import gauge_fix
from .geometry import (DistanceResult, InjectivityEstimate, ProjectorMeasures, injectivity_radius,
                       reconstruct_distances)
from .lsd import LocalSpectralData, fit_spectral_data
from .metric import MetricDensity, recover_metric_density


class ReconstructionError(RuntimeError):
    """Raised by a pipeline stage; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass
class InverseConfig:
    """Budgets and thresholds of the reconstruction.

    Lengths given as factors are multiples of the net fineness ``delta``
    stored in the heat data.  ``inj_resolution`` sets a floor on the
    injectivity thickness in units of ``pi / sqrt(lambda_max)``, the
    resolution of the fitted band.
    """

    k_max: Optional[int] = None
    consistency_tol: float = 1e-3
    refine: bool = False
    dim: Optional[int] = None
    probe_factor: float = 1.5
    step_factor: float = 0.25
    s_max: Optional[float] = None
    n_time: int = 30
    kind: str = "fourier"
    rank_rtol: float = DEFAULT_RANK_RTOL
    injectivity: bool = True
    inj_points: Optional[List[int]] = None
    inj_passes: Optional[int] = None
    inj_eps_factor: float = 2.0
    inj_resolution: float = 1.25

    def __post_init__(self):
        for name in ("consistency_tol", "probe_factor", "step_factor", "rank_rtol", "inj_eps_factor",
                     "inj_resolution"):
            if not getattr(self, name) > 0:
                raise ValueError(f"inverse.{name} must be positive")
        if self.n_time < 1:
            raise ValueError("inverse.n_time must be at least 1")
        if self.kind not in ("fourier", "gauss"):
            raise ValueError("inverse.kind must be 'fourier' or 'gauss'")

    @classmethod
    def from_dict(cls, data: dict) -> "InverseConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown inverse keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(eq=False)
class ReconstructionResult:
    """Recovered geometry on the net, in the canonical gauge."""

    lsd: LocalSpectralData
    geometry: MetricDensity
    distances: DistanceResult
    injectivity: List[InjectivityEstimate]
    base_hint: int
    delta: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def charts(self):
        return self.geometry.charts

    @property
    def metric(self) -> np.ndarray:
        return self.geometry.metric

    @property
    def drift(self) -> np.ndarray:
        return self.geometry.drift

    @property
    def density(self) -> np.ndarray:
        return self.geometry.density

    @property
    def inj_radius(self) -> np.ndarray:
        return np.array([e.value for e in self.injectivity])

    def as_net(self) -> MetricMeasureNet:
        """Reconstructed metric-measure net (measure ``rho_hat dV``)."""
        q = np.clip(self.geometry.quadrature, 0, None)
        return MetricMeasureNet(self.distances.matrix, q / q.sum(), int(self.base_hint))

    def to_dict(self) -> dict:
        g = self.geometry
        points = []
        for a in range(self.lsd.net_size):
            ch = g.charts[a]
            points.append({
                "index": a,
                "chart": [int(i) for i in ch.indices],
                "chart_score": ch.score,
                "chart_validity_hops": ch.validity_hops,
                "coordinates": g.chart_coords[a].tolist(),
                "metric": g.metric[a].tolist(),
                "drift": g.drift[a].tolist(),
                "dlog_density": g.dlog_density[a].tolist(),
                "density": float(g.density[a]),
                "volume": float(g.volume[a]),
                "flagged": bool(g.flagged[a]),
                "inj_radius": _num(self.injectivity[a].value) if self.injectivity else None,
            })
        return {
            "format": "reconstruction-v1",
            "dim": g.dim,
            "net_size": self.lsd.net_size,
            "base_hint": int(self.base_hint),
            "eigenvalues": self.lsd.eigenvalues.tolist(),
            "clusters": [list(c) for c in self.lsd.clusters],
            "c0_known": False,
            "points": points,
            "diagnostics": _jsonable(self.diagnostics),
        }


def _num(x):
    x = float(x)
    return x if np.isfinite(x) else None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return _num(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _measures(lsd, quad, step, s_max, cfg):
    return ProjectorMeasures(lsd, quad, step, s_max, cfg.n_time, cfg.kind, cfg.rank_rtol)


def reconstruct_from_lsd(lsd: LocalSpectralData, delta: float, base_hint: int = 0,
                         config: Optional[InverseConfig] = None) -> ReconstructionResult:
    """Geometry stages of the pipeline starting from local spectral data."""
    cfg = config or InverseConfig()
    canon = gauge_fix(lsd)
    try:
        geo = recover_metric_density(canon, dim=cfg.dim)
    except Exception as exc:  # noqa: BLE001 - stage boundary
        raise ReconstructionError("metric", str(exc)) from exc
    step = cfg.step_factor * delta
    eps0 = cfg.probe_factor * delta
    # injectivity grid: the net spacing, snapped to the ball-time grid
    r_step = max(1, int(round(delta / step))) * step
    # the exit-set thickness must also exceed the resolution of the fitted band
    lam_max = float(canon.eigenvalues[-1])
    floor = cfg.inj_resolution * np.pi / np.sqrt(lam_max) if lam_max > 0 else 0.0
    inj_eps = r_step * max(cfg.inj_eps_factor, np.ceil(floor / r_step - 1e-9))
    margin = 6 * r_step + inj_eps
    if cfg.s_max is not None:
        s_max = cfg.s_max
    elif geo.dim == 1:
        s_max = 0.5 * float(np.sum(geo.volume)) + margin
    else:
        s_max = 2.0
    try:
        meas = _measures(canon, geo.quadrature, step, s_max, cfg)
        dist = reconstruct_distances(meas, eps0, meas.s_grid)
        grow = 0
        while dist.flagged.any() and cfg.s_max is None and grow < 4:
            s_max *= 1.6
            grow += 1
            meas = _measures(canon, geo.quadrature, step, s_max, cfg)
            dist = reconstruct_distances(meas, eps0, meas.s_grid)
        inj = []
        if cfg.injectivity:
            need = float(dist.matrix.max()) + margin
            if need > s_max and cfg.s_max is None:
                s_max = need
                meas = _measures(canon, geo.quadrature, step, s_max, cfg)
            r_grid = np.arange(r_step, meas.s_grid[-1] + 0.5 * step, r_step)
            pts = range(canon.net_size) if cfg.inj_points is None else cfg.inj_points
            inj = [injectivity_radius(meas, int(x), dist.matrix, r_grid, eps=inj_eps, passes=cfg.inj_passes)
                   for x in pts]
    except Exception as exc:  # noqa: BLE001 - stage boundary
        raise ReconstructionError("geometry", str(exc)) from exc
    report = lsd.meta.get("report")
    diag = {
        "fit": report.to_dict() if report is not None else None,
        "dim": geo.dim,
        "modes_used": geo.modes_used,
        "metric_residual_max": float(np.max(geo.residuals)),
        "metric_flagged": int(np.sum(geo.flagged)),
        "metric_condition_max": float(np.max(geo.meta["condition"])),
        "integration_misfit": geo.meta["integration_misfit"],
        "volume_method": geo.meta["volume_method"],
        "total_mass": geo.total_mass,
        "distance_probe": eps0,
        "distance_step": step,
        "distance_slack": dist.meta["slack"],
        "distance_repair": dist.repair,
        "triangle_violation": dist.meta["violation"],
        "distance_flagged": int(np.sum(dist.flagged)),
        "radius_excess_mean": float(np.mean(dist.meta["bias"])),
        "ball_time_max": float(meas.s_grid[-1]),
        "injectivity_eps": float(inj_eps) if cfg.injectivity else None,
        "injectivity_grid_step": float(r_step),
        "injectivity_bracketed": int(sum(e.bracketed for e in inj)),
    }
    return ReconstructionResult(canon, geo, dist, inj, int(base_hint), float(delta), diag)


def reconstruct(data: PointHeatData, config: Optional[InverseConfig] = None) -> ReconstructionResult:
    """Full pipeline from heat data."""
    cfg = config or InverseConfig()
    try:
        lsd = fit_spectral_data(data, k_max=cfg.k_max, consistency_tol=cfg.consistency_tol, refine=cfg.refine)
    except Exception as exc:  # noqa: BLE001 - stage boundary
        raise ReconstructionError("fit", str(exc)) from exc
    return reconstruct_from_lsd(lsd, data.delta, data.base_hint, cfg)


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_reconstruction(result: ReconstructionResult, out_dir: Union[str, Path],
                         extra: Optional[dict] = None) -> List[Path]:
    """Write ``reconstruction.json`` and ``distances.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = result.to_dict()
    if extra:
        doc["truth"] = _jsonable(extra)
    p1 = out / "reconstruction.json"
    _atomic_write(p1, json.dumps(doc, indent=1, sort_keys=True) + "\n")
    D = result.distances.matrix
    n = len(D)
    lines = ["," + ",".join(str(j) for j in range(n))]
    lines += [f"{i}," + ",".join(repr(float(v)) for v in D[i]) for i in range(n)]
    p2 = out / "distances.csv"
    _atomic_write(p2, "\n".join(lines) + "\n")
    return [p1, p2]


__all__ = ["InverseConfig", "ReconstructionError", "ReconstructionResult", "reconstruct",
           "reconstruct_from_lsd", "write_reconstruction"]
