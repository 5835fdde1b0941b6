"""Point Heat Data: heat-kernel samples on a spatial net and a time net.

Values are stored as a dense tensor ``values[alpha, beta, ell]``.  The text
file format is a JSON header line followed by CSV rows ``alpha,beta,ell,t,H``
for ``alpha <= beta`` (the lower triangle is restored by symmetry).
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .spectral import SpectralData


class PHDError(ValueError):
    """Raised for invalid heat-data requests or malformed heat-data files."""


@dataclass(frozen=True, eq=False)
class PointHeatData:
    """Heat-kernel tensor ``H(z_alpha, z_beta, t_ell)``.

    ``net_points`` are vertex indices of the forward space (kept for truth
    comparisons only; reconstruction never uses them).  ``delta`` is the net
    fineness; ``time_delta`` the fineness of the time net inside
    ``(time_delta, 1 / time_delta)``.
    """

    net_points: np.ndarray
    times: np.ndarray
    values: np.ndarray
    delta: float
    radius: float
    time_delta: float
    averaged: bool = False
    eps: float = 0.0
    base_hint: int = 0
    noise: float = 0.0
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("net_points", "times", "values"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n, _, nt = self.values.shape
        if n != len(self.net_points) or nt != len(self.times):
            raise PHDError("value tensor does not match the nets")

    @property
    def net_size(self) -> int:
        return int(self.values.shape[0])

    @property
    def time_count(self) -> int:
        return int(self.values.shape[2])

    def header(self) -> dict:
        return {
            "format": "phd-v1",
            "delta": self.delta,
            "time_delta": self.time_delta,
            "radius": self.radius,
            "net_size": self.net_size,
            "time_count": self.time_count,
            "averaged": bool(self.averaged),
            "eps": self.eps,
            "noise": self.noise,
            "seed": self.seed,
            "base_hint": int(self.base_hint),
            "net_points": [int(i) for i in self.net_points],
            "meta": self.meta,
        }


def farthest_point_net(distances: np.ndarray, candidates: np.ndarray, delta: float,
                       start: int, cover: float = 0.5) -> np.ndarray:
    """Greedy farthest-point sampling until every candidate is within ``cover * delta``.

    With ``cover = 0.5`` neighbouring net points end up about ``delta`` apart
    (so a circle of length ``L`` gets about ``L / delta`` points) while every
    candidate stays within ``delta`` of the net.  ``distances`` is the full
    vertex distance matrix; ties go to the lowest vertex index.
    """
    chosen = [int(start)]
    gap = distances[start, candidates].copy()
    while gap.max() > cover * delta + 1e-12:
        nxt = int(candidates[np.argmax(gap)])
        chosen.append(nxt)
        gap = np.minimum(gap, distances[nxt, candidates])
    return np.array(chosen, dtype=np.int64)


def time_net(delta: float, ratio: float = 1.2) -> np.ndarray:
    """Geometric progression from ``delta`` with steps capped at ``delta``.

    Every point of ``(delta, 1/delta)`` lies within ``delta`` of the net; the
    short initial steps feed the matrix-pencil stage of the spectral fit.
    """
    if not 0 < delta < 1:
        raise PHDError("time fineness must lie in (0, 1)")
    hi = 1.0 / delta
    t = [delta * (1 + 1e-9)]
    while t[-1] < hi - delta:
        t.append(min(t[-1] + min((ratio - 1) * t[-1], delta), hi * (1 - 1e-12)))
    return np.array(t)


def _net_for(spec: SpectralData, radius: float, delta: float):
    space = spec.source_space
    if space is None:
        raise PHDError("heat-data sampling needs the spectral data's source space")
    if delta < space.spacing:
        raise PHDError(f"delta={delta:g} is below the mesh spacing {space.spacing:g}; "
                       f"refine the mesh to at least {int(np.ceil(space.vertex_count * space.spacing / delta))}"
                       " vertices per unit of current resolution or increase delta")
    if radius > space.diameter + 1e-12:
        raise PHDError("radius exceeds the diameter")
    d = space.distance_matrix
    p = space.base_point
    ball = np.flatnonzero(d[p] <= radius + 1e-12)
    net = farthest_point_net(d, ball, delta, p)
    base_hint = int(np.argmin(d[p, net]))
    return net, base_hint


def sample_phd(spec: SpectralData, radius: float, delta: float, time_delta: Optional[float] = None,
               time_ratio: float = 1.2, net: Optional[np.ndarray] = None) -> PointHeatData:
    """Pointwise heat data on a ``delta``-net of ``B(p, radius)``."""
    time_delta = delta if time_delta is None else time_delta
    if time_delta < spec.time_floor:
        raise PHDError(f"time fineness {time_delta:g} below the mesh-resolved floor {spec.time_floor:g}")
    if net is None:
        net, base_hint = _net_for(spec, radius, delta)
    else:
        net = np.asarray(net, dtype=np.int64)
        base_hint = 0
    times = time_net(time_delta, time_ratio)
    phi = spec.eigenvectors[net]
    decay = np.exp(-np.outer(spec.eigenvalues, times))
    values = np.einsum("ak,bk,kt->abt", phi, phi, decay, optimize=True)
    values = 0.5 * (values + values.transpose(1, 0, 2))
    return PointHeatData(net, times, values, float(delta), float(radius), float(time_delta),
                         base_hint=base_hint)


def averaged_phd(spec: SpectralData, radius: float, delta: float, eps: float,
                 time_delta: Optional[float] = None, time_ratio: float = 1.2) -> PointHeatData:
    """Heat data averaged over ``eps``-balls around the net points."""
    space = spec.source_space
    if space is None:
        raise PHDError("averaged heat data needs the source space")
    if eps < space.spacing and eps != 0:
        raise PHDError("averaging radius must be at least the mesh spacing (or zero)")
    base = sample_phd(spec, radius, delta, time_delta, time_ratio)
    d = space.distance_matrix
    w = space.weights
    # averaging operator A[alpha, i] = w_i 1{i in B(z_alpha, eps)} / mu_alpha
    mask = d[base.net_points] <= eps + 1e-12
    A = mask * w
    A /= A.sum(axis=1, keepdims=True)
    proj = A @ spec.eigenvectors  # ball averages of each eigenfunction
    decay = np.exp(-np.outer(spec.eigenvalues, base.times))
    values = np.einsum("ak,bk,kt->abt", proj, proj, decay, optimize=True)
    values = 0.5 * (values + values.transpose(1, 0, 2))
    return replace(base, values=values, averaged=True, eps=float(eps))


def perturb(data: PointHeatData, noise: float, seed: Optional[int] = None) -> PointHeatData:
    """Add a symmetric uniform perturbation with ``|dH| < noise``."""
    if noise < 0:
        raise PHDError("noise level must be nonnegative")
    if noise == 0:
        return replace(data, values=data.values.copy(), seed=seed)
    if seed is None:
        raise PHDError("a seed is required when noise > 0")
    rng = np.random.default_rng(seed)
    n, _, nt = data.values.shape
    draw = rng.uniform(-1.0, 1.0, size=(nt, n, n))
    draw = np.triu(draw) + np.triu(draw, 1).transpose(0, 2, 1)
    # strict bound |dH| < noise
    draw = np.moveaxis(draw, 0, 2) * (noise * (1 - 1e-12))
    return replace(data, values=data.values + draw, noise=float(data.noise + noise), seed=seed)


def phd_discrepancy(a: PointHeatData, b: PointHeatData, matching: Optional[Sequence[int]] = None,
                    time_matching: Optional[Sequence[int]] = None) -> float:
    """``max |H_a(alpha, beta, ell) - H_b(m(alpha), m(beta), ell')|`` over the matched nets."""
    if matching is None:
        matching = np.arange(a.net_size)
    matching = np.asarray(matching, dtype=np.int64)
    if len(matching) != a.net_size or a.net_size != b.net_size:
        raise PHDError("matching must pair nets of equal cardinality")
    if time_matching is None:
        if a.time_count != b.time_count or not np.allclose(a.times, b.times, rtol=1e-12, atol=0):
            raise PHDError("time nets differ; pass an explicit time matching")
        time_matching = np.arange(a.time_count)
    time_matching = np.asarray(time_matching, dtype=np.int64)
    vb = b.values[np.ix_(matching, matching, time_matching)]
    return float(np.max(np.abs(a.values - vb)))


def write_phd(data: PointHeatData, path: Union[str, Path]) -> None:
    n, _, nt = data.values.shape
    ia, ib = np.triu_indices(n)
    buf = io.StringIO()
    buf.write(json.dumps(data.header()) + "\n")
    buf.write("alpha,beta,ell,t,H\n")
    for ell in range(nt):
        t = repr(float(data.times[ell]))
        col = data.values[ia, ib, ell]
        buf.writelines(f"{a},{b},{ell},{t},{float(v)!r}\n" for a, b, v in zip(ia, ib, col))
    Path(path).write_text(buf.getvalue())


def read_phd(path: Union[str, Path]) -> PointHeatData:
    text = Path(path).read_text()
    if not text.strip():
        raise PHDError(f"{path}: empty heat-data file")
    head, _, body = text.partition("\n")
    try:
        header = json.loads(head)
    except json.JSONDecodeError as exc:
        raise PHDError(f"{path}: header is not valid JSON") from exc
    if header.get("format") != "phd-v1":
        raise PHDError(f"{path}: unknown format {header.get('format')!r}")
    cols, _, rows = body.partition("\n")
    if cols.strip() != "alpha,beta,ell,t,H":
        raise PHDError(f"{path}: unexpected CSV columns {cols!r}")
    n, nt = int(header["net_size"]), int(header["time_count"])
    table = np.loadtxt(io.StringIO(rows), delimiter=",", ndmin=2) if rows.strip() else np.empty((0, 5))
    if table.shape[0] != nt * n * (n + 1) // 2:
        raise PHDError(f"{path}: expected {nt * n * (n + 1) // 2} rows, found {table.shape[0]}")
    a, b, ell = (table[:, k].astype(np.int64) for k in range(3))
    values = np.empty((n, n, nt))
    values[a, b, ell] = table[:, 4]
    values[b, a, ell] = table[:, 4]
    times = np.empty(nt)
    times[ell] = table[:, 3]
    return PointHeatData(
        net_points=np.asarray(header["net_points"], dtype=np.int64),
        times=times,
        values=values,
        delta=float(header["delta"]),
        radius=float(header["radius"]),
        time_delta=float(header["time_delta"]),
        averaged=bool(header["averaged"]),
        eps=float(header["eps"]),
        base_hint=int(header["base_hint"]),
        noise=float(header["noise"]),
        seed=header.get("seed"),
        meta=header.get("meta", {}),
    )
