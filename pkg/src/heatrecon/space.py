"""Discretized pointed metric-measure model spaces.

Every builder returns an immutable :class:`DiscreteSpace`: a weighted graph
whose vertices carry probability masses, density samples and metric samples,
and whose edges carry a length (used for graph geodesics) and a stiffness
(used to assemble the weighted Laplacian in divergence form).  Edges with zero
stiffness only shorten graph distances and never enter the operator.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

Profile = Union[None, float, Callable[[np.ndarray], np.ndarray], Sequence[float], np.ndarray]

_ARRAY_FIELDS = (
    "coords",
    "edges",
    "edge_lengths",
    "stiffness",
    "weights",
    "density",
    "metric_samples",
    "singular_flags",
)


class SpaceError(ValueError):
    """Raised when a model space cannot be built from the given inputs."""


@dataclass(frozen=True, eq=False)
class DiscreteSpace:
    """Weighted graph approximation of a pointed metric-measure space.

    Attributes
    ----------
    kind : str
        Builder name, e.g. ``"circle"``.
    coords : ndarray, shape (n, dim)
        Chart coordinates of the vertices.
    edges : ndarray of int, shape (m, 2)
        Undirected edges, each listed once.
    edge_lengths : ndarray, shape (m,)
        Positive edge lengths.
    stiffness : ndarray, shape (m,)
        Nonnegative edge conductances of the Laplacian (already normalized so
        that the mass matrix is ``diag(weights)``).
    weights : ndarray, shape (n,)
        Probability masses, summing to one.
    density : ndarray, shape (n,)
        Density of the measure with respect to normalized Riemannian volume.
    metric_samples : ndarray, shape (n, dim, dim)
        Metric tensor ``h_jk`` at each vertex.
    base_point : int
    dim : int
    singular_flags : ndarray of bool, shape (n,)
    spacing : float
        Mesh spacing (longest axis edge, in length units).
    params : dict
        Builder parameters, kept for provenance and serialization.
    """

    kind: str
    coords: np.ndarray
    edges: np.ndarray
    edge_lengths: np.ndarray
    stiffness: np.ndarray
    weights: np.ndarray
    density: np.ndarray
    metric_samples: np.ndarray
    base_point: int
    dim: int
    singular_flags: np.ndarray
    spacing: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in _ARRAY_FIELDS:
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self.validate()

    @property
    def vertex_count(self) -> int:
        return int(self.weights.shape[0])

    def validate(self) -> None:
        n = self.vertex_count
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise SpaceError("weights must sum to one")
        if np.any(self.edge_lengths <= 0):
            raise SpaceError("edge lengths must be positive")
        if np.any(self.stiffness < 0):
            raise SpaceError("edge stiffness must be nonnegative")
        bad = (self.density <= 0) & ~self.singular_flags
        if np.any(bad):
            raise SpaceError("density must be positive at regular vertices")
        if np.any((self.weights <= 0) & ~self.singular_flags):
            raise SpaceError("weights must be positive at regular vertices")
        regular = ~self.singular_flags
        if np.any(regular):
            eig = np.linalg.eigvalsh(self.metric_samples[regular])
            if np.any(eig <= 0):
                raise SpaceError("metric samples must be positive definite")
        if not 0 <= self.base_point < n:
            raise SpaceError("base point out of range")
        ncomp, _ = csgraph.connected_components(self.adjacency, directed=False)
        if ncomp != 1:
            raise SpaceError("graph must be connected")

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric sparse matrix of edge lengths (shortest length kept on duplicates)."""
        n = self.vertex_count
        key = np.sort(self.edges, axis=1)
        order = np.lexsort((self.edge_lengths, key[:, 1], key[:, 0]))
        key, lengths = key[order], self.edge_lengths[order]
        first = np.ones(len(key), dtype=bool)
        first[1:] = np.any(key[1:] != key[:-1], axis=1)
        i, j, w = key[first, 0], key[first, 1], lengths[first]
        return sparse.csr_matrix((np.r_[w, w], (np.r_[i, j], np.r_[j, i])), shape=(n, n))

    @cached_property
    def distance_matrix(self) -> np.ndarray:
        """All-pairs graph geodesic distances (dense, read-only)."""
        d = csgraph.dijkstra(self.adjacency, directed=False)
        d = 0.5 * (d + d.T)
        d.setflags(write=False)
        return d

    def distances_from(self, sources) -> np.ndarray:
        """Graph distances from one or several source vertices."""
        return csgraph.dijkstra(self.adjacency, directed=False, indices=sources)

    @property
    def diameter(self) -> float:
        return float(self.distance_matrix.max())

    def ball(self, center: int, radius: float) -> np.ndarray:
        """Vertex indices within graph distance ``radius`` of ``center``."""
        return np.flatnonzero(self.distance_matrix[center] <= radius)

    def to_dict(self) -> dict:
        out = {name: np.asarray(getattr(self, name)).tolist() for name in _ARRAY_FIELDS}
        out.update(
            kind=self.kind,
            base_point=int(self.base_point),
            dim=int(self.dim),
            spacing=float(self.spacing),
            params=_jsonable(self.params),
        )
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DiscreteSpace":
        dim = int(data["dim"])
        n = len(data["weights"])
        return cls(
            kind=data["kind"],
            coords=np.asarray(data["coords"], dtype=float).reshape(n, dim),
            edges=np.asarray(data["edges"], dtype=np.int64).reshape(-1, 2),
            edge_lengths=np.asarray(data["edge_lengths"], dtype=float),
            stiffness=np.asarray(data["stiffness"], dtype=float),
            weights=np.asarray(data["weights"], dtype=float),
            density=np.asarray(data["density"], dtype=float),
            metric_samples=np.asarray(data["metric_samples"], dtype=float).reshape(n, dim, dim),
            base_point=int(data["base_point"]),
            dim=dim,
            singular_flags=np.asarray(data["singular_flags"], dtype=bool),
            spacing=float(data["spacing"]),
            params=dict(data.get("params", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "DiscreteSpace":
        return cls.from_dict(json.loads(text))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if callable(obj):
        return getattr(obj, "__name__", repr(obj))
    return obj


def _sample_profile(profile: Profile, nodes: np.ndarray, mids: np.ndarray):
    """Evaluate a density profile at grid nodes and at edge midpoints."""
    if profile is None:
        return np.ones_like(nodes), np.ones_like(mids)
    if np.isscalar(profile):
        return np.full_like(nodes, float(profile)), np.full_like(mids, float(profile))
    if callable(profile):
        return (np.asarray(profile(nodes), dtype=float) * np.ones_like(nodes),
                np.asarray(profile(mids), dtype=float) * np.ones_like(mids))
    vals = np.asarray(profile, dtype=float)
    if vals.shape != nodes.shape:
        raise SpaceError(f"profile needs {nodes.size} samples, got {vals.size}")
    # periodic average onto midpoints
    return vals, 0.5 * (vals + np.roll(vals, -1))


def _check_positive(vals: np.ndarray, what: str) -> None:
    if np.any(~np.isfinite(vals)) or np.any(vals <= 0):
        raise SpaceError(f"{what} must be strictly positive")


def build_circle(
    n: int,
    length: float = 2 * np.pi,
    density_profile: Profile = None,
    offset: float = 0.0,
    base_point: int = 0,
) -> DiscreteSpace:
    """Uniform periodic grid on a circle of given length with density ``c(y)``.

    ``offset`` shifts the grid start; circles built with offsets differing by
    a multiple of the spacing are isometric with relabelled vertices.
    """
    if n < 3:
        raise SpaceError("circle needs n >= 3")
    if length <= 0:
        raise SpaceError("length must be positive")
    h = length / n
    y = offset + h * np.arange(n)
    c, c_mid = _sample_profile(density_profile, y, y + 0.5 * h)
    _check_positive(c, "density samples")
    _check_positive(c_mid, "density samples")
    z = np.sum(c) * h
    weights = c * h / z
    weights = weights / weights.sum()
    edges = np.column_stack([np.arange(n), (np.arange(n) + 1) % n])
    return DiscreteSpace(
        kind="circle",
        coords=y[:, None],
        edges=edges,
        edge_lengths=np.full(n, h),
        stiffness=c_mid / (h * z),
        weights=weights,
        density=c * length / z,
        metric_samples=np.ones((n, 1, 1)),
        base_point=base_point,
        dim=1,
        singular_flags=np.zeros(n, dtype=bool),
        spacing=h,
        params={"n": n, "length": length, "offset": offset,
                "density_profile": _jsonable(density_profile)},
    )


def build_warped_torus(
    n_y: int,
    n_z: int,
    sigma: float,
    profile: Profile = None,
    base_point: int = 0,
) -> DiscreteSpace:
    """Periodic product grid on ``[-1, 1]^2`` with metric ``dy^2 + sigma^2 c(y)^2 dz^2``.

    Vertex ``(a, b)`` (row ``a`` in y, column ``b`` in z) has index ``a * n_z + b``.
    Laplacian stiffness lives on the axis edges; extra zero-stiffness edges of
    steps ``(1, 2)`` and ``(2, 1)`` and diagonals make graph distances a closer
    match to Riemannian ones.
    """
    if n_y < 3 or n_z < 3:
        raise SpaceError("torus grids need n_y, n_z >= 3")
    if not sigma > 0:
        raise SpaceError("warp sigma must be positive")
    hy, hz = 2.0 / n_y, 2.0 / n_z
    y = -1.0 + hy * np.arange(n_y)
    z = -1.0 + hz * np.arange(n_z)
    c, c_mid = _sample_profile(profile, y, y + 0.5 * hy)
    _check_positive(c, "profile samples")
    _check_positive(c_mid, "profile samples")

    area = sigma * c * hy * hz  # per-vertex Riemannian cell area in row a
    total = area.sum() * n_z
    weights = np.repeat(area / total, n_z)
    vol = total  # Riemannian area of the torus (quadrature)
    density = np.ones(n_y * n_z)

    idx = np.arange(n_y * n_z).reshape(n_y, n_z)
    edges, lengths, stiff = [], [], []
    # axis edges carry the stiffness
    ey = np.column_stack([idx.ravel(), np.roll(idx, -1, axis=0).ravel()])
    sy = np.repeat(sigma * c_mid * hz / hy / total, n_z)
    edges.append(ey)
    lengths.append(np.full(len(ey), hy))
    stiff.append(sy)
    ez = np.column_stack([idx.ravel(), np.roll(idx, -1, axis=1).ravel()])
    sz = np.repeat(hy / (sigma * c * hz) / total, n_z)
    edges.append(ez)
    lengths.append(np.repeat(sigma * c * hz, n_z))
    stiff.append(sz)
    # distance-only edges
    for dy, dz in ((1, 1), (1, -1), (1, 2), (1, -2), (2, 1), (2, -1)):
        if dy >= n_y or abs(dz) >= n_z:
            continue
        e = np.column_stack([idx.ravel(), np.roll(np.roll(idx, -dy, axis=0), -dz, axis=1).ravel()])
        rows = np.repeat(np.arange(n_y), n_z)
        ymid = y[rows] + 0.5 * dy * hy
        cm = _profile_at(profile, ymid, c, rows, dy, n_y)
        edges.append(e)
        lengths.append(np.sqrt((dy * hy) ** 2 + (sigma * cm * dz * hz) ** 2))
        stiff.append(np.zeros(len(e)))

    metric = np.zeros((n_y * n_z, 2, 2))
    metric[:, 0, 0] = 1.0
    metric[:, 1, 1] = np.repeat((sigma * c) ** 2, n_z)
    yy, zz = np.meshgrid(y, z, indexing="ij")
    return DiscreteSpace(
        kind="warped_torus",
        coords=np.column_stack([yy.ravel(), zz.ravel()]),
        edges=np.vstack(edges),
        edge_lengths=np.concatenate(lengths),
        stiffness=np.concatenate(stiff),
        weights=weights / weights.sum(),
        density=density,
        metric_samples=metric,
        base_point=base_point,
        dim=2,
        singular_flags=np.zeros(n_y * n_z, dtype=bool),
        spacing=max(hy, float(np.max(sigma * c)) * hz),
        params={"n_y": n_y, "n_z": n_z, "sigma": sigma, "profile": _jsonable(profile),
                "volume": vol},
    )


def _profile_at(profile, ymid, c, rows, dy, n_y):
    if callable(profile):
        return np.asarray(profile(ymid), dtype=float) * np.ones_like(ymid)
    # sampled or constant profile: average the two end rows
    return 0.5 * (c[rows] + c[(rows + dy) % n_y])


def build_flat_torus(n: int, side: float = 2.0) -> DiscreteSpace:
    """Flat square torus of the given side length (``n x n`` grid)."""
    sp = build_warped_torus(n, n, sigma=1.0)
    if side == 2.0:
        return sp
    return rescale(sp, side / 2.0)


def rescale(space: DiscreteSpace, factor: float) -> DiscreteSpace:
    """Scale all lengths by ``factor`` keeping the normalized measure."""
    d = space.to_dict()
    d["coords"] = (np.asarray(d["coords"]) * factor).tolist()
    d["edge_lengths"] = (np.asarray(d["edge_lengths"]) * factor).tolist()
    d["stiffness"] = (np.asarray(d["stiffness"]) / factor**2).tolist()
    d["metric_samples"] = (np.asarray(d["metric_samples"]) * factor**2).tolist()
    d["spacing"] = d["spacing"] * factor
    d["params"] = {**d["params"], "scale": factor}
    return DiscreteSpace.from_dict(d)


def build_interval_orbifold(n: int, length: float = np.pi, base_point: Optional[int] = None) -> DiscreteSpace:
    """Closed interval ``[0, L]``, the quotient of a circle of length ``2L`` by a reflection.

    Endpoints are the singular stratum and carry half-cell weights, which
    yields the reflecting (Neumann) stencil at the ends.
    """
    if n < 3:
        raise SpaceError("interval needs n >= 3")
    if length <= 0:
        raise SpaceError("length must be positive")
    h = length / (n - 1)
    x = h * np.arange(n)
    cell = np.full(n, h)
    cell[[0, -1]] = 0.5 * h
    weights = cell / length
    flags = np.zeros(n, dtype=bool)
    flags[[0, -1]] = True
    edges = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    return DiscreteSpace(
        kind="interval_orbifold",
        coords=x[:, None],
        edges=edges,
        edge_lengths=np.full(n - 1, h),
        stiffness=np.full(n - 1, 1.0 / (h * length)),
        weights=weights / weights.sum(),
        density=np.ones(n),
        metric_samples=np.ones((n, 1, 1)),
        base_point=(n // 2) if base_point is None else base_point,
        dim=1,
        singular_flags=flags,
        spacing=h,
        params={"n": n, "length": length},
    )


def shortest_distance(space: DiscreteSpace, i: int, j: int) -> float:
    """Graph-geodesic distance between vertices ``i`` and ``j``."""
    n = space.vertex_count
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError("vertex index out of range")
    return float(space.distance_matrix[i, j])


BUILDERS = {
    "circle": build_circle,
    "warped_torus": build_warped_torus,
    "flat_torus": build_flat_torus,
    "interval_orbifold": build_interval_orbifold,
}
