"""Pointed measured Gromov-Hausdorff estimates between finite metric-measure nets.

A pair of maps ``psi: A -> B`` and ``psi': B -> A`` certifies ``d <= eps`` when
both maps distort distances by less than ``eps``, move the base point by less
than ``eps``, and push measure forward almost monotonically:
``mu_A(psi^-1(S)) < mu_B(S^eps) + eps`` for every ball ``S`` of ``B`` (and
symmetrically).  Metric balls around net points serve as the test family.

Each condition holds on an up-set of ``eps``, so the certified value of a map
pair is the maximum of the per-condition infima and the two directions can be
optimized independently.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .space import DiscreteSpace

EXHAUSTIVE_MAX = 8
_MEASURE_TOL = 1e-12


class MghError(ValueError):
    """Raised for nets without weights or with inconsistent shapes."""


@dataclass(frozen=True, eq=False)
class MetricMeasureNet:
    """Finite pointed metric-measure space: distance matrix, probability weights, base index."""

    distances: np.ndarray
    weights: np.ndarray
    base: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        D = np.array(self.distances, dtype=float)
        if self.weights is None:
            raise MghError("net weights are required")
        w = np.array(self.weights, dtype=float)
        if D.ndim != 2 or D.shape[0] != D.shape[1] or len(w) != len(D):
            raise MghError("distances must be square and match the weights")
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
            raise MghError("weights must be a probability vector")
        if not 0 <= self.base < len(w):
            raise MghError("base index out of range")
        D.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "distances", D)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def diameter(self) -> float:
        return float(self.distances.max())

    @classmethod
    def from_space(cls, space: DiscreteSpace, points: Optional[Sequence[int]] = None,
                   base: Optional[int] = None) -> "MetricMeasureNet":
        """Net on ``points`` (all vertices by default) carrying the Voronoi-aggregated weights."""
        D = space.distance_matrix
        if points is None:
            return cls(D, space.weights, space.base_point if base is None else base)
        pts = np.asarray(points, dtype=np.int64)
        owner = np.argmin(D[pts], axis=0)  # ties go to the lowest net index
        w = np.bincount(owner, weights=space.weights, minlength=len(pts))
        if base is None:
            base = int(np.argmin(D[space.base_point, pts]))
        return cls(D[np.ix_(pts, pts)], w / w.sum(), int(base))


@dataclass
class MghEstimate:
    """Upper estimate of the pointed measured GH distance with its witnesses.

    ``measure_defect`` is the smallest ``eps`` for which both measure
    conditions hold for the returned maps; ``gap`` bounds the distance between
    ``epsilon`` and the best value over the searched map class (zero for
    exhaustive search).
    """

    epsilon: float
    map_fwd: np.ndarray
    map_bwd: np.ndarray
    distortion: float
    measure_defect: float
    base_defect: float
    lower_bound: float
    gap: float
    exhaustive: bool
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "map_fwd": [int(i) for i in self.map_fwd],
            "map_bwd": [int(i) for i in self.map_bwd],
            "distortion": self.distortion,
            "measure_defect": self.measure_defect,
            "base_defect": self.base_defect,
            "lower_bound": self.lower_bound,
            "gap": self.gap,
            "exhaustive": self.exhaustive,
        }


class _BallFamily:
    """Balls of a target net with the measures of their open neighbourhoods.

    Row ``s`` of ``radii`` lists the distances from the points of the net to
    ball ``s`` in increasing order, and ``mass[s, j]`` is the measure of the
    points within ``radii[s, j]`` of it, so ``mu(S_s^eps) = mass[s, j]`` for
    ``eps`` in ``(radii[s, j], radii[s, j+1]]``.
    """

    def __init__(self, net: MetricMeasureNet):
        D = net.distances
        seen, members, to_set = set(), [], []
        for c in range(net.size):
            order = np.argsort(D[c], kind="stable")
            # distance of every point to the prefix ball around c
            run = np.minimum.accumulate(D[:, order], axis=1)
            ends = np.flatnonzero(np.append(np.diff(D[c, order]) > 1e-12, True))
            for e in ends:
                mask = np.zeros(net.size, dtype=bool)
                mask[order[: e + 1]] = True
                key = mask.tobytes()
                if key not in seen:
                    seen.add(key)
                    members.append(mask)
                    to_set.append(run[:, e])
        self.members = np.array(members)  # sets x m
        to_set = np.array(to_set)
        idx = np.argsort(to_set, axis=1, kind="stable")
        self.radii = np.take_along_axis(to_set, idx, axis=1)
        cum = np.concatenate([np.zeros((len(idx), 1)), np.cumsum(net.weights[idx], axis=1)], axis=1)
        reach = np.array([np.searchsorted(r, r + 1e-12, side="right") for r in self.radii])
        self.mass = np.take_along_axis(cum, reach, axis=1)

    def threshold(self, pulled: np.ndarray, chunk: int = 2**22) -> np.ndarray:
        """Smallest admissible ``eps`` for each column of pulled-back set measures (sets x P).

        Each set's condition holds on an up-set of ``eps`` whose infimum is
        ``min_j max(radii[j], pulled - mass[j])``; the map's value is the
        largest such infimum.
        """
        sets, P = pulled.shape
        out = np.empty(P)
        step = max(1, chunk // max(1, self.radii.size))
        for a in range(0, P, step):
            gap = pulled[:, a: a + step, None] - self.mass[:, None, :]
            gap[gap <= _MEASURE_TOL] = 0.0  # summation-order round-off
            per_set = np.min(np.maximum(self.radii[:, None, :], gap), axis=2)
            out[a: a + step] = per_set.max(axis=0)
        return out


def _pulled(family: _BallFamily, maps: np.ndarray, w_src: np.ndarray) -> np.ndarray:
    # mu_src(psi^-1(S)) for every set S (rows) and map (columns)
    return np.einsum("spn,n->sp", family.members[:, maps], w_src)


def _distortions(DA: np.ndarray, DB: np.ndarray, maps: np.ndarray) -> np.ndarray:
    img = DB[maps[:, :, None], maps[:, None, :]]
    return np.max(np.abs(img - DA[None]), axis=(1, 2))


def map_defects(A: MetricMeasureNet, B: MetricMeasureNet, psi: Sequence[int],
                family: Optional[_BallFamily] = None) -> dict:
    """Distortion, base and measure infima of a single map ``psi: A -> B``."""
    psi = np.asarray(psi, dtype=np.int64)
    family = family or _BallFamily(B)
    dist = float(_distortions(A.distances, B.distances, psi[None])[0])
    base = float(B.distances[psi[A.base], B.base])
    meas = float(family.threshold(_pulled(family, psi[None], A.weights))[0])
    return {"distortion": dist, "base": base, "measure": meas, "value": max(dist, base, meas)}


def pair_lower_bound(A: MetricMeasureNet, B: MetricMeasureNet) -> float:
    """Largest single-pair distortion forced on any map in either direction."""

    def one(DA, DB):
        vals = np.unique(DB)
        d = np.unique(DA)
        i = np.clip(np.searchsorted(vals, d), 1, len(vals) - 1)
        return float(np.max(np.minimum(np.abs(d - vals[i - 1]), np.abs(d - vals[i]))))

    return max(one(A.distances, B.distances), one(B.distances, A.distances))


def _exhaustive(A: MetricMeasureNet, B: MetricMeasureNet, chunk: int = 4096):
    n, m = A.size, B.size
    if n == m:
        maps = np.array(list(itertools.permutations(range(m))), dtype=np.int64)
    else:
        maps = np.array(list(itertools.product(range(m), repeat=n)), dtype=np.int64)
    gh = np.maximum(_distortions(A.distances, B.distances, maps), B.distances[maps[:, A.base], B.base])
    order = np.argsort(gh, kind="stable")
    family = _BallFamily(B)
    best, best_map = np.inf, None
    for start in range(0, len(order), chunk):
        idx = order[start: start + chunk]
        if gh[idx[0]] >= best:
            break
        vals = np.maximum(gh[idx], family.threshold(_pulled(family, maps[idx], A.weights)))
        k = int(np.argmin(vals))
        if vals[k] < best:
            best, best_map = float(vals[k]), maps[idx[k]]
    return best_map, family


def _fps_order(D: np.ndarray, start: int) -> np.ndarray:
    order = [start]
    gap = D[start].copy()
    gap[start] = -1
    for _ in range(len(D) - 1):
        nxt = int(np.argmax(gap))
        order.append(nxt)
        gap = np.minimum(gap, D[nxt])
        gap[order] = -1
    return np.array(order)


def _score(E: np.ndarray) -> Tuple[float, float]:
    return float(E.max()), float(np.sum(E * E))


def _row_top2(E: np.ndarray):
    # largest entry of each row with its column, and the runner-up
    rows = np.arange(len(E))
    arg = np.argmax(E, axis=1)
    m1 = E[rows, arg]
    tmp = E.copy()
    tmp[rows, arg] = -np.inf
    return arg, m1, tmp.max(axis=1) if E.shape[1] > 1 else np.full(len(E), -np.inf)


def _row_top3(E: np.ndarray):
    n = len(E)
    k = min(3, n)
    cols = np.argsort(-E, axis=1, kind="stable")[:, :k]
    vals = np.take_along_axis(E, cols, axis=1)
    if k < 3:
        cols = np.pad(cols, ((0, 0), (0, 3 - k)), constant_values=-1)
        vals = np.pad(vals, ((0, 0), (0, 3 - k)), constant_values=-np.inf)
    return cols, vals


def _best_swap(DA: np.ndarray, DB: np.ndarray, psi: np.ndarray, E: np.ndarray, top, x: int):
    """Best ``(max, sum of squares)`` over maps exchanging the images of ``x`` and another point.

    Only rows and columns ``x`` and ``z`` change, so each candidate is scored
    from the untouched minor (through per-row top-3 maxima) and two new rows.
    """
    n = len(psi)
    z = np.flatnonzero(psi != psi[x])
    if not z.size:
        return None, None
    cols, vals = top
    # per row: the two largest entries off column x
    hit0, hit1 = cols[:, 0] == x, cols[:, 1] == x
    c1 = np.where(hit0, cols[:, 1], cols[:, 0])
    v1 = np.where(hit0, vals[:, 1], vals[:, 0])
    v2 = np.where(hit0 | hit1, vals[:, 2], vals[:, 1])
    R = np.where(c1[None, :] == z[:, None], v2[None, :], v1[None, :])  # candidates x rows
    r = np.arange(len(z))
    R[:, x] = -np.inf
    R[r, z] = -np.inf
    rest_max = np.maximum(R.max(axis=1), 0.0)
    trials = np.repeat(psi[None], len(z), axis=0)
    trials[r, x] = psi[z]
    trials[r, z] = psi[x]
    Rx = np.abs(DB[psi[z][:, None], trials] - DA[x][None])
    Rz = np.abs(DB[psi[x]][trials] - DA[z])
    S = np.sum(E * E, axis=1)
    total = float(S.sum())
    old = 2 * (S[x] + S[z]) - (E[x, x] ** 2 + E[z, z] ** 2 + 2 * E[x, z] ** 2)
    new = 2 * (np.sum(Rx * Rx, axis=1) + np.sum(Rz * Rz, axis=1)) - (Rx[:, x] ** 2 + Rz[r, z] ** 2 + 2 * Rx[r, z] ** 2)
    mx = np.maximum(rest_max, np.maximum(Rx.max(axis=1), Rz.max(axis=1)))
    sq = total - old + new
    k = int(np.lexsort((sq, mx))[0])
    return (float(mx[k]), float(sq[k])), trials[k]


def _local_search(DA: np.ndarray, DB: np.ndarray, psi: np.ndarray, sweeps: int) -> np.ndarray:
    n = len(psi)
    psi = psi.copy()
    E = np.abs(DB[np.ix_(psi, psi)] - DA)
    if n == 1:
        return psi
    for _ in range(sweeps):
        improved = False
        arg, m1, m2 = _row_top2(E)
        total_sq = float(np.sum(E * E))
        for x in range(n):
            keep = np.ones(n, dtype=bool)
            keep[x] = False
            # max over the minor without row and column x
            row_rest = np.where(arg == x, m2, m1)
            row_rest[x] = -np.inf
            rest_max = max(float(row_rest.max()), 0.0)
            rest_sq = total_sq - 2 * float(np.sum(E[x] ** 2)) + float(E[x, x] ** 2)
            rows = np.abs(DB[:, psi[keep]] - DA[x, keep][None])  # candidates y x others
            cand_max = np.maximum(rest_max, rows.max(axis=1))
            cand_sq = rest_sq + 2 * np.sum(rows * rows, axis=1)
            cur = (max(rest_max, E[x, keep].max()), rest_sq + 2 * float(np.sum(E[x, keep] ** 2)))
            y = int(np.lexsort((cand_sq, cand_max))[0])
            if cand_max[y] < cur[0] - 1e-15 or (cand_max[y] <= cur[0] + 1e-15 and cand_sq[y] < cur[1] - 1e-12):
                psi[x] = y
                E[x] = E[:, x] = np.abs(DB[y, psi] - DA[x])
                E[x, x] = abs(DB[y, y] - DA[x, x])
                arg, m1, m2 = _row_top2(E)
                total_sq = float(np.sum(E * E))
                improved = True
        # 2-swaps through the worst pair
        i, j = np.unravel_index(int(np.argmax(E)), E.shape)
        for x in sorted({int(i), int(j)}):
            key, trial = _best_swap(DA, DB, psi, E, _row_top3(E), x)
            cur = _score(E)
            if trial is not None and (key[0] < cur[0] - 1e-15 or
                                      (key[0] <= cur[0] + 1e-15 and key[1] < cur[1] - 1e-12)):
                psi = trial
                E = np.abs(DB[np.ix_(psi, psi)] - DA)
                improved = True
        if not improved:
            break
    return psi


def _heuristic(A: MetricMeasureNet, B: MetricMeasureNet, restarts: int, sweeps: int):
    DA, DB = A.distances, B.distances
    order = _fps_order(DA, A.base)
    family = _BallFamily(B)
    second = order[1] if A.size > 1 else order[0]
    # seed the second anchor with the targets best matching its distance to the base
    fit = np.abs(DB[B.base] - DA[A.base, second])
    seeds = np.argsort(fit, kind="stable")[:max(1, restarts)]
    best, best_map = (np.inf, np.inf), None
    for y2 in seeds:
        psi = np.full(A.size, -1, dtype=np.int64)
        psi[A.base] = B.base
        psi[second] = int(y2)
        for x in order:
            if psi[x] >= 0:
                continue
            done = np.flatnonzero(psi >= 0)
            cost = np.max(np.abs(DB[:, psi[done]] - DA[x, done][None]), axis=1)
            psi[x] = int(np.argmin(cost))
        psi = _local_search(DA, DB, psi, sweeps)
        d = map_defects(A, B, psi, family)
        key = (d["value"], float(np.sum((DB[np.ix_(psi, psi)] - DA) ** 2)))
        if key < best:
            best, best_map = key, psi
    return best_map, family


def d_mgh_estimate(A: MetricMeasureNet, B: MetricMeasureNet, budget: int = 16,
                   exhaustive: Optional[bool] = None, sweeps: int = 20) -> MghEstimate:
    """Upper estimate of the pointed measured GH distance between two nets.

    Parameters
    ----------
    A, B : MetricMeasureNet
    budget : int
        Number of greedy restarts per direction in heuristic mode.
    exhaustive : bool, optional
        Search all bijections (equal sizes) or all maps; default when both nets
        have at most eight points.
    sweeps : int
        Maximum local-refinement sweeps per restart.
    """
    for net in (A, B):
        if not isinstance(net, MetricMeasureNet):
            raise MghError("inputs must be MetricMeasureNet instances (use MetricMeasureNet.from_space)")
    if exhaustive is None:
        exhaustive = max(A.size, B.size) <= EXHAUSTIVE_MAX
    if exhaustive:
        if A.size != B.size and max(B.size ** A.size, A.size ** B.size) > 2e6:
            raise MghError("exhaustive search over all maps is too large; use heuristic mode")
        fwd, fam_b = _exhaustive(A, B)
        bwd, fam_a = _exhaustive(B, A)
    else:
        fwd, fam_b = _heuristic(A, B, budget, sweeps)
        bwd, fam_a = _heuristic(B, A, budget, sweeps)
    df = map_defects(A, B, fwd, fam_b)
    db = map_defects(B, A, bwd, fam_a)
    eps = max(df["value"], db["value"])
    lb = pair_lower_bound(A, B)
    return MghEstimate(
        epsilon=eps, map_fwd=np.asarray(fwd), map_bwd=np.asarray(bwd),
        distortion=max(df["distortion"], db["distortion"]),
        measure_defect=max(df["measure"], db["measure"]),
        base_defect=max(df["base"], db["base"]),
        lower_bound=lb, gap=0.0 if exhaustive else max(eps - lb, 0.0), exhaustive=bool(exhaustive),
        meta={"forward": df, "backward": db},
    )


@dataclass
class TriangleReport:
    rows: List[dict]
    holds: bool


def almost_triangle_check(triples: Iterable[Tuple[MetricMeasureNet, MetricMeasureNet, MetricMeasureNet]],
                          **kwargs) -> TriangleReport:
    """Check ``d(A,B) <= 2 (d(A,C) + d(C,B)) + slack`` on each triple.

    ``slack`` is the optimality gap of the ``d(A,B)`` estimate (zero when
    exhaustive), since only that side is an upper estimate being compared
    against a valid bound.
    """
    rows = []
    for A, B, C in triples:
        ab = d_mgh_estimate(A, B, **kwargs)
        ac = d_mgh_estimate(A, C, **kwargs)
        cb = d_mgh_estimate(C, B, **kwargs)
        rhs = 2.0 * (ac.epsilon + cb.epsilon)
        rows.append({"ab": ab.epsilon, "ac": ac.epsilon, "cb": cb.epsilon, "rhs": rhs, "slack": ab.gap,
                     "holds": ab.epsilon <= rhs + ab.gap + 1e-12})
    return TriangleReport(rows, all(r["holds"] for r in rows))


def circle_net(n: int, length: float, weights: Optional[np.ndarray] = None, offset: float = 0.0) -> MetricMeasureNet:
    """Equally spaced net on a circle with arc-length distances (test and sweep helper)."""
    y = offset + length * np.arange(n) / n
    d = np.abs(y[:, None] - y[None, :]) % length
    D = np.minimum(d, length - d)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights) / np.sum(weights)
    return MetricMeasureNet(D, w, 0)


__all__ = ["MetricMeasureNet", "MghEstimate", "MghError", "d_mgh_estimate", "almost_triangle_check",
           "map_defects", "pair_lower_bound", "circle_net", "TriangleReport"]
