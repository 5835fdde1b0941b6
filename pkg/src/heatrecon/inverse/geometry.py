"""Net distances and injectivity radii from measures of metric balls.

Both operations only need two primitives, the measure of a ball and the
measure of the intersection of two balls.  :class:`ProjectorMeasures` provides
them from wave projectors (reconstruction side); :class:`SpaceMeasures` from
Dijkstra balls on a forward space (oracle side).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.sparse.csgraph import shortest_path

from ..space import DiscreteSpace
from .bc import DEFAULT_RANK_RTOL, BallProjections
from .lsd import LocalSpectralData


class SpaceMeasures:
    """Exact ball measures on a forward space; ``points`` are vertex indices."""

    def __init__(self, space: DiscreteSpace, points: Optional[Sequence[int]] = None,
                 step: Optional[float] = None):
        self.space = space
        self.points = np.arange(space.vertex_count) if points is None else np.asarray(points)
        self.D = space.distance_matrix[self.points]
        self.w = space.weights
        self.step = space.spacing if step is None else step

    def snap(self, r: float) -> float:
        return float(r)

    def ball(self, a: int, r: float) -> float:
        return float(self.w[self.D[a] <= r + 1e-12].sum())

    def overlap(self, a: int, r: float, b: int, rb: float) -> float:
        m = (self.D[a] <= r + 1e-12) & (self.D[b] <= rb + 1e-12)
        return float(self.w[m].sum())

    def overlap_profiles(self, b: int, rb: float, radii: np.ndarray) -> np.ndarray:
        """``overlap(a, radii[i], b, rb)`` for every point ``a`` (rows) and radius (columns)."""
        probe = self.D[b] <= rb + 1e-12
        Dp, wp = self.D[:, probe], self.w[probe]
        return np.stack([(Dp <= r + 1e-12) @ wp for r in radii], axis=1)


class ProjectorMeasures:
    """Ball measures from wave projectors on a uniform time grid."""

    def __init__(self, lsd: LocalSpectralData, quadrature: np.ndarray, step: float, s_max: float,
                 n_time: int = 30, kind: str = "fourier", rank_rtol: float = DEFAULT_RANK_RTOL):
        grid = np.arange(0.0, s_max + 0.5 * step, step)
        self.step = float(step)
        self.balls = BallProjections(lsd, quadrature, grid, n_time, kind, rank_rtol)
        self.points = np.arange(lsd.net_size)

    @property
    def s_grid(self) -> np.ndarray:
        return self.balls.s_grid

    def _i(self, r: float) -> int:
        return int(np.clip(np.rint(r / self.step), 0, len(self.s_grid) - 1))

    def snap(self, r: float) -> float:
        return float(self.s_grid[self._i(r)])

    def ball(self, a: int, r: float) -> float:
        return self.balls.measure(a, self._i(r))

    def overlap(self, a: int, r: float, b: int, rb: float) -> float:
        return self.balls.overlap(a, self._i(r), b, self._i(rb))

    def overlap_profiles(self, b: int, rb: float, radii: np.ndarray) -> np.ndarray:
        """``overlap(a, radii[i], b, rb)`` for every point ``a`` (rows) and radius (columns)."""
        idx = [self._i(r) for r in radii]
        return self.balls.vectors[:, idx] @ self.balls.vectors[b, self._i(rb)]


@dataclass
class DistanceResult:
    """Reconstructed net distances with per-pair diagnostics."""

    matrix: np.ndarray
    raw: np.ndarray
    flagged: np.ndarray
    eps0: float
    step: float
    repair: float
    self_arrival: np.ndarray
    meta: dict = field(default_factory=dict)


def _crossing(f: np.ndarray, grid: np.ndarray, level: float) -> Optional[float]:
    above = np.flatnonzero(f >= level)
    if not len(above):
        return None
    i = int(above[0])
    if i == 0:
        return float(grid[0])
    f0, f1 = f[i - 1], f[i]
    return float(grid[i - 1] + (level - f0) / (f1 - f0) * (grid[i] - grid[i - 1]))


def reconstruct_distances(measures, eps0: float, s_grid: np.ndarray, method: str = "half",
                          floor_factor: float = 10.0, slack: Optional[float] = None,
                          calibrate: bool = True) -> DistanceResult:
    """Distances between net points from ball-intersection measures.

    Parameters
    ----------
    measures : ProjectorMeasures or SpaceMeasures
    eps0 : float
        Radius of the probe ball ``B(z_beta, eps0)``.
    s_grid : array
        Increasing radii for the growing ball ``B(z_alpha, s)``.
    method : {"half", "floor"}
        ``"half"``: the radius at which the growing ball covers half of the
        probe ball (first-order unbiased).  ``"floor"``: first radius at which
        the overlap exceeds ``floor_factor`` times the empty-set noise floor,
        plus ``eps0``.
    slack : float, optional
        Per-triple triangle-inequality slack, see :func:`repair_metric`.
        Defaults to twice the median nearest-neighbour distance.
    calibrate : bool
        Correct the ``"half"`` rule for the radius excess ``b`` of truncated
        balls.  With excess ``b`` the self-arrival reads ``(eps0 - b) / 2`` and
        every crossing reads ``d - b``, so ``b = eps0 - 2 * self_arrival`` is
        measured from the data and added back.  Exact balls give ``b = 0``.
    """
    pts = measures.points
    n = len(pts)
    grid = np.asarray(s_grid, dtype=float)
    probe = np.array([measures.overlap(b, eps0, b, eps0) for b in range(n)])
    raw = np.zeros((n, n))
    flagged = np.zeros((n, n), dtype=bool)
    floor = 0.0
    if method == "floor":
        # empty-set slicing: the probe ball minus itself
        floor = max(abs(measures.ball(b, eps0) - probe[b]) for b in range(n))
        floor = max(floor, 1e-12)
    for b in range(n):
        prof = measures.overlap_profiles(b, eps0, grid)
        for a in range(n):
            f = prof[a]
            if method == "half":
                x = _crossing(f, grid, 0.5 * probe[b])
                val = x
            elif method == "floor":
                x = _crossing(f, grid, floor_factor * floor)
                val = None if x is None else x + eps0
            else:
                raise ValueError(f"unknown distance rule {method!r}")
            if val is None:
                flagged[a, b] = True
                val = float(grid[-1])
            raw[a, b] = val
    self_arrival = np.diag(raw).copy()
    sym = 0.5 * (raw + raw.T)
    bias = np.zeros(n)
    if calibrate and method == "half":
        bias = eps0 - 2.0 * self_arrival
        sym = sym + 0.5 * (bias[:, None] + bias[None, :])
    np.fill_diagonal(sym, 0.0)
    step = float(grid[1] - grid[0]) if len(grid) > 1 else 0.0
    if slack is None:
        off = sym + np.diag(np.full(n, np.inf))
        slack = 2.0 * float(np.median(off.min(axis=1))) if n > 1 else 0.0
    out, change = repair_metric(sym, slack)
    return DistanceResult(out, raw, flagged, float(eps0), step, change, self_arrival,
                          meta={"method": method, "floor": floor, "slack": slack,
                                "bias": bias, "violation": triangle_violation(out)})


def _min_plus(D: np.ndarray) -> np.ndarray:
    """``min_b D[a, b] + D[b, c]`` over intermediate points ``b``."""
    out = np.empty_like(D)
    for a in range(len(D)):
        out[a] = np.min(D[a][:, None] + D, axis=0)
    return out


def repair_metric(D: np.ndarray, slack: float, max_iter: int = 100) -> tuple:
    """Enforce ``D_ac <= D_ab + D_bc + slack`` for every triple.

    Violating entries are lowered to ``min_b D_ab + D_bc + slack`` until a
    fixed point is reached.  Because the slack is paid per triple, small
    per-pair biases do not compound along chains the way a full
    shortest-path closure would.  Returns the repaired matrix and the largest
    change made.
    """
    out = np.array(D, dtype=float)
    for _ in range(max_iter):
        bound = _min_plus(out) + slack
        bad = out > bound + 1e-12
        if not bad.any():
            break
        out = np.where(bad, bound, out)
    return out, float(np.max(D - out))


def triangle_violation(D: np.ndarray) -> float:
    """``max(D_ac - D_ab - D_bc)`` over all triples (0 for a metric)."""
    return float(max(np.max(D - _min_plus(D)), 0.0))


@dataclass
class InjectivityEstimate:
    """Injectivity radius estimate at one point.

    ``value`` is the smallest bracketing radius found; when no empty set
    ``N`` was seen, ``value`` is ``nan`` and ``lower`` is the largest radius
    tested.  ``eps`` is the thickness actually used.
    """

    point: int
    value: float
    lower: float
    upper: float
    eps: float
    direction: Optional[int]
    rho: Optional[float]
    bracketed: bool


def injectivity_radius(measures, x: int, distances: np.ndarray, r_grid: np.ndarray,
                       eps: Optional[float] = None, kappa: Optional[float] = None,
                       passes: Optional[int] = None, persist: Optional[int] = None) -> InjectivityEstimate:
    """Injectivity radius at ``x`` from emptiness of the exit sets ``N``.

    For a direction point ``x1`` at distance ``rho`` from ``x`` the set
    ``N = B(x1, R - rho + eps) \\ B(x, R)`` is empty once ``R`` passes the cut
    distance in that direction; the estimate is the smallest such ``R`` over
    directions.  The thickness bias is about ``eps / rho``, so ``rho`` is
    bootstrapped: a first pass with short ``rho`` gives ``i0`` and later
    passes use ``rho`` in ``[0.35 i0, 0.65 i0]`` (always below the current
    estimate).

    Parameters
    ----------
    measures : ProjectorMeasures or SpaceMeasures
    x : int
        Point index (in ``measures.points`` numbering).
    distances : array
        Distance matrix on the same points (reconstructed or true).
    r_grid : array
        Uniform grid of candidate radii ``R``.
    eps : float, optional
        Thickness; defaults to one grid step.
    kappa : float, optional
        ``N`` counts as empty when its measure is at most ``kappa`` times that
        of ``B(x1, R - rho + eps) \\ B(x, R - eps)``, which is ``N`` plus the
        adjacent layer and has about twice its measure before the cut.  Defaults to 0.25 for projector measures and to a
        rounding-level threshold for exact measures.
    passes : int, optional
        Number of ``rho`` refinements.  Defaults to 3 for exact measures and
        1 for projector measures, whose long-direction readings (large
        ``rho``) show false early emptiness.
    persist : int, optional
        Number of consecutive radii at which ``N`` must read empty (emptiness
        is monotone in ``R``); guards against isolated dips of projected
        measures.  Defaults to 3 for projector measures and 1 for exact ones.

    Radii are tested from just above ``rho`` with exact measures and from
    ``rho + eps`` with projected ones.
    """
    r_grid = np.asarray(r_grid, dtype=float)
    step = float(r_grid[1] - r_grid[0])
    exact = isinstance(measures, SpaceMeasures)
    if kappa is None:
        kappa = 1e-9 if exact else 0.25
    if persist is None:
        persist = 1 if exact else 3
    if passes is None:
        passes = 3 if exact else 1
    # projected measures need a full layer of thickness beyond x1 before they read reliably
    s_min = 0.0 if exact else (step if eps is None else eps)
    est = _injectivity_pass(measures, x, distances, r_grid, eps, (0.5 * step, 3.0 * step), kappa, persist, s_min)
    for _ in range(passes - 1):
        if not est.bracketed:
            break
        lo, hi = 0.35 * est.value, 0.65 * est.value
        nxt = _injectivity_pass(measures, x, distances, r_grid, eps, (max(lo, 0.5 * step), hi), kappa, persist,
                                s_min)
        if not nxt.bracketed or nxt.value > est.value:
            break
        est = nxt
    return est


def _injectivity_pass(measures, x: int, distances: np.ndarray, r_grid: np.ndarray,
                      eps: Optional[float], rho_range: tuple, kappa: float,
                      persist: int, s_min: float = 0.0) -> InjectivityEstimate:
    r_grid = np.asarray(r_grid, dtype=float)
    step = float(r_grid[1] - r_grid[0])
    eps = step if eps is None else eps
    lo, hi = rho_range
    dx = distances[x]
    dirs = [int(b) for b in np.flatnonzero((dx >= lo - 1e-12) & (dx <= hi + 1e-12)) if b != x]
    if not dirs:
        dirs = [int(np.argsort(dx)[1])]
    best = (np.inf, None, None)
    for x1 in dirs:
        rho = measures.snap(float(dx[x1]))
        run = 0
        for R in r_grid:
            if R < rho + s_min - 1e-12 or R <= rho + 1e-12:
                continue
            if R - (persist - 1) * step >= best[0]:
                break
            a_rad = R - rho + eps
            big = measures.ball(x1, a_rad)
            mN = big - measures.overlap(x1, a_rad, x, R)
            # reference: N together with the adjacent layer B(x, R) minus B(x, R - eps);
            # both sit at the same place, so density variations cancel
            ref = big - measures.overlap(x1, a_rad, x, R - eps)
            run = run + 1 if mN <= kappa * ref + 1e-15 else 0
            if run == persist:
                best = (float(R - (persist - 1) * step), x1, rho)
                break
    if np.isfinite(best[0]):
        return InjectivityEstimate(int(x), best[0], best[0] - step, best[0], float(eps), best[1], best[2], True)
    top = float(r_grid[-1])
    return InjectivityEstimate(int(x), float("nan"), top, float("inf"), float(eps), None, None, False)
