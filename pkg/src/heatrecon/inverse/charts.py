"""Local frames, dimension detection and eigenfunction charts.

Every net point gets a stencil of nearby net points and smooth local
coordinates ``u`` taken from the principal directions of a normalized heat
embedding.  Both are built from gauge-invariant quantities, so rotating the
eigenfunctions inside an eigenspace does not change them.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from itertools import combinations
from math import comb
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.sparse.csgraph import shortest_path

from .lsd import LocalSpectralData


class ChartError(RuntimeError):
    """Raised when no admissible chart or dimension can be found."""


def gauge_fix(lsd: LocalSpectralData, rtol: float = 1e-8) -> LocalSpectralData:
    """Rotate each eigenspace into a canonical basis determined by the data.

    Pivot rows are chosen greedily by residual norm (ties to the lowest net
    index within ``rtol``) and the eigenspace is rotated so that the pivot
    block is lower triangular with a positive diagonal.  The result is the
    same for every input gauge up to rounding.
    """
    phi = np.array(lsd.phi_values)
    for c in lsd.clusters:
        cols = list(c)
        B = phi[:, cols]
        R = B.copy()
        piv = []
        for _ in range(len(cols)):
            norms = np.linalg.norm(R, axis=1)
            top = norms.max()
            i = int(np.flatnonzero(norms >= top * (1 - rtol))[0])
            piv.append(i)
            v = R[i] / norms[i]
            R = R - np.outer(R @ v, v)
        A = B[piv]
        # A = L Q with L lower triangular; B Q^T has a triangular pivot block
        q, r = np.linalg.qr(A.T)
        s = np.sign(np.diag(r))
        s[s == 0] = 1.0
        phi[:, cols] = B @ (q * s)
    return replace(lsd, phi_values=phi)


def heat_embedding(lsd: LocalSpectralData, t: float) -> np.ndarray:
    """Rows ``exp(-lam t / 2) phi(z)`` scaled to unit length."""
    psi = lsd.phi_values * np.exp(-lsd.eigenvalues * t / 2)
    return psi / np.linalg.norm(psi, axis=1, keepdims=True)


def _poly_exponents(d: int, deg: int) -> np.ndarray:
    out = []
    for total in range(deg + 1):
        for c in combinations(range(total + d - 1), d - 1):
            parts, prev = [], -1
            for x in c + (total + d - 1,):
                parts.append(x - prev - 1)
                prev = x
            out.append(parts)
    return np.array(out, dtype=np.int64).reshape(-1, d)


def _design(U: np.ndarray, exps: np.ndarray) -> np.ndarray:
    return np.prod(U[:, None, :] ** exps[None, :, :], axis=2)


@dataclass(eq=False)
class LocalFrames:
    """Stencils, local coordinates and derivative operators on the net.

    Parameters
    ----------
    lsd : LocalSpectralData
    dim : int
        Manifold dimension of the frames.
    degree : int, optional
        Polynomial degree of the local regression (default 6 in 1D, 4 above).
    stencil : int, optional
        Stencil size including the center.
    neighbor_time, coordinate_time : float, optional
        Embedding times for the stencil search and for the coordinates.
    """

    lsd: LocalSpectralData
    dim: int
    degree: Optional[int] = None
    stencil: Optional[int] = None
    neighbor_time: Optional[float] = None
    coordinate_time: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        lam = self.lsd.eigenvalues
        if self.lsd.mode_count < 2:
            raise ChartError("at least one nonconstant mode is required")
        if self.degree is None:
            self.degree = 6 if self.dim == 1 else 4
        self.exps = _poly_exponents(self.dim, self.degree)
        if self.stencil is None:
            self.stencil = len(self.exps) + 2 if self.dim == 1 else int(np.ceil(1.6 * len(self.exps)))
        self.stencil = min(self.stencil, self.lsd.net_size)
        if self.neighbor_time is None:
            self.neighbor_time = 10.0 / lam[-1]
        if self.coordinate_time is None:
            self.coordinate_time = 1.0 / lam[1]
        self.stencil = max(self.stencil, self.dim + 1)
        if self.stencil < len(self.exps):
            # small nets: drop the degree until the regression is determined
            while self.degree > 2 and len(_poly_exponents(self.dim, self.degree)) > self.stencil - 1:
                self.degree -= 1
            self.exps = _poly_exponents(self.dim, self.degree)
        self._build()

    @cached_property
    def neighbor_embedding(self) -> np.ndarray:
        return heat_embedding(self.lsd, self.neighbor_time)

    @cached_property
    def coordinate_embedding(self) -> np.ndarray:
        return heat_embedding(self.lsd, self.coordinate_time)

    @cached_property
    def embedding_distance(self) -> np.ndarray:
        E = self.neighbor_embedding
        g = np.clip(E @ E.T, -1.0, 1.0)
        return np.sqrt(np.maximum(2.0 - 2.0 * g, 0.0))

    def _build(self):
        n, d = self.lsd.net_size, self.dim
        D = self.embedding_distance
        E = self.coordinate_embedding
        k = self.stencil
        self.stencils = np.argsort(D, axis=1, kind="stable")[:, :k]
        self.axes = np.empty((n, E.shape[1], d))
        self.coords = np.empty((n, k, d))
        self.grad_ops = np.empty((n, d, k))
        self.hess_ops = np.empty((n, d, d, k))
        self.singular = np.empty((n, min(k, E.shape[1])))
        exps = self.exps
        lin = [int(np.flatnonzero((exps.sum(1) == 1) & (exps[:, i] == 1))[0]) for i in range(d)]
        quad = {}
        for i in range(d):
            for j in range(i, d):
                e = np.zeros(d, dtype=np.int64)
                e[i] += 1
                e[j] += 1
                quad[(i, j)] = int(np.flatnonzero((exps == e).all(1))[0])
        for a in range(n):
            nb = self.stencils[a]
            X = E[nb] - E[a]
            _, s, vt = np.linalg.svd(X - X.mean(0), full_matrices=False)
            V = vt[:d].T
            U = X @ V
            # deterministic orientation: largest-magnitude coordinate positive
            flip = np.sign(U[np.argmax(np.abs(U), axis=0), np.arange(d)])
            flip[flip == 0] = 1.0
            V, U = V * flip, U * flip
            scale = np.abs(U).max()
            P = np.linalg.pinv(_design(U / scale, exps))
            self.axes[a], self.coords[a] = V, U
            self.singular[a] = s[: self.singular.shape[1]]
            for i in range(d):
                self.grad_ops[a, i] = P[lin[i]] / scale
            for (i, j), r in quad.items():
                fac = 2.0 if i == j else 1.0
                self.hess_ops[a, i, j] = fac * P[r] / scale ** 2
                self.hess_ops[a, j, i] = self.hess_ops[a, i, j]

    def local_coordinate(self, a: int, points: Optional[np.ndarray] = None) -> np.ndarray:
        """Frame coordinates of ``a`` evaluated at ``points`` (all net points by default)."""
        E = self.coordinate_embedding
        pts = np.arange(len(E)) if points is None else np.asarray(points)
        return (E[pts] - E[a]) @ self.axes[a]

    def gradient(self, a: int, values: np.ndarray) -> np.ndarray:
        """Frame gradient at ``a`` of functions given on the net (columns)."""
        return self.grad_ops[a] @ np.asarray(values)[self.stencils[a]]

    def hessian(self, a: int, values: np.ndarray) -> np.ndarray:
        return np.einsum("ijk,k...->ij...", self.hess_ops[a], np.asarray(values)[self.stencils[a]])

    @cached_property
    def hop_distance(self) -> np.ndarray:
        """Hop counts on the symmetrized graph of the ``2 d`` nearest neighbours."""
        n = self.lsd.net_size
        A = np.zeros((n, n))
        kk = min(2 * self.dim + 1, n)
        for a in range(n):
            A[a, self.stencils[a, 1:kk]] = 1.0
        A = np.maximum(A, A.T)
        return shortest_path(A, unweighted=True, directed=False)


def _quadratic_residual(X: np.ndarray, d: int) -> float:
    """Relative residual of a quadratic fit of ``X`` over its top ``d`` principal coordinates."""
    Xc = X - X.mean(0)
    U, s, _ = np.linalg.svd(Xc, full_matrices=False)
    u = U[:, :d] * s[:d]
    cols = [np.ones(len(X))] + [u[:, i] for i in range(d)]
    cols += [u[:, i] * u[:, j] for i in range(d) for j in range(i, d)]
    A = np.column_stack(cols)
    coef, *_ = np.linalg.lstsq(A, X, rcond=None)
    return float(np.linalg.norm(X - A @ coef) / max(np.linalg.norm(Xc), 1e-300))


def detect_dimension(lsd: LocalSpectralData, max_dim: int = 3, ratio: float = 0.25,
                     coverage: float = 0.6, quad_ratio: float = 0.1) -> int:
    """Smallest ``d`` whose local differential rank is reached on most of the net.

    A point has rank at most ``d`` when the heat-embedding differences over
    its ``2d+3`` nearest net points satisfy ``s_{d+1} < ratio * s_d``, or when
    a quadratic fit over the top ``d`` principal coordinates of a wider
    neighbourhood leaves a relative residual below ``quad_ratio``.  The second
    test keeps curvature from masquerading as extra rank on coarse nets.  The
    answer is the smallest ``d`` reached by at least ``coverage`` of the
    points.

    Raises
    ------
    ChartError
        If no nonconstant mode was recovered, or no ``d <= max_dim`` qualifies.
    """
    if lsd.mode_count < 2:
        raise ChartError("dimension detection needs a nonconstant mode")
    n = lsd.net_size
    E = heat_embedding(lsd, 1.0 / lsd.eigenvalues[1])
    En = heat_embedding(lsd, 10.0 / lsd.eigenvalues[-1])
    D = np.sqrt(np.maximum(2.0 - 2.0 * np.clip(En @ En.T, -1, 1), 0.0))
    nbs = np.argsort(D, axis=1, kind="stable")
    fractions = {}
    for d in range(1, max_dim + 1):
        k = min(2 * d + 3, n)
        if k <= d + 1 or E.shape[1] <= d:
            break
        params = 1 + d + d * (d + 1) // 2
        kq = min(2 * params + 1, n)
        hits = 0
        for a in range(n):
            X = E[nbs[a, :k]]
            s = np.linalg.svd(X - X.mean(0), compute_uv=False)
            flat = s[d] < ratio * s[d - 1]
            if not flat and kq > params:
                flat = _quadratic_residual(E[nbs[a, :kq]], d) < quad_ratio
            hits += flat
        fractions[d] = hits / n
        if fractions[d] >= coverage:
            return d
    raise ChartError(f"no dimension <= {max_dim} reached on the net; rank-test coverage {fractions}")


@dataclass(frozen=True)
class Chart:
    """Eigenfunction chart at a net point.

    ``indices`` are canonical-gauge mode indices; ``score`` is the smallest
    singular value of the normalized chart differential; ``validity_hops`` and
    ``validity_radius`` bound the region on which the chart map stays
    injective on net points.
    """

    center: int
    indices: Tuple[int, ...]
    score: float
    validity_hops: int
    validity_radius: float


def _cometric(frames: LocalFrames, a: int, h_u: np.ndarray, idx: Sequence[int], phi: np.ndarray):
    G = frames.gradient(a, phi[:, list(idx)])  # d x m
    return G.T @ h_u @ G


def chart_score(frames: LocalFrames, a: int, idx: Sequence[int], phi: np.ndarray,
                lam: np.ndarray) -> float:
    """Smallest singular value of ``d phi_idx`` in frame coordinates, per unit frequency."""
    G = frames.gradient(a, phi[:, list(idx)] / np.sqrt(lam[list(idx)]))
    usual = np.linalg.norm(frames.gradient(a, phi[:, 1:] / np.sqrt(lam[1:])), axis=0).max()
    sv = np.linalg.svd(G, compute_uv=False)
    return float(sv[-1] / max(usual, 1e-300))


def tuple_injectivity(frames: LocalFrames, idx: Sequence[int], center: int, phi: np.ndarray,
                      sep: float = 0.5) -> int:
    """Largest hop radius around ``center`` on which ``phi[:, idx]`` separates net points.

    Two points at hop distance >= 2 collide when their images are closer than
    ``sep`` times the smaller of their nearest-neighbour image gaps.
    """
    hop = frames.hop_distance
    img = phi[:, list(idx)]
    Dimg = np.linalg.norm(img[:, None] - img[None], axis=2)
    near = np.array([Dimg[a, frames.stencils[a, 1]] for a in range(len(img))])
    gap = np.minimum(near[:, None], near[None]) * sep
    bad = (hop >= 2) & (Dimg < gap)
    hc = hop[center]
    finite = hc[np.isfinite(hc)]
    top = int(finite.max())
    for r in range(1, top + 1):
        inside = np.flatnonzero(hc <= r)
        if np.any(bad[np.ix_(inside, inside)]):
            return r - 1
    return top


def select_chart(lsd: LocalSpectralData, center: int, dim: Optional[int] = None,
                 frames: Optional[LocalFrames] = None, budget: int = 8,
                 threshold: float = 0.2, spacing: Optional[float] = None) -> Chart:
    """Pick the low-mode tuple with the best-conditioned differential at ``center``.

    Candidates are ``dim``-tuples of the first ``budget`` nonconstant modes in
    the canonical gauge (see :func:`gauge_fix`); ties go to lower indices.
    """
    canon = gauge_fix(lsd)
    if frames is None:
        frames = LocalFrames(canon, dim or detect_dimension(lsd))
    d = frames.dim
    phi, lam = canon.phi_values, canon.eigenvalues
    pool = range(1, min(budget + 1, canon.mode_count))
    best = None
    for idx in combinations(pool, d):
        s = chart_score(frames, center, idx, phi, lam)
        if best is None or s > best[0] * (1 + 1e-9):
            best = (s, idx)
    if best is None or best[0] < threshold:
        raise ChartError(f"no chart above threshold {threshold} among the first {budget} modes "
                         f"(best {0 if best is None else best[0]:.3g})")
    hops = tuple_injectivity(frames, best[1], center, phi)
    step = lsd.meta.get("delta", np.nan) if spacing is None else spacing
    return Chart(int(center), tuple(int(i) for i in best[1]), float(best[0]), hops, float(hops * step))
