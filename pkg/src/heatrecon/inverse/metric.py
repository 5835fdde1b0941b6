"""Metric, drift and density recovery from local spectral data.

In any local coordinate ``u`` every eigenfunction satisfies
``-h^{ij} d_ij phi_p - a^i d_i phi_p = lam_p phi_p``, a linear system in the
cometric ``h`` and drift ``a``.  The density enters through
``a^j = |h|^{-1/2} d_k(|h|^{1/2} h^{jk}) + h^{jk} d_k ln rho``; the resulting
one-form ``d ln rho`` is integrated over the stencil graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.optimize import nnls
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import lsqr

from .charts import Chart, ChartError, LocalFrames, chart_score, detect_dimension, gauge_fix, select_chart
from .lsd import LocalSpectralData


@dataclass(eq=False)
class MetricDensity:
    """Recovered geometry on the net.

    Frame quantities (``frame_*``) live in the local coordinates of
    :class:`LocalFrames`; chart quantities use the selected eigenfunction
    coordinates ``x = phi_idx / phi_0``.
    """

    dim: int
    charts: List[Chart]
    chart_coords: np.ndarray
    metric: np.ndarray
    drift: np.ndarray
    dlog_density: np.ndarray
    frame_metric: np.ndarray
    frame_drift: np.ndarray
    frame_dlog_density: np.ndarray
    log_density: np.ndarray
    density: np.ndarray
    volume: np.ndarray
    quadrature: np.ndarray
    flagged: np.ndarray
    residuals: np.ndarray
    modes_used: int
    meta: dict = field(default_factory=dict)

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.density * self.volume))


def _frame_metric_at(frames: LocalFrames, a: int, b: int, h_u: np.ndarray) -> np.ndarray:
    """Cometric of point ``b`` expressed in the frame coordinates of ``a``."""
    ua = frames.local_coordinate(a)
    J = frames.gradient(b, ua).T  # d(u_a)/d(u_b)
    return J @ h_u[b] @ J.T


def _solve_point(frames: LocalFrames, a: int, phi: np.ndarray, lam: np.ndarray, modes: np.ndarray):
    d = frames.dim
    g = frames.gradient(a, phi[:, modes])  # d x P
    H = frames.hessian(a, phi[:, modes])  # d x d x P
    iu = np.triu_indices(d)
    cols = [-(1.0 if i == j else 2.0) * H[i, j] for i, j in zip(*iu)]
    cols += [-g[i] for i in range(d)]
    M = np.stack(cols, axis=1)
    rhs = lam[modes] * phi[a, modes]
    # column scaling keeps the normal equations balanced across modes
    w = 1.0 / np.maximum(np.abs(rhs), np.abs(M).max(axis=1) + 1e-300)
    sol, *_ = np.linalg.lstsq(M * w[:, None], rhs * w, rcond=None)
    sv = np.linalg.svd(M * w[:, None], compute_uv=False)
    cond = sv[0] / max(sv[-1], 1e-300)
    h = np.zeros((d, d))
    h[iu] = sol[: len(iu[0])]
    h = h + np.triu(h, 1).T
    resid = float(np.linalg.norm(M @ sol - rhs) / max(np.linalg.norm(rhs), 1e-300))
    return h, sol[len(iu[0]):], cond, resid


def _integrate(frames: LocalFrames, omega: np.ndarray, edges_per_point: int):
    n = len(omega)
    rows, cols, vals, rhs = [], [], [], []
    seen = set()
    r = 0
    for a in range(n):
        for b in frames.stencils[a, 1: 1 + edges_per_point]:
            b = int(b)
            key = (min(a, b), max(a, b))
            if key in seen:
                continue
            seen.add(key)
            inc = 0.5 * (omega[a] @ frames.local_coordinate(a, [b])[0] - omega[b] @ frames.local_coordinate(b, [a])[0])
            rows += [r, r]
            cols += [b, a]
            vals += [1.0, -1.0]
            rhs.append(inc)
            r += 1
    # gauge row: zero mean
    rows += [r] * n
    cols += list(range(n))
    vals += [1.0 / n] * n
    rhs.append(0.0)
    A = coo_matrix((vals, (rows, cols)), shape=(r + 1, n)).tocsr()
    sol = lsqr(A, np.array(rhs), atol=1e-15, btol=1e-15, iter_lim=50 * n)[0]
    misfit = float(np.max(np.abs(A @ sol - np.array(rhs)))) if r else 0.0
    return sol, misfit


def _cell_lengths(frames: LocalFrames, h_u: np.ndarray) -> np.ndarray:
    n = frames.lsd.net_size
    vol = np.zeros(n)
    for a in range(n):
        nb = frames.stencils[a, 1:]
        u = frames.local_coordinate(a, nb)[:, 0]
        half = 0.0
        for side in (u > 0, u < 0):
            if not np.any(side):
                continue
            k = np.flatnonzero(side)[np.argmin(np.abs(u[side]))]
            b = int(nb[k])
            g_a = 1.0 / h_u[a, 0, 0]
            g_b = 1.0 / _frame_metric_at(frames, a, b, h_u)[0, 0]
            half += 0.25 * (np.sqrt(g_a) + np.sqrt(g_b)) * abs(u[k])
        vol[a] = half
    return vol


def moment_quadrature(lsd: LocalSpectralData, modes: Optional[int] = None) -> np.ndarray:
    """Nonnegative weights making the leading modes orthonormal on the net.

    Meaningful only when the net covers the whole space.
    """
    n = lsd.net_size
    m = lsd.mode_count if modes is None else min(modes, lsd.mode_count)
    P = lsd.phi_values[:, :m]
    iu = np.triu_indices(m)
    A = (P[:, iu[0]] * P[:, iu[1]]).T
    b = (iu[0] == iu[1]).astype(float)
    q, _ = nnls(A, b, maxiter=50 * n)
    return q


def default_modes(lsd: LocalSpectralData, dim: int, factor: float = 16.0) -> np.ndarray:
    """Nonconstant modes with ``lam <= factor * lam_1`` (at least ``d(d+3)/2``)."""
    lam = lsd.eigenvalues
    need = dim * (dim + 3) // 2
    idx = np.flatnonzero((lam > 0) & (lam <= factor * lam[1] * (1 + 1e-9)))
    if len(idx) < need:
        idx = np.arange(1, min(lsd.mode_count, need + 1))
    if len(idx) < need:
        raise ChartError(f"metric recovery needs {need} nonconstant modes, only {len(idx)} recovered")
    return idx


def recover_metric_density(lsd: LocalSpectralData, dim: Optional[int] = None,
                           frames: Optional[LocalFrames] = None, modes: Optional[np.ndarray] = None,
                           cond_limit: float = 1e8, volume: str = "auto") -> MetricDensity:
    """Recover cometric, drift and normalized density on the net.

    Parameters
    ----------
    lsd : LocalSpectralData
    dim : int, optional
        Manifold dimension; detected when omitted.
    frames : LocalFrames, optional
        Precomputed frames (must match ``dim``).
    modes : array of int, optional
        Mode indices entering the least-squares system.
    cond_limit : float
        Points whose normal equations exceed this condition number, or whose
        cometric is not positive definite, are flagged and interpolated.
    volume : {"auto", "cells", "moments"}
        Volume elements from metric cell lengths (1D) or from moment fitting.

    Returns
    -------
    MetricDensity
        ``density`` satisfies ``sum(density * volume) == 1``.
    """
    canon = gauge_fix(lsd)
    d = dim or (frames.dim if frames is not None else detect_dimension(lsd))
    if frames is None:
        frames = LocalFrames(canon, d)
    phi, lam = canon.phi_values, canon.eigenvalues
    modes = default_modes(canon, d) if modes is None else np.asarray(modes)
    n = canon.net_size
    h_u = np.zeros((n, d, d))
    a_u = np.zeros((n, d))
    cond = np.zeros(n)
    resid = np.zeros(n)
    for a in range(n):
        h_u[a], a_u[a], cond[a], resid[a] = _solve_point(frames, a, phi, lam, modes)
    flagged = (cond > cond_limit) | np.array([np.linalg.eigvalsh(h)[0] <= 0 for h in h_u])
    good = np.flatnonzero(~flagged)
    if len(good) == 0:
        raise ChartError("metric recovery failed at every net point")
    for a in np.flatnonzero(flagged):
        nb = [int(b) for b in frames.stencils[a, 1:] if not flagged[b]] or [int(good[0])]
        h_u[a] = np.mean([_frame_metric_at(frames, a, b, h_u) for b in nb], axis=0)
        a_u[a] = np.mean([a_u[b] for b in nb], axis=0)
    # d ln rho = h^{-1}(a - b),  b^j = |h|^{-1/2} d_k(|h|^{1/2} h^{jk})
    omega = np.zeros((n, d))
    for a in range(n):
        F = np.zeros((n, d, d))
        for b in frames.stencils[a]:
            hb = _frame_metric_at(frames, a, int(b), h_u)
            F[b] = hb / np.sqrt(np.linalg.det(hb))
        div = np.einsum("kjk->j", frames.gradient(a, F.reshape(n, d * d)).reshape(d, d, d))
        b_vec = div * np.sqrt(np.linalg.det(h_u[a]))
        omega[a] = np.linalg.solve(h_u[a], a_u[a] - b_vec)
    log_rho, misfit = _integrate(frames, omega, 2 * d)
    if volume == "auto":
        volume = "cells" if d == 1 else "moments"
    if volume == "cells":
        if d != 1:
            raise ChartError("cell volumes are implemented for one-dimensional nets")
        vol = _cell_lengths(frames, h_u)
        rho = np.exp(log_rho)
        rho /= np.sum(rho * vol)
        quad = rho * vol
    else:
        quad = moment_quadrature(canon)
        quad = quad / quad.sum()
        rho = np.exp(log_rho)
        vol = quad / rho
        rho /= np.sum(rho * vol)
    charts, xs, hx, ax, wx = [], [], [], [], []
    phi0 = float(np.mean(phi[:, 0]))
    for a in range(n):
        try:
            ch = select_chart(canon, a, frames=frames)
        except ChartError:
            ch = _fallback_chart(frames, a, phi, lam)
        charts.append(ch)
        idx = list(ch.indices)
        x = phi[:, idx] / phi0
        J = frames.gradient(a, x).T  # m x d
        Hx = frames.hessian(a, x)
        hx.append(J @ h_u[a] @ J.T)
        ax.append(J @ a_u[a] + np.einsum("ij,ijm->m", h_u[a], Hx))
        wx.append(np.linalg.solve(J.T, omega[a]))
        xs.append(x[a])
    return MetricDensity(
        dim=d, charts=charts, chart_coords=np.array(xs), metric=np.array(hx), drift=np.array(ax),
        dlog_density=np.array(wx), frame_metric=h_u, frame_drift=a_u, frame_dlog_density=omega,
        log_density=np.log(rho), density=rho, volume=vol, quadrature=quad, flagged=flagged,
        residuals=resid, modes_used=len(modes),
        meta={"condition": cond, "integration_misfit": misfit, "volume_method": volume},
    )


def _fallback_chart(frames: LocalFrames, a: int, phi: np.ndarray, lam: np.ndarray) -> Chart:
    from itertools import combinations

    pool = range(1, min(phi.shape[1], 12))
    best = max(combinations(pool, frames.dim), key=lambda idx: chart_score(frames, a, idx, phi, lam))
    return Chart(int(a), tuple(int(i) for i in best), chart_score(frames, a, best, phi, lam), 0, 0.0)
