"""Boundary-Control step: wave coefficients, influence projectors, slicing.

Wave fields are represented by their Fourier coefficients in the recovered
eigenbasis.  A source ``F`` supported on net points produces

    u_j(s) = int_0^s S_j(s - t') sum_alpha q_alpha F(alpha, t') phi_j(alpha) dt'

with ``S_j(tau) = sin(sqrt(lam_j) tau) / sqrt(lam_j)`` (``tau`` when
``lam_j = 0``) and quadrature weights ``q = rho_hat dV``.  All projectors are
assembled in the span of every recovered mode and reported on a leading
block.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .lsd import LocalSpectralData

DEFAULT_RANK_RTOL = 1e-8


class ProjectorError(ValueError):
    """Raised for invalid projector requests (empty sets, violated nesting)."""


def wave_kernel(lam: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """``sin(sqrt(lam) tau) / sqrt(lam)`` with the exact ``lam = 0`` limit ``tau``."""
    lam = np.asarray(lam, dtype=float)[:, None]
    tau = np.asarray(tau, dtype=float)[None, :]
    sq = np.sqrt(np.maximum(lam, 0.0))
    safe = np.where(sq > 0, sq, 1.0)
    return np.where(sq > 0, np.sin(sq * tau) / safe, tau)


def _gl_nodes(s: float, lam_max: float, minimum: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    n = max(minimum, int(2.0 * np.sqrt(max(lam_max, 0.0)) * s) + 48)
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * s * (x + 1.0), 0.5 * s * w


def time_profiles(kind: str, count: int, s: float, t: np.ndarray) -> np.ndarray:
    """Dictionary time profiles on ``(0, s)``, one row per profile.

    ``"fourier"`` gives ``1, cos(pi t/s), sin(pi t/s), cos(2 pi t/s), ...``;
    ``"gauss"`` gives Gaussian pulses of width ``s / count`` centred on a
    uniform grid.
    """
    if kind == "fourier":
        rows = [np.ones_like(t)]
        m = 1
        while len(rows) < count:
            rows.append(np.cos(m * np.pi * t / s))
            if len(rows) < count:
                rows.append(np.sin(m * np.pi * t / s))
            m += 1
        return np.array(rows[:count])
    if kind == "gauss":
        centres = np.linspace(0.0, s, count)
        width = s / count
        return np.exp(-((t[None, :] - centres[:, None]) ** 2) / (2 * width ** 2))
    raise ProjectorError(f"unknown time dictionary {kind!r}")


def wave_fourier_coefficients(lsd: LocalSpectralData, source: Union[np.ndarray, Callable],
                              t_eval: Sequence[float], quadrature: np.ndarray,
                              times: Optional[np.ndarray] = None, support: Optional[Sequence[int]] = None,
                              ) -> np.ndarray:
    """Fourier coefficients ``u_j(t)`` of the wave generated by a net source.

    Parameters
    ----------
    lsd : LocalSpectralData
    source : array (N, T) or callable
        Source values on the net at ``times`` (trapezoid rule in time), or a
        callable ``source(t) -> (N,)`` integrated by Gauss-Legendre rules.
    t_eval : sequence of float
        Evaluation times.
    quadrature : array (N,)
        Spatial weights ``rho_hat dV``.  Any positive multiple gives the same
        projectors; coefficients carry that unknown constant.
    support : sequence of int, optional
        Declared spatial support; sources nonzero elsewhere are rejected.

    Returns
    -------
    ndarray (len(t_eval), K)
    """
    lam = lsd.eigenvalues
    phi = lsd.phi_values
    q = np.asarray(quadrature, dtype=float)
    t_eval = np.atleast_1d(np.asarray(t_eval, dtype=float))
    if callable(source):
        out = np.zeros((len(t_eval), len(lam)))
        for i, s in enumerate(t_eval):
            if s <= 0:
                continue
            tp, wt = _gl_nodes(s, lam[-1])
            F = np.array([source(x) for x in tp]).T  # N x nodes
            _check_support(F, support)
            f = phi.T @ (q[:, None] * F)  # K x nodes
            out[i] = np.sum(wave_kernel(lam, s - tp) * f * wt, axis=1)
        return out
    F = np.asarray(source, dtype=float)
    if times is None:
        raise ProjectorError("sampled sources need their time grid")
    _check_support(F, support)
    times = np.asarray(times, dtype=float)
    f = phi.T @ (q[:, None] * F)  # K x T
    out = np.zeros((len(t_eval), len(lam)))
    for i, s in enumerate(t_eval):
        m = times <= s + 1e-15
        if m.sum() < 2:
            continue
        tt = times[m]
        vals = wave_kernel(lam, s - tt) * f[:, m]
        out[i] = np.trapezoid(vals, tt, axis=1)
    return out


def _check_support(F: np.ndarray, support: Optional[Sequence[int]]):
    if support is None:
        return
    mask = np.ones(F.shape[0], dtype=bool)
    mask[list(support)] = False
    if np.any(F[mask] != 0):
        raise ProjectorError("source escapes its declared support")


def dictionary_coefficients(lsd: LocalSpectralData, W: Sequence[int], s: float, quadrature: np.ndarray,
                            n_time: int, kind: str = "fourier") -> np.ndarray:
    """Coefficient matrix ``B`` (modes x dictionary) of point sources on ``W``."""
    lam = lsd.eigenvalues
    tp, wt = _gl_nodes(s, lam[-1])
    G = time_profiles(kind, n_time, s, tp)  # profiles x nodes
    C = (wave_kernel(lam, s - tp) * wt) @ G.T  # K x profiles
    W = list(W)
    amp = np.asarray(quadrature)[W][:, None] * lsd.phi_values[W]  # |W| x K
    return np.concatenate([amp[i][:, None] * C for i in range(len(W))], axis=1)


def orthonormal_span(B: np.ndarray, rank_rtol: float = DEFAULT_RANK_RTOL) -> Tuple[np.ndarray, dict]:
    """Orthonormal basis of ``span(B)`` by a rank-truncated Gram eigendecomposition."""
    if B.shape[1] == 0:
        return np.zeros((B.shape[0], 0)), {"rank": 0, "dictionary": 0, "gram_top": 0.0}
    G = B.T @ B
    ev, V = np.linalg.eigh(0.5 * (G + G.T))
    top = ev[-1]
    keep = ev > rank_rtol * top if top > 0 else np.zeros(len(ev), dtype=bool)
    A = B @ (V[:, keep] / np.sqrt(ev[keep]))
    # one re-orthonormalization pass removes rounding from tiny Gram eigenvalues
    if A.shape[1]:
        A, _ = np.linalg.qr(A)
    return A, {"rank": int(keep.sum()), "dictionary": int(B.shape[1]), "gram_top": float(top),
               "truncated": int((~keep).sum())}


@dataclass(frozen=True, eq=False)
class InfluenceProjector:
    """Projector onto waves generated from ``W`` up to time ``s``.

    ``full`` is the projector on all recovered modes; ``matrix`` its leading
    ``cutoff x cutoff`` block.
    """

    matrix: np.ndarray
    full: np.ndarray
    source_set: Tuple[int, ...]
    time: float
    cutoff: int
    report: dict = field(default_factory=dict)

    @property
    def idempotence_defect(self) -> float:
        M = self.matrix
        return float(np.linalg.norm(M @ M - M, 2))

    @property
    def symmetry_defect(self) -> float:
        return float(np.max(np.abs(self.matrix - self.matrix.T)))

    @property
    def measure(self) -> float:
        """Estimate of the normalized measure of the domain of influence."""
        return float(self.full[0, 0])

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.full @ v


def influence_projector(lsd: LocalSpectralData, W: Sequence[int], s: float, K: int,
                        quadrature: np.ndarray, n_time: Optional[int] = None, kind: str = "fourier",
                        rank_rtol: float = DEFAULT_RANK_RTOL) -> InfluenceProjector:
    """Build ``M_(W,s)`` from point sources on ``W`` with a time dictionary.

    Parameters
    ----------
    lsd : LocalSpectralData
    W : sequence of int
        Nonempty set of net indices.
    s : float
        Time (equals the radius of the domain of influence).
    K : int
        Size of the reported block (``<= lsd.mode_count``).
    quadrature : array
        Spatial weights; the projector does not depend on their overall scale.
    n_time : int, optional
        Time profiles per point (default ``2 K``).
    kind : {"fourier", "gauss"}
    rank_rtol : float
        Relative Gram eigenvalue cut.
    """
    W = tuple(int(w) for w in W)
    if not W:
        raise ProjectorError("source set must be nonempty")
    if s < 0:
        raise ProjectorError("time must be nonnegative")
    Kall = lsd.mode_count
    if K > Kall:
        raise ProjectorError(f"cutoff {K} exceeds the {Kall} recovered modes")
    n_time = 2 * K if n_time is None else n_time
    if s == 0:
        full = np.zeros((Kall, Kall))
        rep = {"rank": 0, "dictionary": 0, "gram_top": 0.0, "truncated": 0}
    else:
        B = dictionary_coefficients(lsd, W, s, quadrature, n_time, kind)
        A, rep = orthonormal_span(B, rank_rtol)
        full = A @ A.T
        full = 0.5 * (full + full.T)
    rep = dict(rep, kind=kind, n_time=n_time, rank_rtol=rank_rtol, modes=Kall)
    return InfluenceProjector(full[:K, :K].copy(), full, W, float(s), int(K), rep)


class BallProjections:
    """Cached vectors ``M_({z}, s) e_0`` for every net point on a time grid.

    ``measure(a, i)`` estimates the measure of the ball ``B(z_a, s_i)``;
    ``overlap(a, i, b, j)`` that of ``B(z_a, s_i) & B(z_b, s_j)``.
    """

    def __init__(self, lsd: LocalSpectralData, quadrature: np.ndarray, s_grid: Sequence[float],
                 n_time: int = 30, kind: str = "fourier", rank_rtol: float = DEFAULT_RANK_RTOL,
                 points: Optional[Sequence[int]] = None):
        self.lsd = lsd
        self.s_grid = np.asarray(s_grid, dtype=float)
        self.points = np.arange(lsd.net_size) if points is None else np.asarray(points)
        n, ns, K = lsd.net_size, len(self.s_grid), lsd.mode_count
        self.vectors = np.zeros((n, ns, K))
        self.ranks = np.zeros((n, ns), dtype=np.int64)
        lam = lsd.eigenvalues
        amp = np.asarray(quadrature)[:, None] * lsd.phi_values  # N x K
        for i, s in enumerate(self.s_grid):
            if s <= 0:
                continue
            tp, wt = _gl_nodes(s, lam[-1])
            C = (wave_kernel(lam, s - tp) * wt) @ time_profiles(kind, n_time, s, tp).T  # K x m
            for a in self.points:
                A, rep = orthonormal_span(amp[a][:, None] * C, rank_rtol)
                self.vectors[a, i] = A @ A[0]
                self.ranks[a, i] = rep["rank"]

    def index(self, s: float) -> int:
        return int(np.argmin(np.abs(self.s_grid - s)))

    def measure(self, a: int, i: int) -> float:
        return float(self.vectors[a, i, 0])

    def overlap(self, a: int, i: int, b: int, j: int) -> float:
        return float(self.vectors[a, i] @ self.vectors[b, j])


def slicing_inner_products(factors: Sequence[Tuple[InfluenceProjector, InfluenceProjector]],
                           j: int = 0, l: int = 0, oracle: Optional[Callable] = None) -> Dict:
    """Entry ``(j, l)`` of the projector-built ``P chi_I P`` for ``I = cap (X_outer \\ X_inner)``.

    Each factor is ``(outer, inner)``; the difference ``outer - inner`` is a
    projector when the sets are nested.  Factors are composed as a
    symmetrized product in the span of all recovered modes.

    Parameters
    ----------
    oracle : callable, optional
        ``oracle(outer, inner) -> bool`` confirming nesting on the forward
        side; a ``False`` answer raises :class:`ProjectorError`.

    Returns
    -------
    dict with ``value``, ``matrix`` (full), ``commutators`` (pairwise norms).
    """
    if not factors:
        raise ProjectorError("at least one factor is required")
    Ds = []
    for outer, inner in factors:
        if oracle is not None and not oracle(outer, inner):
            raise ProjectorError(f"nesting violated: X({inner.source_set}, {inner.time}) "
                                 f"not inside X({outer.source_set}, {outer.time})")
        Ds.append(outer.full - (inner.full if inner is not None else 0.0))
    T = Ds[0]
    for D in Ds[1:]:
        T = T @ D
    T = 0.5 * (T + T.T)
    comm = [float(np.linalg.norm(Ds[a] @ Ds[b] - Ds[b] @ Ds[a], 2))
            for a in range(len(Ds)) for b in range(a + 1, len(Ds))]
    return {"value": float(T[j, l]), "matrix": T, "commutators": comm}
