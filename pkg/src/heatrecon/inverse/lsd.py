"""Local spectral data and its identification from heat data.

The heat tensor satisfies ``H(t) = Phi diag(exp(-lam t)) Phi^T`` on the net,
so two time slices form a symmetric matrix pencil.  Whitening by ``H(t1)``
turns the pencil into an ordinary symmetric eigenproblem whose eigenvalues
are ``exp(-lam (t2 - t1))`` and whose eigenvectors give ``Phi`` on the net.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

from ..phd import PointHeatData

CLUSTER_RTOL = 1e-4
RANK_GAP = 1e3


class FitError(RuntimeError):
    """Raised when no part of the spectrum can be identified."""


@dataclass(frozen=True, eq=False)
class LocalSpectralData:
    """Recovered eigenvalues and eigenfunction values on the net.

    ``clusters`` records the eigenspace partition of the mode columns: each
    entry is the column range of one eigenspace, inside which the columns of
    ``phi_values`` are defined only up to an orthogonal rotation.
    """

    omega: np.ndarray
    eigenvalues: np.ndarray
    phi_values: np.ndarray
    clusters: tuple
    dim_estimate: Optional[int] = None
    c0_known: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("omega", "eigenvalues", "phi_values"):
            arr = np.array(getattr(self, name), dtype=float if name != "omega" else np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "clusters", tuple(tuple(int(i) for i in c) for c in self.clusters))

    @property
    def mode_count(self) -> int:
        return int(len(self.eigenvalues))

    @property
    def net_size(self) -> int:
        return int(self.phi_values.shape[0])

    @property
    def multiplicities(self) -> np.ndarray:
        return np.array([len(c) for c in self.clusters], dtype=np.int64)

    @property
    def cluster_values(self) -> np.ndarray:
        return np.array([self.eigenvalues[list(c)].mean() for c in self.clusters])

    def residue(self, cluster: int) -> np.ndarray:
        """Residue matrix of one eigenspace on the net."""
        cols = list(self.clusters[cluster])
        P = self.phi_values[:, cols]
        return P @ P.T

    def heat(self, t: float) -> np.ndarray:
        """Heat matrix on the net synthesized from the recovered modes."""
        return (self.phi_values * np.exp(-self.eigenvalues * t)) @ self.phi_values.T

    def truncated(self, k: int) -> "LocalSpectralData":
        """Keep the leading ``k`` modes, rounded down to whole eigenspaces."""
        keep = [c for c in self.clusters if max(c) < k]
        n = sum(len(c) for c in keep)
        return replace(self, eigenvalues=self.eigenvalues[:n], phi_values=self.phi_values[:, :n],
                       clusters=tuple(keep))

    def rotated(self, rotations: Sequence[np.ndarray]) -> "LocalSpectralData":
        """Apply one orthogonal matrix per eigenspace (a gauge change)."""
        phi = np.array(self.phi_values)
        for c, O in zip(self.clusters, rotations):
            cols = list(c)
            phi[:, cols] = phi[:, cols] @ O
        return replace(self, phi_values=phi)

    def random_gauge(self, seed: int) -> "LocalSpectralData":
        rng = np.random.default_rng(seed)
        rots = []
        for c in self.clusters:
            q, r = np.linalg.qr(rng.standard_normal((len(c), len(c))))
            rots.append(q * np.sign(np.diag(r)))
        return self.rotated(rots)

    def scaled(self, factor: float) -> "LocalSpectralData":
        return replace(self, phi_values=self.phi_values * factor)

    def to_dict(self) -> dict:
        return {
            "omega": self.omega.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "phi_values": self.phi_values.tolist(),
            "clusters": [list(c) for c in self.clusters],
            "dim_estimate": self.dim_estimate,
            "c0_known": self.c0_known,
        }


@dataclass
class FitReport:
    """Diagnostics of a spectral fit; ``truncated`` marks a partial spectrum."""

    modes: int
    clusters: int
    whitening_rank: int
    condition: float
    pencil_times: tuple
    truncated: bool
    reason: str
    consistency: np.ndarray
    residual: float
    refined: int = 0
    residues_psd: bool = True

    def to_dict(self) -> dict:
        return {
            "modes": self.modes,
            "clusters": self.clusters,
            "whitening_rank": self.whitening_rank,
            "condition": self.condition,
            "pencil_times": list(self.pencil_times),
            "truncated": self.truncated,
            "reason": self.reason,
            "max_consistency": float(np.max(self.consistency)) if len(self.consistency) else 0.0,
            "residual": self.residual,
            "refined": self.refined,
        }


def cluster_modes(values: np.ndarray, rtol: float = CLUSTER_RTOL,
                  uncertainty: Optional[np.ndarray] = None) -> List[List[int]]:
    """Group sorted values whose relative gap is below ``rtol``.

    ``uncertainty`` (per value) widens the merge window for noisy estimates.
    """
    if uncertainty is None:
        uncertainty = np.zeros(len(values))
    groups: List[List[int]] = [[0]] if len(values) else []
    for i in range(1, len(values)):
        prev = values[groups[-1]].mean()
        slack = 3.0 * (uncertainty[i] + uncertainty[groups[-1][-1]])
        if abs(values[i] - prev) <= rtol * max(abs(prev), 1.0) + slack:
            groups[-1].append(i)
        else:
            groups.append([i])
    return groups


def _pencil(H1: np.ndarray, H2: np.ndarray, dt: float, t1: float, floor: float):
    ev, U = np.linalg.eigh(0.5 * (H1 + H1.T))
    keep = ev > floor
    U, ev = U[:, keep], ev[keep]
    Wh = U / np.sqrt(ev)
    Mz = Wh.T @ (0.5 * (H2 + H2.T)) @ Wh
    z, V = np.linalg.eigh(0.5 * (Mz + Mz.T))
    order = np.argsort(-z)
    z, V = z[order], V[:, order]
    valid = z > 0
    lam = np.full(len(z), np.inf)
    lam[valid] = -np.log(z[valid]) / dt
    phi = (H1 @ (Wh @ V)) * np.exp(np.where(valid, lam, 0.0) * t1 / 2)
    return lam, phi, valid, ev


def _noise_floor(n: int, noise: float) -> float:
    # spectral norm of a symmetric n x n matrix with iid U(-noise, noise) entries
    return 2.0 * np.sqrt(n / 3.0) * noise


def _refine(data: PointHeatData, lam: np.ndarray, phi: np.ndarray, clusters, n_ref: int):
    """Separable least squares on shared exponents of the leading eigenspaces."""
    n, _, nt = data.values.shape
    t = data.times
    iu = np.triu_indices(n)
    Y = data.values[iu[0], iu[1], :]  # channels x times
    cols_hi = [i for c in clusters[n_ref:] for i in c]
    if cols_hi:
        P = phi[:, cols_hi]
        prod = P[iu[0]] * P[iu[1]]
        Y = Y - prod @ np.exp(-np.outer(lam[cols_hi], t))
    U, s, Vt = np.linalg.svd(Y, full_matrices=False)
    r = max(int(np.sum(s > s[0] * 1e-12)), n_ref)
    Yr = (s[:r, None] * Vt[:r]).T  # times x r

    def resid(x):
        E = np.exp(-np.outer(t, np.concatenate([[0.0], np.exp(x)])))
        C, *_ = np.linalg.lstsq(E, Yr, rcond=None)
        return (E @ C - Yr).ravel()

    lam_c = np.array([lam[list(c)].mean() for c in clusters[:n_ref]])
    x0 = np.log(np.maximum(lam_c[1:], 1e-12))
    base = 0.5 * np.sum(resid(x0) ** 2)
    sol = least_squares(resid, x0, method="lm", xtol=1e-14, ftol=1e-14, max_nfev=200 * (len(x0) + 1))
    if not sol.success or sol.cost >= base:
        return None
    new_lam = np.concatenate([[0.0], np.exp(sol.x)])
    E = np.exp(-np.outer(t, new_lam))
    C, *_ = np.linalg.lstsq(E, Yr, rcond=None)
    full = (U[:, :r] @ C.T)  # channels x clusters
    out_phi = phi.copy()
    out_lam = lam.copy()
    for k, c in enumerate(clusters[:n_ref]):
        R = np.zeros((n, n))
        R[iu] = full[:, k]
        R = R + np.triu(R, 1).T
        w, V = np.linalg.eigh(R)
        top = np.argsort(-w)[: len(c)]
        out_phi[:, list(c)] = V[:, top] * np.sqrt(np.maximum(w[top], 0.0))
        out_lam[list(c)] = new_lam[k]
    return out_lam, out_phi


def _pencil_prefix(data: PointHeatData, j2: int, j3: int, floor: float, noise_norm: float,
                   consistency_tol: float) -> Optional[dict]:
    t = data.times
    H1, H2, H3 = (np.asarray(data.values[:, :, i]) for i in (0, j2, j3))
    dt2, dt3 = t[j2] - t[0], t[j3] - t[0]
    lam, phi, valid, ev = _pencil(H1, H2, dt2, t[0], floor)
    lam3, _, valid3, _ = _pencil(H1, H3, dt3, t[0], floor)
    if not np.any(valid):
        return None
    order = np.argsort(lam)
    lam, phi = lam[order], phi[:, order]
    lam3 = np.sort(np.where(valid3, lam3, np.inf))
    m = min(len(lam), len(lam3))
    lam, phi, lam3 = lam[:m], phi[:, :m], lam3[:m]
    scale = np.maximum(np.abs(lam), 1.0)
    with np.errstate(over="ignore", invalid="ignore"):
        # first-order exponent uncertainty from the noise level
        energy = np.exp(-lam * t[0]) * np.sum(phi ** 2, axis=0)
        sigma = noise_norm / np.maximum(energy, 1e-300) * (np.exp(lam * dt2) / dt2 + np.exp(lam * dt3) / dt3)
        sigma = np.where(np.isfinite(sigma), sigma, np.inf)
        gap = np.abs(lam - lam3)
        consistency = np.where(np.isfinite(gap), gap / scale, np.inf)
        ok = np.isfinite(lam) & (gap <= consistency_tol * scale + 3.0 * sigma) & (sigma <= 0.1 * scale)
    bad = np.flatnonzero(~ok)
    prefix = int(bad[0]) if len(bad) else m
    reason = "" if not len(bad) else f"pencil inconsistency {consistency[prefix]:.2e} at mode {prefix}"
    return {"lam": lam, "phi": phi, "sigma": sigma, "prefix": prefix, "m": m, "ev": ev,
            "consistency": consistency, "reason": reason, "pair": (j2, j3)}


def fit_spectral_data(data: PointHeatData, k_max: Optional[int] = None, consistency_tol: float = 1e-3,
                      floor_rtol: float = 1e-13, refine: bool = False,
                      cluster_rtol: float = CLUSTER_RTOL) -> LocalSpectralData:
    """Identify eigenvalues and eigenfunction values on the net.

    Parameters
    ----------
    data : PointHeatData
        Heat tensor with at least three distinct times.
    k_max : int, optional
        Mode budget.  The result may be shorter (see the report).
    consistency_tol : float
        Modes whose exponent differs by more than this (relative, plus a
        noise allowance) between two pencils of different shift end the
        resolvable prefix.
    floor_rtol : float
        Relative whitening floor; an absolute floor from ``data.noise`` is
        added automatically.
    refine : bool, optional
        Polish the leading eigenspaces by separable least squares over all
        times; kept only if the residual drops and the ordering survives.

    Returns
    -------
    LocalSpectralData
        ``meta["report"]`` holds a :class:`FitReport`.
    """
    if data.time_count < 3:
        raise FitError("at least three time samples are required")
    t = data.times
    n = data.net_size
    noise_norm = _noise_floor(n, data.noise)
    top = np.linalg.eigvalsh(0.5 * (data.values[:, :, 0] + data.values[:, :, 0].T))[-1]
    floor = max(floor_rtol * top, 3.0 * noise_norm)
    # longer pencil shifts average out noise at the cost of high modes
    shifts = t - t[0]
    if data.noise > 0:
        targets = np.geomspace(shifts[1], max(1.0, shifts[1]), 7)
    else:
        targets = shifts[1:2]
    best = None
    for j2 in sorted({int(min(np.searchsorted(shifts, x * (1 - 1e-9)), len(t) - 2)) for x in targets}):
        j3 = int(min(np.searchsorted(shifts, 2 * shifts[j2] * (1 - 1e-9)), len(t) - 1))
        cand = _pencil_prefix(data, j2, max(j3, j2 + 1), floor, noise_norm, consistency_tol)
        if cand is not None and (best is None or cand["prefix"] >= best["prefix"]):
            best = cand
    if best is None:
        raise FitError("pencil produced no admissible exponent")
    lam, phi, sigma, prefix, m = best["lam"], best["phi"], best["sigma"], best["prefix"], best["m"]
    ev, consistency, reason, (j2, j3) = best["ev"], best["consistency"], best["reason"], best["pair"]
    if k_max is not None and k_max < prefix:
        prefix = int(k_max)
        reason = reason or "mode budget"
    if prefix == 0:
        raise FitError(f"no resolvable mode at noise level {data.noise:g} ({reason})")
    lam, phi, sigma = lam[:prefix], phi[:, :prefix], sigma[:prefix]
    lam[0] = max(lam[0], 0.0)
    # the ground state is simple on a connected space
    groups = [[0]] + [[i + 1 for i in g] for g in cluster_modes(lam[1:], cluster_rtol, sigma[1:])]
    # eigenspaces must be complete: drop a trailing cluster that may be cut
    if prefix < m and len(groups) > 1:
        groups = groups[:-1]
        reason = reason or "incomplete trailing eigenspace"
    ncols = sum(len(g) for g in groups)
    lam, phi = lam[:ncols].copy(), phi[:, :ncols].copy()
    for g in groups:
        lam[g] = lam[g].mean()
    if abs(lam[0]) > 1e-6 * max(1.0, lam[min(1, len(lam) - 1)]) + 3.0 * sigma[0]:
        reason = (reason + "; " if reason else "") + "ground state not simple"
    lam[groups[0]] = 0.0
    if phi[:, 0].sum() < 0:
        phi[:, 0] *= -1
    refined = 0
    if refine and len(groups) > 2:
        n_ref = min(len(groups), 8)
        out = _refine(data, lam, phi, groups, n_ref)
        if out is not None and np.all(np.diff(out[0]) >= 0):
            lam, phi = out
            refined = n_ref
            if phi[:, 0].sum() < 0:
                phi[:, 0] *= -1
    synth = np.einsum("ak,bk,kt->abt", phi, phi, np.exp(-np.outer(lam, t)), optimize=True)
    residual = float(np.max(np.abs(synth - data.values)))
    report = FitReport(
        modes=ncols,
        clusters=len(groups),
        whitening_rank=int(len(ev)),
        condition=float(ev.max() / ev.min()),
        pencil_times=(float(t[0]), float(t[j2]), float(t[j3])),
        truncated=bool(reason),
        reason=reason,
        consistency=consistency[:ncols],
        residual=residual,
        refined=refined,
    )
    return LocalSpectralData(
        omega=np.arange(n),
        eigenvalues=lam,
        phi_values=phi,
        clusters=tuple(groups),
        meta={"report": report, "delta": data.delta, "noise": data.noise},
    )


def exact_spectral_data(spec, net: np.ndarray, k: Optional[int] = None) -> LocalSpectralData:
    """Forward-side eigenpairs restricted to a net, in the same container.

    Used as an oracle and to isolate later pipeline stages from fit error.
    """
    from ..spectral import cluster_eigenvalues

    k = spec.mode_count if k is None else min(int(k), spec.mode_count)
    lam = np.array(spec.eigenvalues[:k])
    groups = [list(g) for g in cluster_eigenvalues(lam, 1e-6)]
    if k < spec.mode_count and abs(spec.eigenvalues[k] - lam[-1]) <= 1e-6 * lam[-1]:
        groups = groups[:-1]
    ncols = sum(len(g) for g in groups)
    lam = lam[:ncols]
    lam[0] = 0.0
    return LocalSpectralData(
        omega=np.arange(len(net)),
        eigenvalues=lam,
        phi_values=np.array(spec.eigenvectors[np.asarray(net)][:, :ncols]),
        clusters=tuple(groups),
        meta={"exact": True},
    )
