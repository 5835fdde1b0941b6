"""Weighted Laplacian, its eigenpairs, and the heat kernel by spectral expansion."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse.linalg import eigsh

from .space import DiscreteSpace

DENSE_LIMIT = 1024
CLUSTER_RTOL = 1e-6


class EigensolverError(RuntimeError):
    """Raised when the eigensolver fails to produce accurate eigenpairs."""


def assemble_weighted_laplacian(space: DiscreteSpace):
    """Stiffness matrix and diagonal mass of the weighted Laplacian.

    Returns ``(K, w)`` with ``K`` sparse symmetric positive semidefinite and
    zero row sums, and ``w`` the vertex masses; the operator acting on vertex
    functions is ``L = diag(w)^-1 K`` (the nonnegative Laplacian ``-Delta``).
    """
    n = space.vertex_count
    keep = space.stiffness > 0
    i, j = space.edges[keep, 0], space.edges[keep, 1]
    s = space.stiffness[keep]
    if np.any(i == j):
        raise EigensolverError("self-loop with stiffness")
    off = sparse.coo_matrix((np.r_[-s, -s], (np.r_[i, j], np.r_[j, i])), shape=(n, n)).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    K = (off + sparse.diags(diag)).tocsr()
    w = np.asarray(space.weights, dtype=float)
    regular = ~space.singular_flags
    if np.any(w[regular] <= 0):
        raise EigensolverError("degenerate mass at a regular vertex")
    return K, w


def laplacian_operator(space: DiscreteSpace) -> sparse.csr_matrix:
    """The (non-symmetric) matrix ``diag(w)^-1 K`` acting on vertex values."""
    K, w = assemble_weighted_laplacian(space)
    return sparse.diags(1.0 / w) @ K


@dataclass(frozen=True, eq=False)
class SpectralData:
    """Eigenvalues and mass-orthonormal eigenvectors of a weighted Laplacian.

    Column ``p`` of :attr:`eigenvectors` samples ``phi_p`` at every vertex;
    ``sum_i w_i phi_j(i) phi_k(i) = delta_jk``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    weights: np.ndarray
    source_space: Optional[DiscreteSpace] = None
    residual: float = 0.0
    method: str = "dense"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("eigenvalues", "eigenvectors", "weights"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def mode_count(self) -> int:
        return int(self.eigenvalues.shape[0])

    @property
    def vertex_count(self) -> int:
        return int(self.eigenvectors.shape[0])

    @property
    def time_floor(self) -> float:
        """Smallest time at which the discrete heat kernel is considered mesh-resolved."""
        if self.source_space is None:
            return 0.0
        return self.source_space.spacing**2

    def cutoff_index(self, energy: Optional[float]) -> int:
        """Number of modes with eigenvalue strictly below ``energy``."""
        if energy is None:
            return self.mode_count
        return int(np.searchsorted(self.eigenvalues, energy, side="left"))

    def heat_matrix(self, t: float, rows=None, cols=None, energy: Optional[float] = None) -> np.ndarray:
        """Heat kernel block ``H(rows, cols, t)`` truncated to ``lambda < energy``."""
        if not t > 0:
            raise ValueError("heat kernel needs t > 0")
        if t < self.time_floor:
            warnings.warn(f"t={t:g} is below the mesh-resolved time floor {self.time_floor:g}",
                          stacklevel=2)
        k = self.cutoff_index(energy)
        phi = self.eigenvectors[:, :k]
        a = phi if rows is None else phi[rows]
        b = phi if cols is None else phi[cols]
        decay = np.exp(-self.eigenvalues[:k] * t)
        return (a * decay) @ b.T

    def clusters(self, rtol: float = CLUSTER_RTOL) -> list[np.ndarray]:
        """Group mode indices into numerical eigenspaces."""
        return cluster_eigenvalues(self.eigenvalues, rtol)

    def to_dict(self) -> dict:
        return {
            "eigenvalues": self.eigenvalues.tolist(),
            "shape": list(self.eigenvectors.shape),
            "eigenvectors": self.eigenvectors.ravel(order="C").tolist(),
            "weights": self.weights.tolist(),
            "residual": float(self.residual),
            "method": self.method,
            "tolerances": {"orthonormality": 1e-8, "ground_state": 1e-9,
                           "cluster_rtol": CLUSTER_RTOL},
        }

    @classmethod
    def from_dict(cls, data: dict, space: Optional[DiscreteSpace] = None) -> "SpectralData":
        shape = tuple(data["shape"])
        return cls(
            eigenvalues=np.asarray(data["eigenvalues"], dtype=float),
            eigenvectors=np.asarray(data["eigenvectors"], dtype=float).reshape(shape, order="C"),
            weights=np.asarray(data["weights"], dtype=float),
            source_space=space,
            residual=float(data.get("residual", 0.0)),
            method=data.get("method", "dense"),
        )


def cluster_eigenvalues(values: Sequence[float], rtol: float) -> list[np.ndarray]:
    values = np.asarray(values, dtype=float)
    groups, start = [], 0
    scale = max(float(np.max(np.abs(values))) if len(values) else 1.0, 1e-300)
    for p in range(1, len(values) + 1):
        if p == len(values) or values[p] - values[p - 1] > rtol * max(abs(values[p]), 1e-12 * scale):
            groups.append(np.arange(start, p))
            start = p
    return groups


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    # deterministic sign: largest-magnitude entry positive
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def eigendecompose(K, w, k: int, method: str = "auto", seed: int = 0,
                   space: Optional[DiscreteSpace] = None, tol: float = 1e-8) -> SpectralData:
    """Lowest ``k`` eigenpairs of ``K phi = lambda diag(w) phi``.

    ``method`` is ``"dense"``, ``"shift-invert"`` or ``"auto"`` (dense up to
    ``DENSE_LIMIT`` vertices).  The iterative path starts from a seeded vector
    so results are reproducible.
    """
    n = K.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"requested {k} modes from {n} vertices")
    if method == "auto":
        method = "dense" if n <= DENSE_LIMIT or k > n // 2 else "shift-invert"
    if method == "dense":
        Kd = K.toarray() if sparse.issparse(K) else np.asarray(K)
        vals, vecs = scipy.linalg.eigh(Kd, np.diag(w), subset_by_index=[0, k - 1])
    elif method == "shift-invert":
        rng = np.random.default_rng(seed)
        scale = abs(K.diagonal()).max() / max(w.max(), 1e-300)
        sigma = -1e-6 * scale
        vals, vecs = eigsh(sparse.csc_matrix(K), k=k, M=sparse.diags(w).tocsc(), sigma=sigma,
                           which="LM", v0=rng.standard_normal(n), tol=1e-12)
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
        # re-orthonormalize inside numerical clusters
        for grp in cluster_eigenvalues(vals, CLUSTER_RTOL):
            if len(grp) > 1:
                sub = vecs[:, grp]
                g = sub.T @ (w[:, None] * sub)
                c = np.linalg.cholesky(g)
                vecs[:, grp] = np.linalg.solve(c, sub.T).T
    else:
        raise ValueError(f"unknown eigensolver method {method!r}")
    vals = np.maximum(vals, 0.0)
    vecs = _fix_signs(vecs)
    resid = np.abs(K @ vecs - (w[:, None] * vecs) * vals).max() / max(1.0, vals.max() * w.max())
    if not np.isfinite(resid) or resid > tol:
        raise EigensolverError(f"eigensolver residual {resid:.3e} exceeds {tol:.1e}")
    return SpectralData(vals, vecs, w, source_space=space, residual=float(resid), method=method)


def solve_space(space: DiscreteSpace, k: Optional[int] = None, method: str = "auto", seed: int = 0) -> SpectralData:
    """Assemble and eigendecompose in one call (all modes when ``k`` is None)."""
    K, w = assemble_weighted_laplacian(space)
    return eigendecompose(K, w, k or space.vertex_count, method=method, seed=seed, space=space)


def heat_kernel(spec: SpectralData, i: int, j: int, t: float, energy: Optional[float] = None) -> float:
    """``sum_{lambda_p < E} exp(-lambda_p t) phi_p(i) phi_p(j)``."""
    if not t > 0:
        raise ValueError("heat kernel needs t > 0")
    k = spec.cutoff_index(energy)
    phi = spec.eigenvectors
    terms = np.exp(-spec.eigenvalues[:k] * t) * (phi[i, :k] * phi[j, :k])  # exact symmetry in (i, j)
    return float(np.sum(terms))


def eigenfunction_growth(spec: SpectralData) -> dict:
    """Fit ``max_i |phi_p(i)| <= C_F (1 + lambda_p^2)^(s_F / 2)`` over the computed modes."""
    sup = np.abs(spec.eigenvectors).max(axis=0)
    x = 0.5 * np.log1p(spec.eigenvalues**2)
    y = np.log(sup)
    if np.ptp(x) > 0:
        s_f = max(float(np.polyfit(x, y, 1)[0]), 0.0)
    else:
        s_f = 0.0
    c_f = float(np.max(sup / np.exp(s_f * x)))
    envelope = c_f * np.exp(s_f * x)
    return {"C_F": c_f, "s_F": s_f, "sup_norms": sup, "envelope": envelope,
            "holds": bool(np.all(sup <= envelope * (1 + 1e-12)))}


@dataclass
class TailReport:
    energies: np.ndarray
    times: np.ndarray
    tails: np.ndarray  # shape (len(energies), len(times))
    envelope: np.ndarray
    amplitude: float
    exponent: float
    sigma: float
    holds: bool


def _tail(spec: SpectralData, energy: float, t: float, pts: np.ndarray) -> float:
    k = spec.cutoff_index(energy)
    phi = np.abs(spec.eigenvectors[pts, k:])
    decay = np.exp(-spec.eigenvalues[k:] * t)
    if phi.shape[1] == 0:
        return 0.0
    # max over sampled (i, j) of sum_p decay_p |phi_p(i)| |phi_p(j)|
    return float(np.max((phi * decay) @ phi.T))


def truncation_tail(spec: SpectralData, energy: float, t: float, points: Optional[np.ndarray] = None,
                    max_points: int = 64) -> float:
    """Exact discrete tail ``sum_{lambda_p >= E} e^{-lambda_p t} |phi_p(i) phi_p(j)|``, maximized over sampled pairs."""
    if not t > 0:
        raise ValueError("t must be positive")
    pts = _sample_points(spec, points, max_points)
    return _tail(spec, energy, t, pts)


def _sample_points(spec, points, max_points):
    if points is not None:
        return np.asarray(points)
    n = spec.vertex_count
    return np.unique(np.linspace(0, n - 1, min(n, max_points)).round().astype(int))


def tail_envelope(spec: SpectralData, energies: Sequence[float], times: Sequence[float],
                  sigma: float = 0.5, dim: Optional[int] = None, points=None,
                  calibration: Optional[tuple] = None, margin: float = 1.25) -> TailReport:
    """Compare the truncation tail with an envelope ``A (1 + t^-beta) exp(-(1 - sigma) E t)``.

    ``beta = d/2 + 2 s_F`` uses the fitted eigenfunction growth exponent.  The
    amplitude ``A`` is calibrated on ``calibration = (energies, times)`` (the
    lower edges of the test grid by default) and then checked on the full grid.
    """
    pts = _sample_points(spec, points, 64)
    energies = np.asarray(energies, dtype=float)
    times = np.asarray(times, dtype=float)
    if dim is None:
        dim = spec.source_space.dim if spec.source_space is not None else 1
    beta = dim / 2 + 2 * eigenfunction_growth(spec)["s_F"]

    def shape(e, t):
        return (1 + t ** (-beta)) * np.exp(-(1 - sigma) * e * t)

    if calibration is None:
        cal = [(energies[0], t) for t in times] + [(e, times[0]) for e in energies]
    else:
        cal = [(e, t) for e in calibration[0] for t in calibration[1]]
    ratios = [_tail(spec, e, t, pts) / shape(e, t) for e, t in cal]
    amp = margin * max(max(ratios), 1e-300)
    tails = np.array([[_tail(spec, e, t, pts) for t in times] for e in energies])
    env = np.array([[amp * shape(e, t) for t in times] for e in energies])
    return TailReport(energies, times, tails, env, float(amp), float(beta), sigma,
                      bool(np.all(tails <= env)))


def counting_function(values: np.ndarray, energy: float) -> int:
    return int(np.sum(np.asarray(values) < energy))


def weyl_check(spec: SpectralData, dim: Optional[int] = None) -> dict:
    """Fit ``lambda_p >= c p^(2/d)`` and ``N(E) <= 1 + C E^(d/2)`` over the computed modes."""
    if spec.mode_count < 10:
        raise ValueError("weyl_check needs at least 10 modes")
    if dim is None:
        dim = spec.source_space.dim if spec.source_space is not None else 1
    lam = spec.eigenvalues
    p = np.arange(1, spec.mode_count)
    c = float(np.min(lam[1:] / p ** (2.0 / dim)))
    # N(E) jumps at eigenvalues; the sup of (N(E)-1)/E^(d/2) is reached right after a jump
    energies = lam[1:] * (1 + 1e-12)
    counts = np.array([counting_function(lam, e) for e in energies])
    big_c = float(np.max((counts - 1) / energies ** (dim / 2)))
    return {"c": c, "positive": c > 0, "C": big_c, "dim": dim,
            "counts": counts, "energies": energies,
            "counting_bound_holds": bool(np.all(counts <= 1 + big_c * energies ** (dim / 2) + 1e-9))}
