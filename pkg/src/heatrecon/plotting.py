"""Static figures for the CLI reports (matplotlib, Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "figure.figsize": (5.0, 3.6),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.frameon": False,
    "svg.hashsalt": "heatrecon",
}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else {"Date": None})
    plt.close(fig)
    return path


def plot_spectrum(eigenvalues: np.ndarray, path: Path, dim: int = 1) -> Path:
    """Eigenvalues against mode index with the Weyl-type reference ``p^(2/d)``."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        p = np.arange(len(eigenvalues))
        ax.plot(p, eigenvalues, ".", ms=3, label=r"$\lambda_p$")
        c = np.min(eigenvalues[1:] / p[1:] ** (2.0 / dim)) if len(p) > 1 else 1.0
        ax.plot(p, c * p ** (2.0 / dim), "-", lw=0.8, label=rf"${c:.3g}\,p^{{2/{dim}}}$")
        ax.set_xlabel("mode index $p$")
        ax.set_ylabel("eigenvalue")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_collapse(sigma: Sequence[float], discrepancy: Sequence[float], mgh: Sequence[float],
                  path: Path) -> Path:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.loglog(sigma, discrepancy, "o-", label="heat-data discrepancy")
        ax.loglog(sigma, mgh, "s--", label=r"$\hat d_{mGH}$ to limit")
        ax.set_xlabel(r"warp $\sigma$")
        ax.invert_xaxis()
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_stability(noise: Sequence[float], mgh: Sequence[float], seeds: Sequence[int], path: Path) -> Path:
    noise, mgh, seeds = map(np.asarray, (noise, mgh, seeds))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        levels = np.unique(noise)
        # zero noise sits at the left edge of the symlog axis
        for s in np.unique(seeds):
            m = seeds == s
            ax.plot(noise[m], mgh[m], "o", ms=3, alpha=0.6, label=f"seed {s}")
        means = [mgh[noise == v].mean() for v in levels]
        ax.plot(levels, means, "k-", lw=1, label="mean")
        positive = levels[levels > 0]
        ax.set_xscale("symlog", linthresh=positive.min() if positive.size else 1e-6)
        ax.set_xlabel(r"noise level $\delta$")
        ax.set_ylabel(r"$\hat d_{mGH}$ to truth")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_reconstruction(coords: np.ndarray, density: np.ndarray, inj: np.ndarray, path: Path,
                        truth_density: np.ndarray = None) -> Path:
    """Recovered density and injectivity radius along the first recovered coordinate."""
    x = np.asarray(coords)[:, 0] if np.ndim(coords) > 1 else np.asarray(coords)
    order = np.argsort(x)
    with plt.rc_context(_STYLE):
        fig, (a1, a2) = plt.subplots(2, 1, sharex=True, figsize=(5.0, 4.8))
        a1.plot(x[order], np.asarray(density)[order], ".-", ms=3, label=r"$\hat\rho$")
        if truth_density is not None:
            a1.plot(x[order], np.asarray(truth_density)[order], "-", lw=0.8, label="truth")
        a1.set_ylabel("density")
        a1.legend()
        a2.plot(x[order], np.asarray(inj, dtype=float)[order], ".", ms=3)
        a2.set_ylabel("injectivity radius")
        a2.set_xlabel("net point (index order)")
        fig.tight_layout()
        return _save(fig, path)
