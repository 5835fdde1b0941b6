"""Command-line harness: forward solves, heat data, inversion, scoring and sweeps.

Exit codes: 0 success, 2 configuration or usage, 3 input parse, 4 forward
solve, 5 spectral fit, 6 reconstruction, 7 mGH scoring, 8 selftest failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .config import SCHEMA, ConfigError, build_model, load_config
from .inverse.pipeline import InverseConfig, ReconstructionError, reconstruct, write_reconstruction
from .mgh import MetricMeasureNet, MghError, d_mgh_estimate
from .phd import PHDError, read_phd, write_phd
from .space import SpaceError
from .spectral import EigensolverError, weyl_check

EXIT_OK, EXIT_CONFIG, EXIT_PARSE, EXIT_SOLVE, EXIT_FIT, EXIT_RECONSTRUCT, EXIT_SCORE, EXIT_SELFTEST = (
    0, 2, 3, 4, 5, 6, 7, 8)


class StageError(Exception):
    """A failing stage with its exit code."""

    def __init__(self, stage: str, code: int, message: str):
        super().__init__(message)
        self.stage, self.code = stage, code


# output helpers ---------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)) or v is None:
        return "" if v is None else str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _atomic_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)
    return path


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return _atomic_text(path, buf.getvalue())


def _to_json(obj):
    if isinstance(obj, dict):
        return {str(k): _to_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_json(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_json(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else None
    return obj


def write_json(path: Path, obj) -> Path:
    return _atomic_text(path, json.dumps(_to_json(obj), indent=1, sort_keys=True) + "\n")


def write_net(path: Path, net: MetricMeasureNet) -> Path:
    return write_json(path, {"format": "mm-net-v1", "base": net.base, "weights": net.weights,
                             "distances": net.distances})


def read_net(path: Path) -> MetricMeasureNet:
    try:
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != "mm-net-v1":
            raise ValueError(f"unknown format {doc.get('format')!r}")
        return MetricMeasureNet(np.asarray(doc["distances"], float), np.asarray(doc["weights"], float),
                                int(doc["base"]))
    except FileNotFoundError:
        raise StageError("parse", EXIT_PARSE, f"{path}: file not found") from None
    except (ValueError, KeyError, TypeError, MghError) as exc:
        raise StageError("parse", EXIT_PARSE, f"{path}: {exc}") from None


# stages -----------------------------------------------------------------------

def _solve(cfg: dict):
    from .sweeps import solve_model

    try:
        return solve_model(cfg["model"], cfg["solver"]["modes"], cfg["solver"]["method"], cfg["solver"]["seed"])
    except (SpaceError, EigensolverError, ValueError) as exc:
        raise StageError("solve", EXIT_SOLVE, str(exc)) from None


def _heat_diagnostics(space, spec, times=(0.1, 1.0, 10.0)) -> dict:
    w = space.weights
    pts = np.unique(np.linspace(0, space.vertex_count - 1, min(16, space.vertex_count)).round().astype(int))
    out = {}
    for t in times:
        H = spec.heat_matrix(t, rows=pts)
        completeness = float(np.max(np.abs(H @ w - 1)))
        half = spec.heat_matrix(t / 2)
        semigroup = float(np.max(np.abs((half[pts] * w) @ half - H)))
        out[repr(float(t))] = {"stochastic_completeness": completeness, "semigroup_defect": semigroup}
    return out


def _fiber_gap(space, spec) -> Optional[dict]:
    if space.kind != "warped_torus":
        return None
    n_y, n_z, sigma = space.params["n_y"], space.params["n_z"], space.params["sigma"]
    phi = spec.eigenvectors.reshape(n_y, n_z, -1)
    # modes with m != 0 vary along the fibres
    fiber = np.sum((phi - phi.mean(axis=1, keepdims=True)) ** 2, axis=(0, 1)) / np.sum(phi**2, axis=(0, 1))
    c_max = float(np.sqrt(space.metric_samples[:, 1, 1].max())) / sigma
    bound = 1.0 / (sigma**2 * c_max**2)
    idx = np.flatnonzero(fiber > 0.5)
    first = float(spec.eigenvalues[idx[0]]) if idx.size else None
    return {"bound": bound, "first_fiber_eigenvalue": first,
            "gap_present": bool(first is None or first >= bound)}


def cmd_forward(cfg: dict, out: Path) -> List[Path]:
    space, spec = _solve(cfg)
    files = [write_csv(out / "eigenvalues.csv", ["index", "eigenvalue"],
                       [(p, lam) for p, lam in enumerate(spec.eigenvalues)])]
    pts = np.unique(np.linspace(0, space.vertex_count - 1, min(16, space.vertex_count)).round().astype(int))
    rows = []
    for t in (0.1, 1.0, 10.0):
        H = spec.heat_matrix(t, rows=pts, cols=pts)
        rows += [(int(i), int(j), t, H[a, b]) for a, i in enumerate(pts) for b, j in enumerate(pts) if i <= j]
    files.append(write_csv(out / "heat_kernel.csv", ["i", "j", "t", "H"], rows))
    diag = {"model": cfg["model"], "modes": spec.mode_count, "vertices": space.vertex_count,
            "residual": spec.residual, "heat": _heat_diagnostics(space, spec), "fiber_gap": _fiber_gap(space, spec)}
    if spec.mode_count >= 10:
        wc = weyl_check(spec)
        diag["weyl"] = {"c": wc["c"], "C": wc["C"], "dim": wc["dim"], "positive": wc["positive"],
                        "counting_bound_holds": wc["counting_bound_holds"]}
    files.append(write_json(out / "diagnostics.json", diag))
    files.append(write_json(out / "spectral.json", spec.to_dict()))
    if cfg["output"]["plot"]:
        from .plotting import plot_spectrum

        files.append(plot_spectrum(spec.eigenvalues, out / "eigenvalues.png", space.dim))
    return files


def cmd_phd(cfg: dict, out: Path) -> List[Path]:
    from .sweeps import generate_phd

    _, spec = _solve(cfg)
    try:
        data = generate_phd(spec, cfg["phd"])
    except PHDError as exc:
        raise StageError("phd", EXIT_CONFIG, str(exc)) from None
    data.meta.update({"model": cfg["model"], "solver": cfg["solver"]})
    out.mkdir(parents=True, exist_ok=True)
    path = out / "phd.csv"
    write_phd(data, path)
    return [path]


def _truth(data, result) -> Optional[tuple]:
    model = data.meta.get("model")
    if not model:
        return None
    from .sweeps import line_density

    space = build_model(model)
    net = data.net_points
    D = space.distance_matrix[np.ix_(net, net)]
    truth = {"distance_max_error": float(np.max(np.abs(result.distances.matrix - D))),
             "mesh_spacing": float(space.spacing)}
    rho = None
    if space.dim == 1:
        rho = line_density(space)[net]
        truth["density_sup_rel_error"] = float(np.max(np.abs(result.density / rho - 1)))
    if space.kind == "circle":
        truth["injectivity_true"] = space.params["length"] / 2
    return truth, MetricMeasureNet.from_space(space, net), rho


def cmd_invert(cfg: dict, out: Path, phd_file: str) -> List[Path]:
    try:
        data = read_phd(phd_file)
    except FileNotFoundError:
        raise StageError("parse", EXIT_PARSE, f"{phd_file}: file not found") from None
    except (PHDError, ValueError, KeyError) as exc:
        raise StageError("parse", EXIT_PARSE, str(exc)) from None
    try:
        inv = InverseConfig.from_dict(cfg["inverse"])
    except ValueError as exc:
        raise StageError("config", EXIT_CONFIG, str(exc)) from None
    try:
        result = reconstruct(data, inv)
    except ReconstructionError as exc:
        code = EXIT_FIT if exc.stage == "fit" else EXIT_RECONSTRUCT
        raise StageError(exc.stage, code, str(exc)) from None
    truth = _truth(data, result)
    extra = dict(truth[0], noise=data.noise) if truth else None
    files = write_reconstruction(result, out, extra)
    files.append(write_net(out / "net.json", result.as_net()))
    if truth:
        files.append(write_net(out / "truth_net.json", truth[1]))
    if cfg["output"]["plot"]:
        from .plotting import plot_reconstruction

        files.append(plot_reconstruction(np.arange(result.lsd.net_size), result.density, result.inj_radius,
                                         out / "reconstruction.png", truth[2] if truth else None))
    return files


def cmd_mgh(cfg: dict, out: Path, a: str, b: str) -> List[Path]:
    A, B = read_net(Path(a)), read_net(Path(b))
    try:
        est = d_mgh_estimate(A, B, budget=cfg["mgh"]["budget"], exhaustive=cfg["mgh"]["exhaustive"])
    except MghError as exc:
        raise StageError("score", EXIT_SCORE, str(exc)) from None
    doc = dict(est.to_dict(), sizes=[A.size, B.size])
    return [write_json(out / "mgh.json", doc),
            write_csv(out / "mgh.csv", ["epsilon", "lower_bound", "gap", "distortion", "measure_defect",
                                        "base_defect", "exhaustive"],
                      [(est.epsilon, est.lower_bound, est.gap, est.distortion, est.measure_defect,
                        est.base_defect, est.exhaustive)])]


def cmd_collapse_sweep(cfg: dict, out: Path, threads: int) -> List[Path]:
    from .sweeps import collapse_sweep

    try:
        rows = collapse_sweep(cfg["sweep"], threads)
    except PHDError as exc:
        raise StageError("config", EXIT_CONFIG, str(exc)) from None
    except (SpaceError, EigensolverError) as exc:
        raise StageError("solve", EXIT_SOLVE, str(exc)) from None
    except MghError as exc:
        raise StageError("score", EXIT_SCORE, str(exc)) from None
    cols = ["sigma", "heat_discrepancy", "mgh", "mgh_lower_bound", "torus_net_size", "heat_monotone",
            "mgh_monotone"]
    files = [write_csv(out / "collapse.csv", cols, [[r[c] for c in cols] for r in rows])]
    if cfg["output"]["plot"]:
        from .plotting import plot_collapse

        files.append(plot_collapse([r["sigma"] for r in rows], [r["heat_discrepancy"] for r in rows],
                                   [r["mgh"] for r in rows], out / "collapse.png"))
    return files


def cmd_stability_sweep(cfg: dict, out: Path, threads: int) -> List[Path]:
    from .sweeps import stability_sweep

    sw = cfg["sweep"]
    try:
        rows, summary = stability_sweep(cfg["model"], cfg["solver"]["modes"], cfg["phd"], cfg["inverse"],
                                        sw["noise"], sw["seeds"], threads)
    except ValueError as exc:
        if isinstance(exc, (SpaceError,)):
            raise StageError("solve", EXIT_SOLVE, str(exc)) from None
        raise StageError("config", EXIT_CONFIG, str(exc)) from None
    except ReconstructionError as exc:
        raise StageError(exc.stage, EXIT_FIT if exc.stage == "fit" else EXIT_RECONSTRUCT, str(exc)) from None
    cols = ["noise", "seed", "mgh", "mgh_lower_bound", "distance_error", "modes"]
    files = [write_csv(out / "stability.csv", cols, [[r[c] for c in cols] for r in rows]),
             write_json(out / "stability_summary.json", summary)]
    if cfg["output"]["plot"]:
        from .plotting import plot_stability

        files.append(plot_stability([r["noise"] for r in rows], [r["mgh"] for r in rows],
                                    [r["seed"] for r in rows], out / "stability.png"))
    return files


def selftest() -> List[tuple]:
    """Small end-to-end checks; returns ``(name, passed, detail)`` rows."""
    from .mgh import circle_net
    from .phd import sample_phd
    from .space import build_circle
    from .spectral import solve_space

    checks = []
    sp = build_circle(256)
    spec = solve_space(sp, 64)
    lam = spec.eigenvalues[1:11]
    ref = np.repeat(np.arange(1, 6) ** 2, 2)
    err = float(np.max(np.abs(lam / ref - 1)))
    checks.append(("circle spectrum", err < 0.01, f"max rel err {err:.2e}"))
    H = spec.heat_matrix(1.0, rows=[0])
    sc = float(abs(H @ sp.weights - 1)[0])
    checks.append(("stochastic completeness", sc < 1e-9, f"defect {sc:.1e}"))
    data = sample_phd(spec, sp.diameter, 0.8, time_delta=0.1)
    with tempfile.TemporaryDirectory() as tmp:
        write_phd(data, Path(tmp) / "p.csv")
        back = read_phd(Path(tmp) / "p.csv")
    rt = float(np.max(np.abs(back.values - data.values)))
    checks.append(("heat-data round trip", rt == 0.0, f"max diff {rt:.1e}"))
    A = circle_net(6, 2 * np.pi)
    e = d_mgh_estimate(A, A, exhaustive=True).epsilon
    checks.append(("mGH self distance", e == 0.0, f"epsilon {e!r}"))
    return checks


# argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment configuration")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=int, metavar="N", help="noise seed (overrides phd.seed)")
    common.add_argument("--modes", type=int, metavar="K", help="eigenmode count (overrides solver.modes)")
    common.add_argument("--threads", type=int, default=1, metavar="T", help="worker processes for sweeps")
    common.add_argument("--plot", action="store_true", help="also render PNG figures next to the CSVs")
    p = argparse.ArgumentParser(prog="heatrecon", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--print-schema", action="store_true", help="print the configuration schema and exit")
    sub = p.add_subparsers(dest="command")
    sub.add_parser("forward", parents=[common], help="solve the model and write spectra and heat samples")
    sub.add_parser("phd", parents=[common], help="write pointwise heat data of the model")
    q = sub.add_parser("invert", parents=[common], help="reconstruct geometry from a heat-data file")
    q.add_argument("phd_file", metavar="PHD_FILE")
    q = sub.add_parser("mgh", parents=[common], help="estimate the measured GH distance of two net files")
    q.add_argument("net_a", metavar="NET_A")
    q.add_argument("net_b", metavar="NET_B")
    sub.add_parser("collapse-sweep", parents=[common], help="warped tori against their collapse limit")
    sub.add_parser("stability-sweep", parents=[common], help="reconstruction error against data noise")
    sub.add_parser("selftest", parents=[common], help="quick internal consistency checks")
    return p


def _overrides(args) -> dict:
    """Command-line flags as config fields, validated together with the file."""
    over: dict = {}
    if args.out is not None:
        over.setdefault("output", {})["dir"] = args.out
    if args.plot:
        over.setdefault("output", {})["plot"] = True
    if args.seed is not None:
        over.setdefault("phd", {})["seed"] = args.seed
    if args.modes is not None:
        if args.modes < 1:
            raise ConfigError("--modes must be at least 1")
        over.setdefault("solver", {})["modes"] = args.modes
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    return over


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    if args.print_schema:
        print(json.dumps(SCHEMA, indent=1))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"heatrecon: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg["output"]["dir"])
    from threadpoolctl import threadpool_limits

    try:
        # one BLAS thread keeps every stage bit-reproducible
        with threadpool_limits(1):
            if args.command == "selftest":
                checks = selftest()
                for name, ok, detail in checks:
                    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
                return EXIT_OK if all(c[1] for c in checks) else EXIT_SELFTEST
            handlers = {
                "forward": lambda: cmd_forward(cfg, out),
                "phd": lambda: cmd_phd(cfg, out),
                "invert": lambda: cmd_invert(cfg, out, args.phd_file),
                "mgh": lambda: cmd_mgh(cfg, out, args.net_a, args.net_b),
                "collapse-sweep": lambda: cmd_collapse_sweep(cfg, out, args.threads),
                "stability-sweep": lambda: cmd_stability_sweep(cfg, out, args.threads),
            }
            files = handlers[args.command]()
    except StageError as exc:
        print(f"heatrecon {args.command}: {exc.stage} stage failed: {exc}", file=sys.stderr)
        return exc.code
    for f in files:
        print(f)
    return EXIT_OK


if __name__ == "__main__":
    with contextlib.suppress(BrokenPipeError):
        sys.exit(main())
