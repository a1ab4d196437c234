"""Configuration-driven command line: wires the metric, cutoff, grid, and
solver settings of one experiment into the module pipelines and emits
deterministic artifacts (CSV tables, PGM images, text reports).

Subcommands: simplicity, forward, normal, symbol, parametrix, reconstruct,
verify, calibrate.  The calibration constant is computed once by
``calibrate`` and stored as a text artifact in the output directory; the
``parametrix`` and ``reconstruct`` pipelines refuse to run without it.
``verify`` runs the whole property battery for the configured metric and
exits nonzero when any check fails.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import parametrix, reconstruct, transform
from .config import (ExperimentConfig, build_cutoffs, build_layout,
                     build_metric, config_hash, load_config)
from .geodesics import boundary_frame, check_simplicity
from .grids import ScalarGrid
from .io import write_csv, write_pgm, write_text
from .kernel import KernelProvider
from .symbols import calibrate_constant, fit_decay, symbol_fft

__all__ = ["cli_run", "main"]

_CALIBRATION_FILE = "calibration.txt"


# ---------------------------------------------------------------------------
# plumbing


def _apply_workers(workers: int) -> None:
    # worker count is a throughput knob only; the numba kernels accumulate
    # per output point, so results cannot depend on it
    try:
        import numba

        limit = numba.config.NUMBA_NUM_THREADS
        numba.set_num_threads(max(1, min(workers, limit)))
    except Exception:
        pass


def _outdir(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.outdir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _store_calibration(cfg: ExperimentConfig, value: float) -> Path:
    return write_text(_outdir(cfg) / _CALIBRATION_FILE,
                      [f"calibration_constant = {value!r}",
                       f"config = {config_hash(cfg)}"])


def _load_calibration(cfg: ExperimentConfig) -> float:
    path = Path(cfg.outdir) / _CALIBRATION_FILE
    if not path.exists():
        raise FileNotFoundError(
            f"no calibration constant stored in '{cfg.outdir}'; run the "
            "calibrate subcommand first")
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.startswith("calibration_constant"):
            return float(line.split("=", 1)[1])
    raise ValueError(f"{path} does not contain a calibration constant")


def experiment_field(cfg: ExperimentConfig, layout: ScalarGrid,
                     sigma: float = 0.15) -> ScalarGrid:
    """The configured test field: a centered Gaussian by default."""
    pts = layout.mesh_points()
    r2 = pts[..., 0] ** 2 + pts[..., 1] ** 2
    if cfg.field_kind == "zero":
        vals = np.zeros(layout.shape)
    elif cfg.field_kind == "disk":
        vals = np.where(np.sqrt(r2) <= 0.5, 1.0, 0.0)
    else:
        vals = np.exp(-r2 / (2.0 * sigma ** 2))
    return layout.with_values(vals)


# ---------------------------------------------------------------------------
# subcommands


def _run_calibrate(cfg: ExperimentConfig) -> int:
    cut = build_cutoffs(cfg)
    value = calibrate_constant(cut.chi)
    path = _store_calibration(cfg, value)
    print(f"calibration constant {value!r} stored in {path}")
    return 0


def _run_simplicity(cfg: ExperimentConfig) -> int:
    m = build_metric(cfg)
    rep = check_simplicity(m)
    witness = rep.conjugate_witness or ("", "", "")
    write_csv(_outdir(cfg) / f"{cfg.name}_simplicity.csv",
              ["convex_boundary", "nontrapping", "no_conjugate_points",
               "witness_theta", "witness_alpha", "witness_t"],
              [(int(rep.convex_boundary), int(rep.nontrapping),
                int(rep.no_conjugate_points), *witness)],
              config_hash=config_hash(cfg))
    simple = (rep.convex_boundary and rep.nontrapping
              and rep.no_conjugate_points)
    print(f"simplicity scan: {'simple' if simple else 'NOT simple'}")
    return 0 if simple else 1


def _run_forward(cfg: ExperimentConfig) -> int:
    m = build_metric(cfg)
    layout = build_layout(cfg)
    f = experiment_field(cfg, layout)
    sino = transform.xray(m, f, cfg.n_theta, cfg.n_alpha)
    thetas = sino.thetas()
    alphas = sino.alphas()
    rows = [(i, j, thetas[i], alphas[j], sino.values[i, j])
            for i in range(cfg.n_theta) for j in range(cfg.n_alpha)]
    h = config_hash(cfg)
    out = _outdir(cfg)
    write_csv(out / f"{cfg.name}_sinogram.csv",
              ["theta_index", "alpha_index", "theta", "alpha", "value"],
              rows, config_hash=h)
    write_pgm(out / f"{cfg.name}_sinogram.pgm", sino.values, config_hash=h)
    print(f"sinogram {cfg.n_theta}x{cfg.n_alpha} written to {out}")
    return 0


def _grid_rows(g: ScalarGrid):
    ax, ay = g.axis_x(), g.axis_y()
    return [(i, j, ax[i], ay[j], g.values[i, j])
            for i in range(g.shape[0]) for j in range(g.shape[1])]


def _run_normal(cfg: ExperimentConfig) -> int:
    m = build_metric(cfg)
    cut = build_cutoffs(cfg)
    layout = build_layout(cfg)
    f = experiment_field(cfg, layout)
    d = transform.normal_operator(m, cut).apply(f)
    h = config_hash(cfg)
    out = _outdir(cfg)
    write_csv(out / f"{cfg.name}_normal.csv",
              ["ix", "iy", "x", "y", "value"], _grid_rows(d), config_hash=h)
    write_pgm(out / f"{cfg.name}_normal.pgm", d.values, config_hash=h)
    print(f"normal-operator image written to {out}")
    return 0


def _symbol_profile(m, cut, *, n_angles: int = 4):
    provider = KernelProvider(m, cut)
    fs = symbol_fft(provider, np.zeros(2))
    s = np.geomspace(60.0, 600.0, 9)
    ang = np.pi * (np.arange(n_angles) + 0.5) / n_angles
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    mags = np.array([float(np.mean(np.abs(fs.sample(si * dirs))))
                     for si in s])
    return s, mags


def _run_symbol(cfg: ExperimentConfig) -> int:
    m = build_metric(cfg)
    cut = build_cutoffs(cfg)
    s, mags = _symbol_profile(m, cut)
    slope, intercept, r2 = fit_decay(s, mags)
    h = config_hash(cfg)
    out = _outdir(cfg)
    write_csv(out / f"{cfg.name}_symbol.csv", ["s", "magnitude"],
              list(zip(s, mags)), config_hash=h)
    write_csv(out / f"{cfg.name}_symbol_fit.csv",
              ["slope", "intercept", "r_squared"],
              [(slope, intercept, r2)], config_hash=h)
    print(f"symbol decay slope {slope:+.4f} (r^2 {r2:.4f})")
    return 0


def _run_parametrix(cfg: ExperimentConfig) -> int:
    m = build_metric(cfg)
    cut = build_cutoffs(cfg)
    cal = _load_calibration(cfg)
    rep = parametrix.smoothing_order(m, cut, levels=(3, 4, 5), cal=cal)
    h = config_hash(cfg)
    out = _outdir(cfg)
    write_csv(out / f"{cfg.name}_smoothing.csv",
              ["level", "frequency", "in_energy", "res_energy", "ratio"],
              [(lv, rep.freqs[i], rep.in_energy[i], rep.res_energy[i],
                rep.ratios[i]) for i, lv in enumerate(rep.levels)],
              config_hash=h)
    write_csv(out / f"{cfg.name}_smoothing_fit.csv",
              ["tau_hat", "r_squared"], [(rep.tau_hat, rep.r_squared)],
              config_hash=h)
    print(f"fitted smoothing order {rep.tau_hat:+.3f} "
          f"(r^2 {rep.r_squared:.3f})")
    return 0


def _run_reconstruct(cfg: ExperimentConfig) -> int:
    m = build_metric(cfg)
    cut = build_cutoffs(cfg)
    cal = _load_calibration(cfg)
    layout = build_layout(cfg)
    f_true = experiment_field(cfg, layout)
    op = transform.normal_operator(m, cut)
    d = op.apply(f_true)
    f_rec, trace = reconstruct.invert_normal(
        m, cut, d, op=op, max_iter=cfg.max_iter, tol=cfg.tol,
        f_true=f_true, cal=cal)
    h = config_hash(cfg)
    out = _outdir(cfg)
    write_csv(out / f"{cfg.name}_trace.csv",
              ["iteration", "residual", "error"], trace.rows(),
              config_hash=h)
    write_csv(out / f"{cfg.name}_recon.csv",
              ["ix", "iy", "x", "y", "value"], _grid_rows(f_rec),
              config_hash=h)
    write_pgm(out / f"{cfg.name}_recon.pgm", f_rec.values, config_hash=h)
    err = trace.errors[-1] if trace.errors is not None else math.nan
    print(f"reconstruction: {trace.iterations} iterations, final relative "
          f"error {err:.4g}, converged {trace.converged}")
    return 0


# ---------------------------------------------------------------------------
# verification battery


def _flat_forward_error(cfg: ExperimentConfig, m) -> float:
    layout = build_layout(cfg)
    sigma = 0.15
    f = experiment_field(replace(cfg, field_kind="gaussian"), layout, sigma)
    sino = transform.xray(m, f, cfg.n_theta, cfg.n_alpha)
    pts, nu, tan, _ = boundary_frame(m, sino.thetas())
    ref = np.empty_like(sino.values)
    for j, a in enumerate(sino.alphas()):
        v = np.cos(a) * nu + np.sin(a) * tan
        along = np.sum(-pts * v, axis=1)
        perp2 = np.sum(pts * pts, axis=1) - along ** 2
        ref[:, j] = (sigma * np.sqrt(2.0 * np.pi)
                     * np.exp(-perp2 / (2.0 * sigma ** 2)))
    return float(np.linalg.norm(sino.values - ref) / np.linalg.norm(ref))


def _rotational_defect(cfg: ExperimentConfig, m) -> float:
    layout = build_layout(cfg)
    f = experiment_field(replace(cfg, field_kind="gaussian"), layout)
    sino = transform.xray(m, f, max(cfg.n_theta, 8), cfg.n_alpha)
    spread = sino.values.max(axis=0) - sino.values.min(axis=0)
    return float(spread.max() / np.abs(sino.values).max())


def _round_trip_error(cfg: ExperimentConfig, m, cut, cal: float) -> float:
    layout = build_layout(cfg)
    f = experiment_field(replace(cfg, field_kind="gaussian"), layout)
    op = transform.normal_operator(m, cut)
    _, trace = reconstruct.invert_normal(
        m, cut, op.apply(f), op=op, max_iter=cfg.max_iter, tol=cfg.tol,
        f_true=f, cal=cal)
    return float(trace.errors[-1])


def _run_verify(cfg: ExperimentConfig) -> int:
    m = build_metric(cfg)
    cut = build_cutoffs(cfg)
    cal = calibrate_constant(cut.chi)
    is_flat = cfg.family == "euclidean"
    radial = cfg.family in ("euclidean", "gaussian_conformal",
                            "constant_curvature")

    checks: list[tuple] = []

    def run(name, bound, sense, fn):
        try:
            measured = float(fn())
        except Exception as exc:  # a crashed check is a failed check
            checks.append((name, math.nan, bound, sense, 0,
                           f"{type(exc).__name__}: {exc}"))
            return
        ok = measured < bound if sense == "<" else measured > bound
        checks.append((name, measured, bound, sense, int(ok), ""))

    def simple_flag():
        rep = check_simplicity(m)
        return float(rep.convex_boundary and rep.nontrapping
                     and rep.no_conjugate_points)

    run("simplicity", 0.5, ">", simple_flag)
    if is_flat:
        run("forward_exactness", 1e-3, "<",
            lambda: _flat_forward_error(cfg, m))
    elif radial:
        run("forward_symmetry", 1e-3, "<",
            lambda: _rotational_defect(cfg, m))
    run("normal_identity", 2e-2, "<",
        lambda: transform.verify_normal_identity(
            m, resolution=min(cfg.dims, 128), trials=5, seed=cfg.seed,
            operator=transform.normal_operator(m, cut)).max_rel_error)
    run("symbol_decay_exponent", 0.1, "<",
        lambda: abs(fit_decay(*_symbol_profile(m, cut))[0] + 1.0))
    run("parametrix_gain", 0.0, ">",
        lambda: parametrix.smoothing_order(m, cut, levels=(3, 4, 5),
                                           cal=cal).tau_hat)
    run("round_trip_error", 1e-2 if is_flat else 3e-2, "<",
        lambda: _round_trip_error(cfg, m, cut, cal))

    try:
        probe_rep = reconstruct.injectivity_probe(m, cut, tol=cfg.tol)
        run("probe_singular_ratio", 1e-6, ">",
            lambda: probe_rep.sigma_min / probe_rep.sigma_max)
        run("probe_symmetry_defect", 1e-2, "<",
            lambda: probe_rep.symmetry_defect)
    except Exception as exc:
        detail = f"{type(exc).__name__}: {exc}"
        checks.append(("probe_singular_ratio", math.nan, 1e-6, ">", 0,
                       detail))
        checks.append(("probe_symmetry_defect", math.nan, 1e-2, "<", 0,
                       detail))

    h = config_hash(cfg)
    write_csv(_outdir(cfg) / f"{cfg.name}_verify.csv",
              ["check", "measured", "bound", "sense", "passed", "detail"],
              checks, config_hash=h)
    failed = [c for c in checks if not c[4]]
    for name, measured, bound, sense, ok, detail in checks:
        tag = "pass" if ok else "FAIL"
        note = f"  ({detail})" if detail else ""
        print(f"[{tag}] {name}: measured {measured:.6g} "
              f"(bound {sense} {bound:g}){note}")
    print(f"verify: {len(checks) - len(failed)}/{len(checks)} checks passed")
    return 0 if not failed else 1


# ---------------------------------------------------------------------------
# entry points


_COMMANDS = {
    "simplicity": _run_simplicity,
    "forward": _run_forward,
    "normal": _run_normal,
    "symbol": _run_symbol,
    "parametrix": _run_parametrix,
    "reconstruct": _run_reconstruct,
    "verify": _run_verify,
    "calibrate": _run_calibrate,
}


def _make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="geoxray",
        description="geodesic X-ray transform experiments")
    p.add_argument("--config", metavar="PATH",
                   help="experiment configuration file")
    p.add_argument("--out", metavar="DIR",
                   help="output directory (overrides the configuration)")
    p.add_argument("--workers", type=int, metavar="N",
                   help="worker threads (never affects output values)")
    p.add_argument("--seed", type=int, metavar="N",
                   help="seed for random probes (overrides configuration)")
    sub = p.add_subparsers(dest="command", required=True,
                           metavar="{" + ",".join(_COMMANDS) + "}")
    for name in _COMMANDS:
        sub.add_parser(name)
    return p


def cli_run(argv=None) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = _make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors
        return int(exc.code or 0)

    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        overrides = {}
        if args.out is not None:
            overrides["outdir"] = args.out
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.workers is not None:
            overrides["workers"] = args.workers
        if overrides:
            cfg = replace(cfg, **overrides)
    except (OSError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1

    _apply_workers(cfg.workers)
    try:
        return _COMMANDS[args.command](cfg)
    except (FileNotFoundError, NotImplementedError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_run())


if __name__ == "__main__":
    main()
