"""Preconditioned inversion of the normal operator.

The solver realizes the Neumann-series picture behind the frequency-side
preconditioner: applying the leading-order inverse to the normal operator
leaves identity plus a remainder that loses a power of frequency, so plain
Richardson iteration with that inverse as the preconditioner contracts.
The module also houses a dense-matrix injectivity probe on a coarse grid
and a small experiment that exhibits the per-iteration regularity gain on
deliberately rough inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import transform
from .grids import CutoffSpec, RadialCutoff, ScalarGrid, SinogramGrid
from .geodesics import check_simplicity
from .kernel import KernelProvider, _is_flat
from .metrics import MetricField
from .parametrix import (PseudoOp, forward_hat, freq_lattice, sobolev_norm)
from .symbols import _support_rule, calibrate_constant, symbol_fft

__all__ = [
    "IterationTrace",
    "ProbeReport",
    "RegularityReport",
    "injectivity_probe",
    "invert_normal",
    "invert_sinogram",
    "regularity_gain_demo",
    "solver_parametrix",
]

try:  # SciPy is already a hard dependency elsewhere; j0 keeps this exact
    from scipy.special import j0 as _bessel_j0
except ImportError:  # pragma: no cover
    _bessel_j0 = None


@dataclass(frozen=True)
class IterationTrace:
    """Convergence history of the preconditioned iteration.

    residuals[m] is the relative data residual after iterate m (residuals[0]
    belongs to the initial guess P d).  errors holds relative solution
    errors against a known truth and is None otherwise.  sobolev rows hold
    the iterate norms at the probe orders.
    """

    residuals: np.ndarray
    errors: np.ndarray | None
    sobolev: np.ndarray
    t_probe: tuple[float, ...]
    converged: bool
    diverged: bool

    def __post_init__(self):
        object.__setattr__(self, "residuals",
                           np.asarray(self.residuals, dtype=float))
        if self.errors is not None:
            object.__setattr__(self, "errors",
                               np.asarray(self.errors, dtype=float))
        object.__setattr__(self, "sobolev",
                           np.asarray(self.sobolev, dtype=float))
        self.validate()

    def validate(self) -> None:
        n = self.residuals.size
        if self.errors is not None and self.errors.size != n:
            raise ValueError("residual and error traces differ in length")
        if self.sobolev.size and self.sobolev.shape[0] != n:
            raise ValueError("sobolev trace does not match the iterations")
        if np.any(self.residuals < 0.0):
            raise ValueError("residuals must be nonnegative")
        if self.errors is not None and np.any(self.errors < 0.0):
            raise ValueError("errors must be nonnegative")

    @property
    def iterations(self) -> int:
        return int(self.residuals.size)

    def rows(self) -> list[tuple]:
        out = []
        for i in range(self.residuals.size):
            row = [i, float(self.residuals[i])]
            row.append(float(self.errors[i]) if self.errors is not None
                       else math.nan)
            if self.sobolev.size:
                row.extend(float(v) for v in self.sobolev[i])
            out.append(tuple(row))
        return out


def _flat_radial_symbol(cut: CutoffSpec, cal: float | None = None):
    """Radial kernel transform at the center for the flat family:
    cal * int phi(rho) J0(s rho) drho, exact up to the quadrature rule."""
    if _bessel_j0 is None:  # pragma: no cover
        raise RuntimeError("scipy.special.j0 unavailable")
    if cal is None:
        cal = calibrate_constant(cut.chi)
    nodes, weights = _support_rule(cut.phi)

    def profile(s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        vals = _bessel_j0(np.multiply.outer(s, nodes)) @ weights
        return cal * vals

    return profile


def _sampled_radial_symbol(m: MetricField, cut: CutoffSpec, *,
                           s_hi: float = 24.0, n_s: int = 49,
                           n_ang: int = 8):
    """Low-frequency radial profile of the measured kernel transform at the
    domain center, angle-averaged and linearly interpolated."""
    provider = KernelProvider(m, cut)
    fs = symbol_fft(provider, np.zeros(2))
    s_grid = np.linspace(0.0, s_hi, n_s)
    ang = np.pi * (np.arange(n_ang) + 0.5) / n_ang
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    vals = np.empty(n_s)
    vals[0] = float(np.real(fs.sample(np.zeros((1, 2)))[0]))
    for i, s in enumerate(s_grid[1:], start=1):
        vals[i] = float(np.mean(np.real(fs.sample(s * dirs))))

    def profile(s: np.ndarray) -> np.ndarray:
        return np.interp(np.asarray(s, dtype=float), s_grid, vals)

    return profile


def solver_parametrix(m: MetricField, cut: CutoffSpec | None,
                      layout: ScalarGrid, *, cal: float | None = None,
                      low_profile=None,
                      trust_band: tuple[float, float] = (30.0, 60.0),
                      ) -> PseudoOp:
    """Leading-order inverse made safe for iteration.

    Three solver-side modifications of the bare leading-order symbol:

    * the dead band below the high-pass ramp is filled with the reciprocal
      of the radial profile of the windowed kernel transform at the domain
      center (model quadrature for the flat family, sampled transform
      otherwise); without this order -infinity correction the iteration
      can never recover the smooth modes,
    * the symbol is tapered to zero across trust_band.  The symbol grows
      linearly in frequency, so applied to the forward quadrature's noise
      floor it would amplify junk far above the data band and the
      iteration diverges; the taper freezes those modes instead.  It sits
      far outside the spectrum of the smooth fields being reconstructed,
      and
    * the output is masked by a spatial rolloff ending at the inner cutoff
      radius (width half the window ramp).  The windowed operator acts
      with strength roughly the cube of the window across its ramp, so
      junk the preconditioner rings out there is corrected glacially or
      not at all and dominates the final error if admitted; committing the
      iterates to the interior, where the windows are identically one,
      keeps the composition with the normal operator uniformly close to
      the identity on the whole iterate space.
    """
    if cut is None:
        cut = CutoffSpec.default()
    if cal is None:
        cal = calibrate_constant(cut.chi)
    lo, hi = trust_band
    if not 0.0 < lo < hi:
        raise ValueError("trust_band must be an increasing positive pair")
    if low_profile is None:
        if _is_flat(m):
            low_profile = _flat_radial_symbol(cut, cal)
        else:
            low_profile = _sampled_radial_symbol(m, cut)

    def low_band(s: np.ndarray) -> np.ndarray:
        # the corrector multiplies (1 - zeta), which vanishes past the ramp
        # top; beyond it the profile may ring through zero harmlessly
        live = s < cut.zeta_hi
        amp = np.asarray(low_profile(s), dtype=float)
        if np.any(amp[live] <= 0.0):
            raise ValueError(
                "the measured radial symbol is not positive on the low "
                "band; the solver correction would not be invertible")
        return 1.0 / np.where(live, amp, 1.0)

    pop = PseudoOp.parametrix(m, cut, layout, cal=cal, low_band=low_band)
    ramp = RadialCutoff(lo, hi, order=cut.phi.order)
    s_lat = np.hypot(*np.moveaxis(freq_lattice(layout), -1, 0))
    taper = np.asarray(ramp(s_lat))
    pts_r = np.hypot(*np.moveaxis(layout.mesh_points(), -1, 0))
    half_ramp = 0.5 * (cut.phi.r_zero - cut.phi.r_one)
    roll = RadialCutoff(cut.phi.r_one - half_ramp, cut.phi.r_one,
                        order=cut.phi.order)
    mask = np.asarray(roll(pts_r))
    if pop.mode in ("multiplier", "separable"):
        parts = tuple((mask if space is None else space * mask, mult * taper)
                      for space, mult in pop.parts)
        return PseudoOp(layout=pop.layout, mode="separable", parts=parts)

    base_fn = pop.fn

    def masked(points: np.ndarray, freqs: np.ndarray) -> np.ndarray:
        sf = np.hypot(freqs[:, 0], freqs[:, 1])
        pr = np.hypot(points[:, 0], points[:, 1])
        return (np.asarray(roll(pr))[:, None]
                * base_fn(points, freqs) * np.asarray(ramp(sf))[None, :])

    return PseudoOp(layout=pop.layout, mode="direct", fn=masked,
                    chunk=pop.chunk)


def invert_normal(m: MetricField, cut: CutoffSpec | None, d: ScalarGrid, *,
                  max_iter: int = 50, tol: float = 1e-3,
                  op: transform.NormalOperator | None = None,
                  pop: PseudoOp | None = None, f_true: ScalarGrid | None
                  = None, t_probe: tuple[float, ...] = (),
                  cal: float | None = None, tables=None,
                  n_rho: int = 129, n_beta: int = 256,
                  ) -> tuple[ScalarGrid, IterationTrace]:
    """Recover f from d = Nf by preconditioned Richardson iteration.

    f_0 = P d, then f_{m+1} = f_m + P(d - N f_m).  Stops when the relative
    data residual drops under tol; aborts (diverged flag set) if the
    residual grows three steps in a row.
    """
    if cut is None:
        cut = CutoffSpec.default()
    if op is None:
        op = transform.normal_operator(m, cut, n_rho=n_rho, n_beta=n_beta,
                                       tables=tables)
    if pop is None:
        pop = solver_parametrix(m, cut, d, cal=cal)
    if not d.same_layout(pop.layout):
        raise ValueError("data grid does not match the preconditioner grid")

    d_norm = d.norm_l2()
    truth_norm = f_true.norm_l2() if f_true is not None else None

    residuals: list[float] = []
    errors: list[float] | None = [] if f_true is not None else None
    sob: list[list[float]] = []

    def record(fm: ScalarGrid, res_norm: float) -> None:
        residuals.append(res_norm / d_norm if d_norm > 0.0 else res_norm)
        if errors is not None:
            gap = fm.with_values(fm.values - f_true.values)
            errors.append(gap.norm_l2() / truth_norm
                          if truth_norm > 0.0 else gap.norm_l2())
        if t_probe:
            sob.append([sobolev_norm(fm, t) for t in t_probe])

    f = pop.apply(d)
    converged = False
    diverged = False
    rising = 0
    for _ in range(max_iter):
        residual = d.with_values(d.values - op.apply(f).values)
        res_norm = residual.norm_l2()
        record(f, res_norm)
        if residuals[-1] < tol:
            converged = True
            break
        if len(residuals) > 1 and residuals[-1] > residuals[-2]:
            rising += 1
            if rising >= 3:
                diverged = True
                break
        else:
            rising = 0
        f = f.with_values(f.values + pop.apply(residual).values)

    trace = IterationTrace(
        residuals=np.asarray(residuals),
        errors=np.asarray(errors) if errors is not None else None,
        sobolev=np.asarray(sob) if sob else np.zeros((len(residuals), 0)),
        t_probe=tuple(float(t) for t in t_probe),
        converged=converged, diverged=diverged)
    return f, trace


def invert_sinogram(m: MetricField, cut: CutoffSpec | None,
                    sino: SinogramGrid, layout: ScalarGrid, *,
                    n_dir: int = 256, **solver_kw,
                    ) -> tuple[ScalarGrid, IterationTrace]:
    """Recover f from ray-transform data: backproject, then invert.

    The backprojection convention here matches the one the normal operator
    is built on (full-line integrals averaged over the direction circle),
    so d = (adjoint applied to sino) feeds invert_normal unchanged.
    """
    if cut is None:
        cut = CutoffSpec.default()
    d = transform.backproject(m, sino, layout, n_dir=n_dir)
    pts = layout.mesh_points()
    psi = cut.psi(np.hypot(pts[..., 0], pts[..., 1]))
    d = layout.with_values(d.values * psi)
    return invert_normal(m, cut, d, **solver_kw)


# ---------------------------------------------------------------------------
# dense probe


@dataclass(frozen=True)
class ProbeReport:
    """Spectral summary of the dense normal-operator matrix.

    sigma_min > 0 on a fixed discretization is evidence against a grid-scale
    null space, not an injectivity proof; the flag below says exactly that.
    """

    dims: int
    n_nodes: int
    sigma_min: float
    sigma_max: float
    condition: float
    symmetry_defect: float
    passed: bool
    predicted_iterations: int
    grid_scale_only: bool = True

    def rows(self) -> list[tuple]:
        return [(self.dims, self.n_nodes, self.sigma_min, self.sigma_max,
                 self.condition, self.symmetry_defect, int(self.passed),
                 self.predicted_iterations)]


def injectivity_probe(m: MetricField, cut: CutoffSpec | None = None, *,
                      dims: int = 16, radius: float = 0.7,
                      tol: float = 1e-3, tables=None,
                      n_rho: int = 129, n_beta: int = 256) -> ProbeReport:
    """Assemble the dense normal-operator matrix on coarse interior nodes
    and report its singular-value range.

    The node set is the dims x dims lattice over the bounding square of the
    given radius, restricted to the disk, so every node sits strictly
    inside the plateau where the spatial cutoffs equal one (tapered rows
    would otherwise fake a null space).  Refuses to run when the
    simplicity scan fails, and guards against dense-assembling a large
    grid.
    """
    if cut is None:
        cut = CutoffSpec.default()
    if dims > 48:
        raise ValueError(
            f"probe grid {dims}^2 exceeds the dense-assembly guard (48^2); "
            "the probe is meant for coarse grids")
    if not radius < cut.region_radius:
        raise ValueError(
            "probe nodes must sit strictly inside the cutoff plateau "
            f"(radius < {cut.region_radius:g})")
    rep = check_simplicity(m)
    if not (rep.convex_boundary and rep.nontrapping
            and rep.no_conjugate_points):
        detail = []
        if not rep.convex_boundary:
            detail.append("boundary not strictly convex")
        if not rep.nontrapping:
            detail.append("trapped ray found")
        if rep.conjugate_witness is not None:
            th, al, tc = rep.conjugate_witness
            detail.append(f"conjugate point at t={tc:.4f} on the ray "
                          f"(theta={th:.3f}, alpha={al:.3f})")
        raise ValueError("the metric fails the simplicity scan: "
                         + "; ".join(detail))

    side = 2.0 * radius * dims / (dims - 1)
    layout = ScalarGrid.square(dims, side)
    all_pts = layout.mesh_points().reshape(-1, 2)
    keep = np.hypot(all_pts[:, 0], all_pts[:, 1]) <= radius + 1e-12
    op = transform.normal_operator(m, cut, n_rho=n_rho, n_beta=n_beta,
                                   tables=tables)
    full = op.matrix(all_pts, layout)          # rows: all lattice nodes
    mat = full[np.ix_(keep, keep)]

    sing = np.linalg.svd(mat, compute_uv=False)
    sigma_max = float(sing[0])
    sigma_min = float(sing[-1])
    sym = float(np.linalg.norm(mat - mat.T) / np.linalg.norm(mat))
    passed = sigma_min > 10.0 * np.finfo(float).eps * sigma_max

    predicted = _predict_iterations(m, cut, layout, full, keep, tol)
    return ProbeReport(dims=dims, n_nodes=int(keep.sum()),
                       sigma_min=sigma_min, sigma_max=sigma_max,
                       condition=sigma_max / sigma_min if sigma_min > 0.0
                       else math.inf,
                       symmetry_defect=sym, passed=passed,
                       predicted_iterations=predicted)


def _predict_iterations(m, cut, layout, full, keep, tol):
    """Log-linear iteration estimate from the preconditioned spectrum.

    Applies the solver preconditioner to each kept column of the assembled
    matrix (as a full grid field, so the Fourier application is honest),
    restricts back to the kept nodes, symmetrizes, and converts the
    condition number into the optimal-Richardson contraction
    (kappa - 1) / (kappa + 1).  The spectrum is taken over the nodes the
    solver actually commits to, the plateau of its interior mask; nodes
    under the mask rolloff carry artificially small composite eigenvalues
    that say nothing about the contraction rate on the iterate space.
    """
    pop = solver_parametrix(m, cut, layout)
    kept_idx = np.flatnonzero(keep)
    pn = np.empty((kept_idx.size, kept_idx.size))
    for col, j in enumerate(kept_idx):
        ncol = layout.with_values(full[:, j].reshape(layout.shape))
        pn[:, col] = pop.apply(ncol).values.ravel()[kept_idx]
    pn = 0.5 * (pn + pn.T)
    pts = layout.mesh_points().reshape(-1, 2)[kept_idx]
    half_ramp = 0.5 * (cut.phi.r_zero - cut.phi.r_one)
    plateau = (np.hypot(pts[:, 0], pts[:, 1])
               <= cut.phi.r_one - half_ramp + 1e-12)
    if plateau.sum() >= 2:
        pn = pn[np.ix_(plateau, plateau)]
    eigs = np.linalg.eigvalsh(pn)
    if eigs[0] <= 0.0:
        return int(1e6)
    kappa = eigs[-1] / eigs[0]
    q = (kappa - 1.0) / (kappa + 1.0)
    if q <= 0.0:
        return 1
    return max(1, math.ceil(math.log(tol) / math.log(q)))


# ---------------------------------------------------------------------------
# regularity-gain experiment


@dataclass(frozen=True)
class RegularityReport:
    """Spectral bookkeeping for the smoothing-bootstrap experiment.

    Rows of ``sobolev`` hold the Sobolev-norm profile (one norm per probe
    order) of the true field, of the initial guess, and of each further
    iterate.  ``shifts`` are median log2 profile ratios between consecutive
    iterates, so a run that is already converged reports shifts near zero.
    ``correction_tails`` are fitted dyadic-shell slopes for the initial
    guess's defect and for each added correction; on a rough input these
    run steeper than ``tail_exponents[0]``, the slope of the input itself,
    which is the per-iteration smoothing gain made visible.
    """

    t_probe: tuple[float, ...]
    sobolev: np.ndarray             # (2 + iterations, len(t_probe))
    tail_exponents: np.ndarray      # one slope per sobolev row
    correction_tails: np.ndarray    # defect slope, then one per correction
    correction_sobolev: np.ndarray  # same rows, Sobolev-norm profiles
    shifts: np.ndarray              # per iteration beyond the initial guess
    levels: tuple[int, ...]
    stage_names: tuple[str, ...] = ()

    def validate(self) -> None:
        if self.sobolev.ndim != 2 or self.sobolev.shape[1] != len(self.t_probe):
            raise ValueError("sobolev rows must match the probe orders")
        if self.shifts.size != max(0, self.sobolev.shape[0] - 2):
            raise ValueError("one profile shift per iterate beyond the first")


def _tail_exponent(f: ScalarGrid, levels: tuple[int, ...]) -> float:
    """Fitted slope of log2 shell energy against the dyadic level."""
    hat = forward_hat(f)
    s = np.hypot(*np.moveaxis(freq_lattice(f), -1, 0))
    base = 2.0 * np.pi / f.side
    energies = []
    for j in levels:
        lo, hi = base * 2.0 ** (j - 0.5), base * 2.0 ** (j + 0.5)
        band = (s >= lo) & (s < hi)
        energies.append(float(np.sum(np.abs(hat[band]) ** 2)) + 1e-300)
    xs = np.asarray(levels, dtype=float)
    ys = np.log2(np.asarray(energies))
    a = np.stack([xs, np.ones_like(xs)], axis=-1)
    coef, *_ = np.linalg.lstsq(a, ys, rcond=None)
    return float(coef[0])


def regularity_gain_demo(m: MetricField, cut: CutoffSpec | None,
                         f_rough: ScalarGrid, *, iterations: int = 2,
                         t_probe: tuple[float, ...] = (-1.0, -0.5, 0.0,
                                                       0.5, 1.0),
                         levels: tuple[int, ...] = (3, 4, 5),
                         op: transform.NormalOperator | None = None,
                         pop: PseudoOp | None = None,
                         cal: float | None = None,
                         tables=None) -> RegularityReport:
    """Exhibit the per-iteration regularity gain on a rough input.

    Synthesizes data with the normal operator, runs a few preconditioned
    iterations, and records two complementary diagnostics: Sobolev-norm
    profiles of the iterate sequence (whose consecutive log-ratios, the
    shifts, collapse to zero once the run has converged) and dyadic
    spectral-tail slopes of the corrections (which run steeper than the
    input's slope because each correction lives one smoothing order up).
    """
    if cut is None:
        cut = CutoffSpec.default()
    if op is None:
        op = transform.normal_operator(m, cut, tables=tables)
    if pop is None:
        pop = solver_parametrix(m, cut, f_rough, cal=cal)

    d = op.apply(f_rough)
    f = pop.apply(d)
    rows = [f_rough, f]
    names = ["input", "initial guess"]
    defect = f.with_values(f.values - f_rough.values)
    corr_stages = [defect]
    for i in range(iterations):
        residual = d.with_values(d.values - op.apply(f).values)
        corr = pop.apply(residual)
        f = f.with_values(f.values + corr.values)
        rows.append(f)
        names.append(f"iterate {i + 1}")
        corr_stages.append(corr)

    sob = np.array([[sobolev_norm(g, t) for t in t_probe] for g in rows])
    tails = np.array([_tail_exponent(g, levels) for g in rows])
    ctails = np.array([_tail_exponent(g, levels) for g in corr_stages])
    csob = np.array([[sobolev_norm(g, t) for t in t_probe]
                     for g in corr_stages])
    if sob.shape[0] > 2:
        with np.errstate(divide="ignore"):
            shifts = np.median(np.log2(sob[2:] / sob[1:-1]), axis=1)
    else:
        shifts = np.empty(0)
    report = RegularityReport(t_probe=tuple(float(t) for t in t_probe),
                              sobolev=sob, tail_exponents=tails,
                              correction_tails=ctails, correction_sobolev=csob,
                              shifts=shifts, levels=tuple(levels),
                              stage_names=tuple(names))
    report.validate()
    return report
