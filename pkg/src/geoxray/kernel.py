"""Offset-form kernel of the normal operator and its near-diagonal split.

The normal operator acts by integration against a weakly singular kernel.
Pulled to offset coordinates z = x - y (Lebesgue measure in z, the metric
volume of the source point folded into the kernel) it reads

    k(x, z) = psi(x) * 2 * a(x, y) * d_g(x, y)^(1-n) * sqrt(det g(y)) * phi(y)

with y = x - z, n = 2, a the inverse Jacobian determinant of the exponential
map and d_g the geodesic distance.  Writing z = r*omega with |omega| = 1
factors the singularity:

    k(x, z) = |z|^(1-n) * h(x, |z|, z/|z|),

where h extends continuously to r = 0 with the limit value
2 psi(x) phi(x) sqrt(det g(x)) / |omega|_{g(x)}^(n-1).  Splitting h at r = 0
gives the exactly (-1)-homogeneous part and a bounded remainder:

    k_minus(x, z) = |z|^(1-n) h(x, 0, z/|z|),
    rem(x, z)     = |z|^(2-n) int_0^1 (d/dr h)(x, t|z|, z/|z|) dt,

both windowed by the near-diagonal cutoff chi.  split_kernel realizes the
remainder numerically: central differences in r for d/dr h (step scaled as
1e-4 * (1 + r)) and a 16-point Gauss-Legendre rule for the t-integral.

Pointwise evaluators use the two-point geodesic solvers and are accurate to
roughly 1e-9; they are scalar and cost about a millisecond per call on
curved metrics.  KernelProvider serves vectorized offset grids (for the
Fourier-side analysis, which needs millions of samples) from a polar lookup
table traced once per evaluation point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _fast, geodesics
from .grids import CutoffSpec, RadialCutoff
from .metrics import MetricField
from .transform import _resample_fan

__all__ = [
    "KernelSlice",
    "KernelProvider",
    "kernel_eval",
    "h_eval",
    "split_kernel",
]

_GL16_NODES, _GL16_WEIGHTS = np.polynomial.legendre.leggauss(16)
# mapped to [0, 1]
_GL16_T = 0.5 * (_GL16_NODES + 1.0)
_GL16_W = 0.5 * _GL16_WEIGHTS

FD_STEP_SCALE = 1e-4


def _is_flat(m: MetricField) -> bool:
    return m.family_code == _fast.FAMILY_EUCLIDEAN


def _check_unit(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    if abs(float(np.hypot(omega[0], omega[1])) - 1.0) > 1e-8:
        raise ValueError("omega must be a Euclidean unit vector")
    return omega


def h_eval(m: MetricField, cut: CutoffSpec, x, r: float, omega, *,
           step=None) -> float:
    """Bounded polar factor h(x, r, omega) of the offset kernel.

    At r = 0 the analytic limit is returned; elsewhere the two-point
    geodesic solvers supply the distance ratio and the Jacobian factor.
    """
    x = np.asarray(x, dtype=float)
    omega = _check_unit(omega)
    r = float(r)
    if r < 0.0:
        raise ValueError("r must be nonnegative")
    psi = float(cut.psi(np.hypot(x[0], x[1])))
    y = x - r * omega
    ry = float(np.hypot(y[0], y[1]))
    if ry > m.extended_radius + 1e-12:
        raise ValueError(
            f"offset endpoint at radius {ry:.4f} lies outside the extended "
            f"ball (radius {m.extended_radius:.4f})")
    phiv = float(cut.phi(ry))
    if psi == 0.0 or phiv == 0.0:
        return 0.0
    if _is_flat(m):
        return 2.0 * psi * phiv
    if r < 1e-9:
        return (2.0 * psi * phiv * float(m.sqrt_det(x))
                / float(m.norm(x, omega)))
    w = geodesics.log_map(m, x, y, step=step)
    d = float(m.norm(x, w))
    a = geodesics.jacobian_factor(m, x, y, step=step, w=w)
    return 2.0 * psi * a * float(m.sqrt_det(y)) * phiv / (d / r)


def kernel_eval(m: MetricField, cut: CutoffSpec, x, z, *, step=None) -> float:
    """Offset kernel k(x, z); singular as |z|^(1-n) at z = 0 (raises there)."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    rho = float(np.hypot(z[0], z[1]))
    if rho == 0.0:
        raise ValueError(
            "kernel is singular at zero offset; integrate the z = 0 cell in "
            "polar form instead (KernelProvider.cell_average)")
    y = x - z
    ry = float(np.hypot(y[0], y[1]))
    if ry > m.extended_radius + 1e-12:
        raise ValueError(
            f"offset endpoint at radius {ry:.4f} lies outside the extended "
            f"ball (radius {m.extended_radius:.4f})")
    psi = float(cut.psi(np.hypot(x[0], x[1])))
    phiv = float(cut.phi(ry))
    if psi == 0.0 or phiv == 0.0:
        return 0.0
    if _is_flat(m):
        return 2.0 * psi * phiv / rho
    w = geodesics.log_map(m, x, y, step=step)
    d = float(m.norm(x, w))
    a = geodesics.jacobian_factor(m, x, y, step=step, w=w)
    return 2.0 * psi * a * float(m.sqrt_det(y)) * phiv / d


def _dh_dr(m, cut, x, r, omega, step) -> float:
    """Central difference of h in r, one-sided near the axis."""
    delta = FD_STEP_SCALE * (1.0 + r)
    lo = r - delta
    if lo < 0.0:
        lo = 0.0
    hi = r + delta
    return ((h_eval(m, cut, x, hi, omega, step=step)
             - h_eval(m, cut, x, lo, omega, step=step)) / (hi - lo))


@dataclass(frozen=True)
class KernelSlice:
    """Polar samples of the kernel split at one evaluation point.

    k, k_minus and remainder are all windowed by the near-diagonal cutoff,
    so the defining identity k = k_minus + remainder holds row by row; h is
    stored unwindowed.  The identity is exact up to the finite-difference
    noise in the remainder (a few 1e-6 pointwise relative on curved
    metrics, machine precision on flat ones where h is constant in r).
    """

    center: np.ndarray      # (2,)
    rho: np.ndarray         # (nl,)
    angles: np.ndarray      # (nq,)
    k: np.ndarray           # (nl, nq), chi-windowed kernel
    k_minus: np.ndarray     # (nl, nq), chi-windowed homogeneous part
    remainder: np.ndarray   # (nl, nq), chi-windowed bounded part
    h: np.ndarray           # (nl, nq)
    h_zero: np.ndarray      # (nq,) limit values h(x, 0, omega)

    def validate(self, tol: float = 1e-5) -> None:
        for name in ("k", "k_minus", "remainder", "h", "h_zero"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"KernelSlice field {name} is not finite")
        # pointwise relative: the 1/rho amplification near the axis turns
        # the ~1e-7 two-point solver noise into a large absolute number
        gap = np.abs(self.k - self.k_minus - self.remainder)
        rel = float(np.max(gap / (1.0 + np.abs(self.k))))
        if rel > tol:
            raise ValueError(
                f"kernel split does not recompose: max pointwise defect "
                f"{rel:.3e} relative, tolerance {tol:.1e}")


def split_kernel(m: MetricField, cut: CutoffSpec, x, chi: RadialCutoff | None
                 = None, *, rho=None, n_dir: int = 16,
                 step=None) -> KernelSlice:
    """Sample k, its (-1)-homogeneous part and the bounded remainder.

    Rows with chi = 0 are left at zero without touching the geodesic
    solvers, so the default radial grid may extend past the cutoff support.
    """
    x = np.asarray(x, dtype=float)
    if chi is None:
        chi = cut.chi
    if rho is None:
        rho = np.geomspace(1e-3, 1.05 * chi.r_zero, 22)
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0.0):
        raise ValueError("radial nodes must be positive")
    angles = 2.0 * np.pi * np.arange(n_dir) / n_dir
    omegas = np.stack([np.cos(angles), np.sin(angles)], axis=-1)

    nl, nq = rho.size, n_dir
    k = np.zeros((nl, nq))
    k_minus = np.zeros((nl, nq))
    remainder = np.zeros((nl, nq))
    h = np.zeros((nl, nq))
    h_zero = np.array([h_eval(m, cut, x, 0.0, omegas[q], step=step)
                       for q in range(nq)])

    chivals = chi(rho)
    for l in range(nl):
        cv = float(chivals[l])
        for q in range(nq):
            hv = h_eval(m, cut, x, rho[l], omegas[q], step=step)
            h[l, q] = hv
            if cv == 0.0:
                continue
            k[l, q] = cv * hv / rho[l]
            k_minus[l, q] = cv * h_zero[q] / rho[l]
            acc = 0.0
            for i in range(_GL16_T.size):
                acc += _GL16_W[i] * _dh_dr(
                    m, cut, x, float(_GL16_T[i] * rho[l]), omegas[q], step)
            remainder[l, q] = cv * acc
    return KernelSlice(center=x, rho=rho, angles=angles, k=k,
                       k_minus=k_minus, remainder=remainder, h=h,
                       h_zero=h_zero)


def _polar_lookup(rho_grid, betas, U, A, rho, beta):
    """Bilinear read of a single-center polar table at scattered points."""
    dr = rho_grid[1] - rho_grid[0]
    nb = betas.size
    sr = np.clip(rho / dr, 0.0, rho_grid.size - 1 - 1e-9)
    ir = sr.astype(np.int64)
    wr = sr - ir
    db = 2.0 * np.pi / nb
    sb = beta / db
    ib0 = np.floor(sb).astype(np.int64) % nb
    ib1 = (ib0 + 1) % nb
    wb = sb - np.floor(sb)

    def read(tab):
        lo = tab[ir, ib0] * (1.0 - wb) + tab[ir, ib1] * wb
        hi = tab[ir + 1, ib0] * (1.0 - wb) + tab[ir + 1, ib1] * wb
        return lo * (1.0 - wr) + hi * wr

    return read(U), read(A)


class KernelProvider:
    """Vectorized kernel samples for one metric and cutoff family.

    Flat metrics evaluate in closed form.  Builtin conformal families get a
    per-center polar table (distance ratio U and Jacobian factor A on a
    (rho, beta) grid) traced once per evaluation point and cached; offset
    grids then cost one bilinear gather.  Generic callable metrics have no
    fan tracer and are rejected.
    """

    def __init__(self, m: MetricField, cut: CutoffSpec, *, n_dir: int = 512,
                 n_rho: int = 257, n_beta: int = 512, fan_step: float = 4e-3,
                 rho_pad: float = 0.08):
        if not _is_flat(m) and not (m.has_fast_path
                                    and m.conformal is not None):
            raise ValueError(
                "vectorized kernel sampling needs a builtin conformal "
                "metric family; use the scalar evaluators for generic "
                "callables")
        self.m = m
        self.cut = cut
        self.n_dir = n_dir
        self.n_rho = n_rho
        self.n_beta = n_beta
        self.fan_step = fan_step
        self.rho_pad = rho_pad
        self._tables: dict[tuple[float, float], tuple] = {}

    def support_radius(self, x) -> float:
        """Radius in z beyond which k(x, .) vanishes identically."""
        x = np.asarray(x, dtype=float)
        return float(np.hypot(x[0], x[1])) + self.cut.phi.r_zero

    def table(self, x):
        """Polar (U, A) table centered at x, built on first use."""
        x = np.asarray(x, dtype=float)
        key = (float(x[0]), float(x[1]))
        hit = self._tables.get(key)
        if hit is not None:
            return hit
        m = self.m
        rho_max = self.support_radius(x) + self.rho_pad
        rho_grid = np.linspace(0.0, rho_max, self.n_rho)
        betas = 2.0 * np.pi * np.arange(self.n_beta) / self.n_beta
        c_val = float(m.conformal_factor(x))
        etas = 2.0 * np.pi * np.arange(self.n_dir) / self.n_dir
        dirs = np.stack([np.cos(etas), np.sin(etas)],
                        axis=-1) / math.sqrt(c_val)
        trace_radius = max(1.30, m.extended_radius)
        t_cap = max(1.35 * rho_max, 1.05 * geodesics.diameter_estimate(m))
        nsteps_cap = int(math.ceil(t_cap / self.fan_step)) + 2
        pos, alive = _fast.fan_trace(
            m.family_code, m.params, float(x[0]), float(x[1]),
            np.ascontiguousarray(dirs), self.fan_step, trace_radius, t_cap,
            nsteps_cap)
        U, A = _resample_fan(
            m, pos, alive, (float(x[0]), float(x[1])), c_val, self.fan_step,
            etas[1] - etas[0], rho_grid, betas,
            self.cut.phi.r_zero + 0.02)
        entry = (rho_grid, betas, U, A)
        self._tables[key] = entry
        return entry

    def values(self, x, Z) -> np.ndarray:
        """k(x, z) over an offset array Z of shape (..., 2).

        The singular node z = 0 (and every offset with a dead cutoff) maps
        to 0; the Fourier front end replaces the z = 0 cell by its polar
        average.
        """
        x = np.asarray(x, dtype=float)
        Z = np.asarray(Z, dtype=float)
        psi = float(self.cut.psi(np.hypot(x[0], x[1])))
        rho = np.hypot(Z[..., 0], Z[..., 1])
        Y = x - Z
        phiv = self.cut.phi(np.hypot(Y[..., 0], Y[..., 1]))
        out = np.zeros(Z.shape[:-1])
        if psi == 0.0:
            return out
        live = (phiv > 0.0) & (rho > 0.0)
        if not live.any():
            return out
        if _is_flat(self.m):
            out[live] = 2.0 * psi * phiv[live] / rho[live]
            return out
        rho_grid, betas, U, A = self.table(x)
        beta = np.mod(np.arctan2(-Z[..., 1][live], -Z[..., 0][live]),
                      2.0 * np.pi)
        uu, aa = _polar_lookup(rho_grid, betas, U, A, rho[live], beta)
        cy = np.asarray(self.m.conformal_factor(Y[live]))
        out[live] = 2.0 * psi * aa * cy * phiv[live] / (rho[live] * uu)
        return out

    def cell_averages(self, x, centers, delta: float,
                      order: int = 4) -> np.ndarray:
        """Mean of k over square z-cells of side delta at the given centers.

        Gauss-Legendre product rule per cell; centers must exclude the
        singular cell at the origin (see cell_average for that one).  Used
        to clean up the plain-sample quadrature error near the kernel
        singularity, which otherwise leaves a flat error floor of order
        delta across the whole transform.
        """
        nodes, weights = np.polynomial.legendre.leggauss(order)
        nodes = 0.5 * delta * nodes
        w2 = np.outer(weights, weights).ravel() / 4.0
        offs = np.stack(np.meshgrid(nodes, nodes, indexing="ij"),
                        axis=-1).reshape(-1, 2)
        centers = np.asarray(centers, dtype=float)
        pts = centers[:, None, :] + offs[None, :, :]
        vals = self.values(x, pts)
        return vals @ w2

    def cell_average(self, x, delta: float) -> float:
        """Mean of k over the square z-cell of side delta centered at 0.

        In polar form the cell integral of k is the integral of h over
        (rho, beta) with rho up to the cell boundary, so for a small cell it
        is the limit profile h(x, 0, omega) integrated against the corner
        distance R(beta); the neglected term is O(delta) relative.
        """
        x = np.asarray(x, dtype=float)
        nq = 256
        beta = (np.arange(nq) + 0.5) * (2.0 * np.pi / nq)
        omegas = np.stack([np.cos(beta), np.sin(beta)], axis=-1)
        psi = float(self.cut.psi(np.hypot(x[0], x[1])))
        phiv = float(self.cut.phi(np.hypot(x[0], x[1])))
        if psi == 0.0 or phiv == 0.0:
            return 0.0
        h0 = (2.0 * psi * phiv * float(self.m.sqrt_det(x))
              / self.m.norm(x, omegas))
        R = 0.5 * delta / np.maximum(np.abs(np.cos(beta)),
                                     np.abs(np.sin(beta)))
        return float(np.sum(h0 * R) * (2.0 * np.pi / nq) / delta ** 2)
