"""Geodesic ray transform, backprojection, and the normal operator.

The normal operator (adjoint composed with forward map) is built along two
independent routes:

* ``normal_compose`` integrates the field along geodesic fans from each
  evaluation point (a literal adjoint-after-forward composition, no kernel
  machinery), while
* ``NormalOperator`` applies the equivalent weakly singular kernel in polar
  coordinates around each point, with distance and Jacobian correction
  tables precomputed over a coarse grid of fan centers.

Agreement between the two routes on band-limited fields is the main
consistency check of the whole pipeline; see ``verify_normal_identity``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _fast, geodesics
from .grids import (CutoffSpec, ScalarGrid, SinogramGrid,
                    smoothstep_coefficients)
from .metrics import MetricField

__all__ = [
    "BackprojectionGeometry",
    "NormalIdentityReport",
    "NormalOperator",
    "NormalTables",
    "WavePacket",
    "backproject",
    "backprojection_geometry",
    "build_normal_tables",
    "normal_compose",
    "normal_operator",
    "normal_point_quadrature",
    "verify_normal_identity",
    "xray",
]

# RK4 arc step used by the transform-side integrations.  The ray integrals
# are bilinear in the gridded field, so the step only needs to keep the
# fourth-order flow error below the interpolation error.
DEFAULT_RAY_STEP = 4e-3


def _ray_step(m: MetricField, step) -> float:
    if step is not None:
        return float(step)
    return DEFAULT_RAY_STEP


# ---------------------------------------------------------------------------
# forward transform


def xray(m: MetricField, f: ScalarGrid, n_theta: int = 180,
         n_alpha: int = 90, *, step=None) -> SinogramGrid:
    """Geodesic ray transform of a gridded field.

    Rays are indexed by boundary angle theta and fan angle alpha measured
    from the inward g-normal; each value is the integral of the bilinear
    interpolant of f along the unit-speed geodesic to its exit.
    """
    h = _ray_step(m, step)
    sino = SinogramGrid.empty(n_theta, n_alpha)
    thetas = sino.thetas()
    alphas = sino.alphas()
    pts, nu, tan, _ = geodesics.boundary_frame(m, thetas)
    ca = np.cos(alphas)
    sa = np.sin(alphas)
    # states[i, j] = (x_i, cos a_j nu_i + sin a_j tan_i)
    vel = (ca[None, :, None] * nu[:, None, :]
           + sa[None, :, None] * tan[:, None, :])
    states = np.concatenate([
        np.broadcast_to(pts[:, None, :], vel.shape), vel,
    ], axis=-1).reshape(-1, 4)
    rows = geodesics.batch_ray_integrals(
        m, states, f.values, f.origin, f.spacing, step=h)
    return SinogramGrid(rows[:, 0].reshape(n_theta, n_alpha))


# ---------------------------------------------------------------------------
# direction spheres at interior points


def _point_directions(m: MetricField, points: np.ndarray, n_dir: int):
    """g-unit directions and angle weights at many points.

    Returns (dirs (n, n_dir, 2), weights (n, n_dir)); weights sum to 2 pi
    per point.
    """
    n = points.shape[0]
    betas = 2.0 * np.pi * (np.arange(n_dir) + 0.5) / n_dir
    E = np.stack([np.cos(betas), np.sin(betas)], axis=-1)
    if m.conformal is not None:
        c = np.asarray(m.conformal_factor(points), dtype=float)
        dirs = E[None, :, :] / np.sqrt(c)[:, None, None]
        wts = np.full((n, n_dir), 2.0 * np.pi / n_dir)
        return dirs, wts
    dirs = np.empty((n, n_dir, 2))
    wts = np.empty((n, n_dir))
    for i in range(n):
        d, w = geodesics.sphere_directions(m, points[i], n_dir)
        dirs[i] = d
        wts[i] = w
    return dirs, wts


# ---------------------------------------------------------------------------
# backprojection


@dataclass(frozen=True)
class BackprojectionGeometry:
    """Precomputed ray-to-boundary lookup for a fixed point set.

    For each point x and direction omega_q the backward geodesic exits at
    boundary angle theta[i, q]; alpha[i, q] is the fan angle of the forward
    ray re-entering there.  The arrays are field independent, so one
    geometry serves any number of backprojections on the same points.
    """

    points: np.ndarray        # (n, 2)
    theta: np.ndarray         # (n, n_dir)
    alpha: np.ndarray         # (n, n_dir)
    weights: np.ndarray       # (n, n_dir) direction weights, sum 2 pi
    valid: np.ndarray         # (n, n_dir) bool

    @property
    def n_dir(self) -> int:
        return self.theta.shape[1]


def backprojection_geometry(m: MetricField, points: np.ndarray,
                            n_dir: int = 256, *, step=None,
                            chunk: int = 400_000) -> BackprojectionGeometry:
    """Trace the backward fans of every point once."""
    h = _ray_step(m, step)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    inside = np.hypot(points[:, 0], points[:, 1]) < m.radius - 1e-9
    dirs, wts = _point_directions(m, points, n_dir)

    theta = np.zeros((n, n_dir))
    alpha = np.zeros((n, n_dir))
    valid = np.zeros((n, n_dir), dtype=bool)

    idx = np.flatnonzero(inside)
    if idx.size:
        states = np.empty((idx.size * n_dir, 4))
        states[:, :2] = np.repeat(points[idx], n_dir, axis=0)
        states[:, 2:] = -dirs[idx].reshape(-1, 2)
        rows = np.empty((states.shape[0], 6))
        for lo in range(0, states.shape[0], chunk):
            hi_ = min(lo + chunk, states.shape[0])
            rows[lo:hi_] = geodesics.batch_exit_states(
                m, states[lo:hi_], step=h)
        q = rows[:, 1:3]
        u = -rows[:, 3:5]                      # forward entry velocity
        th = np.mod(np.arctan2(q[:, 1], q[:, 0]), 2.0 * np.pi)
        bp, bnu, btan, _ = geodesics.boundary_frame(m, th)
        # project q onto the boundary circle for frame consistency
        al = np.arctan2(m.inner(bp, u, btan), m.inner(bp, u, bnu))
        ok = rows[:, 5] > 0.5
        ok &= np.abs(al) < 0.5 * np.pi
        theta[idx] = th.reshape(idx.size, n_dir)
        alpha[idx] = al.reshape(idx.size, n_dir)
        valid[idx] = ok.reshape(idx.size, n_dir)
    return BackprojectionGeometry(points=points, theta=theta, alpha=alpha,
                                  weights=wts, valid=valid)


def backproject(m: MetricField, sino: SinogramGrid, target, *,
                n_dir: int = 256, geometry: BackprojectionGeometry | None
                = None, step=None, chunk_rows: int = 4096):
    """Adjoint of the ray transform w.r.t. the fan measure.

    target: a ScalarGrid (returns a grid on the same layout) or an (n, 2)
    point array (returns flat values).  The adjoint pairs the sinogram
    measure cos(alpha) d(arc) d(alpha) with the g-area on the disk, which
    makes the backprojection a plain average of boundary samples over the
    direction sphere at each point.
    """
    if isinstance(target, ScalarGrid):
        pts = target.mesh_points().reshape(-1, 2)
    else:
        pts = np.atleast_2d(np.asarray(target, dtype=float))
    if geometry is None:
        geometry = backprojection_geometry(m, pts, n_dir, step=step)
    elif geometry.points.shape[0] != pts.shape[0]:
        raise ValueError(
            "backprojection geometry was built for a different point set")
    out = np.zeros(pts.shape[0])
    for lo in range(0, pts.shape[0], chunk_rows):
        hi_ = min(lo + chunk_rows, pts.shape[0])
        vals = sino.sample(geometry.theta[lo:hi_], geometry.alpha[lo:hi_])
        vals = np.where(geometry.valid[lo:hi_], vals, 0.0)
        out[lo:hi_] = np.sum(vals * geometry.weights[lo:hi_], axis=1)
    if isinstance(target, ScalarGrid):
        return target.with_values(out.reshape(target.values.shape))
    return out


# ---------------------------------------------------------------------------
# normal operator, route A: adjoint-after-forward composition


def normal_compose(m: MetricField, f: ScalarGrid, points, *,
                   n_dir: int = 256, step=None,
                   chunk: int = 250_000) -> np.ndarray:
    """Normal operator by fan composition: 2 * sum_q w_q Int_0^tau f.

    Integrates the field along the forward geodesic from each point in
    every direction; the angular quadrature over the full g-circle doubles
    the half-ray integrals into the complete chords.
    """
    h = _ray_step(m, step)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    dirs, wts = _point_directions(m, points, n_dir)
    states = np.empty((n * n_dir, 4))
    states[:, :2] = np.repeat(points, n_dir, axis=0)
    states[:, 2:] = dirs.reshape(-1, 2)
    integ = np.empty(n * n_dir)
    for lo in range(0, states.shape[0], chunk):
        hi_ = min(lo + chunk, states.shape[0])
        rows = geodesics.batch_ray_integrals(
            m, states[lo:hi_], f.values, f.origin, f.spacing, step=h)
        integ[lo:hi_] = rows[:, 0]
    return 2.0 * np.sum(integ.reshape(n, n_dir) * wts, axis=1)


# ---------------------------------------------------------------------------
# normal operator, route B: singular kernel with fan tables


@dataclass(frozen=True)
class NormalTables:
    """Distance and Jacobian corrections on fans around coarse centers.

    u[i, j, l, q] = d_g(c_ij, c_ij + rho_l w_q) / rho_l  (ratio to the
    Euclidean offset), a[i, j, l, q] = inverse metric Jacobian of the
    exponential map at the same offset.  Both are smooth, so float32 on a
    coarse grid suffices; the kernel quadrature reads them quadrilinearly.
    """

    origin: tuple          # (cx0, cy0) of the center grid
    spacing: float
    rho_max: float
    u: np.ndarray          # (ncx, ncy, nr_t, nb_t) float32
    a: np.ndarray

    @property
    def n_rho(self) -> int:
        return self.u.shape[2]

    @property
    def n_beta(self) -> int:
        return self.u.shape[3]


def build_normal_tables(m: MetricField, *, span: float = 1.1,
                        n_centers: int = 17, n_dir: int = 256,
                        n_rho: int = 128, n_beta: int = 192,
                        rho_max: float = 1.95, fan_step: float = 4e-3,
                        build_radius: float = 1.15,
                        coverage_radius: float = 1.23,
                        trace_radius: float | None = None) -> NormalTables:
    """Trace geodesic fans from a coarse center grid and tabulate U, A.

    Only centers within build_radius carry real fans (the rest are never
    read: evaluation points sit inside the cutoff support, well away from
    the outer centers).  Fans are traced in the ambient extension of the
    metric formula, which is defined beyond the collar for every builtin
    family, so cells out to coverage_radius are filled with true values.
    """
    if not (m.has_fast_path and m.conformal is not None):
        raise ValueError(
            "kernel-route tables need a builtin conformal metric family; "
            "use the composition route for generic callables")
    centers_1d = np.linspace(-span, span, n_centers)
    ch = centers_1d[1] - centers_1d[0]
    if trace_radius is None:
        # strongly curved families may need more head room, see the tests
        trace_radius = max(1.30, m.extended_radius)
    # arc length needed to span a Euclidean offset scales with sqrt(c)
    t_cap = max(1.35 * rho_max, 1.05 * geodesics.diameter_estimate(m))
    nsteps_cap = int(math.ceil(t_cap / fan_step)) + 2

    etas = 2.0 * np.pi * np.arange(n_dir) / n_dir
    E = np.stack([np.cos(etas), np.sin(etas)], axis=-1)
    rho = np.linspace(0.0, rho_max, n_rho)
    betas = 2.0 * np.pi * np.arange(n_beta) / n_beta
    two_pi = 2.0 * np.pi

    utab = np.ones((n_centers, n_centers, n_rho, n_beta), dtype=np.float32)
    atab = np.ones_like(utab)
    deta = etas[1] - etas[0]

    for ix, cx in enumerate(centers_1d):
        for iy, cy in enumerate(centers_1d):
            if math.hypot(cx, cy) > build_radius:
                continue
            c_val = float(m.conformal_factor(np.array([cx, cy])))
            dirs = np.ascontiguousarray(E / math.sqrt(c_val))
            pos, alive = _fast.fan_trace(
                m.family_code, m.params, cx, cy, dirs, fan_step,
                trace_radius, t_cap, nsteps_cap)
            U, A = _resample_fan(
                m, pos, alive, (cx, cy), c_val, fan_step, deta, rho, betas,
                coverage_radius)
            utab[ix, iy] = U
            atab[ix, iy] = A

    return NormalTables(origin=(centers_1d[0], centers_1d[0]), spacing=ch,
                        rho_max=rho_max, u=utab, a=atab)


def _resample_fan(m, pos, alive, center, c_val, h, deta, rho, betas,
                  coverage_radius):
    """One fan -> (U, A) tables on the common (rho, beta) grid."""
    nd, cap, _ = pos.shape
    n_rho = rho.shape[0]
    n_beta = betas.shape[0]
    cx, cy = center

    # Jacobian factor along each ray at the step times, by angular-neighbor
    # differencing of the fan (the neighbor rows share the time axis).
    t = h * np.arange(cap)
    jx = (np.roll(pos[:, :, 0], -1, axis=0) - np.roll(pos[:, :, 0], 1, axis=0))
    jy = (np.roll(pos[:, :, 1], -1, axis=0) - np.roll(pos[:, :, 1], 1, axis=0))
    jx /= 2.0 * deta
    jy /= 2.0 * deta
    vx = np.gradient(pos[:, :, 0], h, axis=1)
    vy = np.gradient(pos[:, :, 1], h, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        det = (vx * jy - vy * jx) / t[None, :]
    cvals = np.asarray(m.conformal_factor(pos))
    with np.errstate(divide="ignore", invalid="ignore"):
        a_steps = 1.0 / (det * cvals)
    a_steps[:, 0] = 1.0

    # usable prefix per ray: the central differences above need both
    # angular neighbors and the next time sample, and the fan inversion
    # needs the Euclidean radius to keep increasing
    nb_alive = np.minimum(np.roll(alive, 1), np.roll(alive, -1))
    limit = np.minimum(alive - 1, nb_alive)
    off = pos - np.array([cx, cy])
    rr = np.hypot(off[:, :, 0], off[:, :, 1])

    etas = deta * np.arange(nd)
    U = np.ones((n_rho, n_beta))
    A = np.ones((n_rho, n_beta))
    knot_theta = np.empty((nd,))
    uk = np.empty((n_rho, nd))
    ak = np.empty((n_rho, nd))
    thk = np.empty((n_rho, nd))
    reach = np.empty(nd)

    for k in range(nd):
        L = int(limit[k])
        rk = rr[k, :L]
        mono = np.diff(rk) > 0
        if not mono.all():
            L = int(np.argmin(mono)) + 1
            rk = rk[:L]
        reach[k] = rk[-1]
        tk = np.interp(rho, rk, t[:L])
        xk = np.interp(rho, rk, off[k, :L, 0])
        yk = np.interp(rho, rk, off[k, :L, 1])
        with np.errstate(divide="ignore", invalid="ignore"):
            uk[:, k] = tk / rho
        uk[0, k] = math.sqrt(c_val)
        ak[:, k] = np.interp(rho, rk, a_steps[k, :L])
        ak[0, k] = 1.0
        th = np.arctan2(yk, xk)
        delta = np.mod(th - etas[k] + np.pi, 2.0 * np.pi) - np.pi
        thk[:, k] = etas[k] + delta
        thk[0, k] = etas[k]

    # invert the fan per radius row: interpolate over the knot angles
    for l in range(1, n_rho):
        ok = reach >= rho[l]
        need = np.hypot(cx + rho[l] * np.cos(betas),
                        cy + rho[l] * np.sin(betas)) <= coverage_radius
        if not ok.any():
            if need.any():
                raise RuntimeError(
                    f"fan from ({cx:.3f},{cy:.3f}) does not reach radius "
                    f"{rho[l]:.3f} required for kernel coverage")
            continue
        kth = thk[l, ok]
        kuu = uk[l, ok]
        kaa = ak[l, ok]
        order = np.argsort(kth)
        kth = kth[order]
        kuu = kuu[order]
        kaa = kaa[order]
        if need.any() and ok.sum() < nd:
            # every needed angle must have a nearby surviving knot
            gap = np.diff(np.concatenate([kth, [kth[0] + 2 * np.pi]]))
            pos_in = np.searchsorted(kth, betas[need])
            if np.max(gap[np.clip(pos_in - 1, 0, gap.size - 1)]) > 4 * deta:
                raise RuntimeError(
                    f"fan from ({cx:.3f},{cy:.3f}) leaves an angular gap at "
                    f"radius {rho[l]:.3f}")
        xp = np.concatenate([kth - 2 * np.pi, kth, kth + 2 * np.pi])
        U[l] = np.interp(betas, xp, np.tile(kuu, 3))
        A[l] = np.interp(betas, xp, np.tile(kaa, 3))
    U[0] = math.sqrt(c_val)
    A[0] = 1.0
    if not (np.all(np.isfinite(U)) and np.all(U > 0.0)):
        raise RuntimeError("fan table produced a non-positive distance ratio")
    return U, A


def _simpson_weights(n: int, dx: float) -> np.ndarray:
    if n < 3 or n % 2 == 0:
        raise ValueError("Simpson rule needs an odd number of nodes >= 3")
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (dx / 3.0)


@dataclass(frozen=True)
class WavePacket:
    """Gaussian-windowed cosine, evaluated analytically where needed."""

    center: tuple
    sigma: float
    kvec: tuple

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        d = pts - np.asarray(self.center)
        r2 = np.sum(d * d, axis=-1)
        phase = pts[..., 0] * self.kvec[0] + pts[..., 1] * self.kvec[1]
        return np.exp(-r2 / (2.0 * self.sigma ** 2)) * np.cos(phase)

    @property
    def freq(self) -> float:
        return float(np.hypot(*self.kvec))


class NormalOperator:
    """Kernel-route normal operator on a fixed metric and cutoff family.

    Applies psi(x) * 2 Int a(x,y) d_g(x,y)^(-1) phi(|y|) f(y) dVol_g(y)
    by polar quadrature around each evaluation point: Simpson in the
    Euclidean offset radius (the area element cancels the kernel
    singularity), periodic trapezoid in the offset angle.
    """

    def __init__(self, m: MetricField, cutoffs: CutoffSpec | None = None, *,
                 n_rho: int = 129, n_beta: int = 256, rho_max: float = 1.95,
                 tables: NormalTables | None = None):
        if cutoffs is None:
            cutoffs = CutoffSpec.default()
        if not m.has_fast_path:
            raise ValueError(
                "the kernel route requires a builtin metric family; "
                "normal_compose works for generic callables")
        if m.family_code != _fast.FAMILY_EUCLIDEAN and tables is None:
            raise ValueError("curved metrics need precomputed fan tables")
        self.metric = m
        self.cutoffs = cutoffs
        self.rho = np.linspace(0.0, rho_max, n_rho)
        self.wrho = _simpson_weights(n_rho, self.rho[1] - self.rho[0])
        beta = 2.0 * np.pi * (np.arange(n_beta) + 0.5) / n_beta
        self.beta = beta
        self.wdir = np.full(n_beta, 2.0 * np.pi / n_beta)
        self.dirx = np.cos(beta)
        self.diry = np.sin(beta)
        self.tables = tables
        self._ss_coef = smoothstep_coefficients(cutoffs.order)
        if tables is not None:
            if tables.rho_max < rho_max - 1e-12:
                raise ValueError("tables cover a smaller radius than the "
                                 "quadrature needs")
            drt = tables.rho_max / (tables.n_rho - 1)
            sr = self.rho / drt
            self._tab_ir = np.minimum(sr.astype(np.int64), tables.n_rho - 2)
            self._tab_wr = sr - self._tab_ir
            dbt = 2.0 * np.pi / tables.n_beta
            sb = beta / dbt
            ib0 = np.floor(sb).astype(np.int64) % tables.n_beta
            self._tab_ib0 = ib0
            self._tab_ib1 = (ib0 + 1) % tables.n_beta
            self._tab_wb = sb - np.floor(sb)
            self._use_tables = 1
            self._utab = tables.u
            self._atab = tables.a
            self._tc = (tables.origin[0], tables.origin[1], tables.spacing)
        else:
            nr, nb = n_rho, n_beta
            self._tab_ir = np.zeros(nr, dtype=np.int64)
            self._tab_wr = np.zeros(nr)
            self._tab_ib0 = np.zeros(nb, dtype=np.int64)
            self._tab_ib1 = np.zeros(nb, dtype=np.int64)
            self._tab_wb = np.zeros(nb)
            self._use_tables = 0
            self._utab = np.ones((2, 2, 2, 2), dtype=np.float32)
            self._atab = np.ones((2, 2, 2, 2), dtype=np.float32)
            self._tc = (0.0, 0.0, 1.0)

    # -- helpers -----------------------------------------------------------

    def _points_and_psi(self, points):
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
        psi = self.cutoffs.psi(np.hypot(pts[:, 0], pts[:, 1]))
        return pts, np.ascontiguousarray(psi, dtype=float)

    def _common_args(self):
        phi = self.cutoffs.phi
        return (self.rho, self.wrho, self.wdir, self.dirx, self.diry,
                phi.r_one, phi.r_zero, self._ss_coef,
                self._use_tables, self._utab, self._atab,
                self._tc[0], self._tc[1], self._tc[2],
                self._tab_ir, self._tab_wr,
                self._tab_ib0, self._tab_ib1, self._tab_wb)

    # -- application -------------------------------------------------------

    def apply(self, f: ScalarGrid, points=None):
        """N f at the given points (default: the nodes of f's own grid)."""
        on_grid = points is None
        if on_grid:
            points = f.mesh_points().reshape(-1, 2)
        pts, psi = self._points_and_psi(points)
        vals = _fast.normal_apply(
            self.metric.family_code, self.metric.params,
            pts[:, 0].copy(), pts[:, 1].copy(), psi,
            np.ascontiguousarray(f.values), f.origin[0], f.origin[1],
            f.spacing, *self._common_args())
        if on_grid:
            return f.with_values(vals.reshape(f.values.shape))
        return vals

    def apply_packet(self, packet: WavePacket, points) -> np.ndarray:
        """N applied to an analytic wave packet (no grid interpolation)."""
        pts, psi = self._points_and_psi(points)
        return _fast.normal_apply_packet(
            self.metric.family_code, self.metric.params,
            pts[:, 0].copy(), pts[:, 1].copy(), psi,
            packet.center[0], packet.center[1], packet.sigma,
            packet.kvec[0], packet.kvec[1], *self._common_args())

    def matrix(self, points, layout: ScalarGrid) -> np.ndarray:
        """Dense (n_points, nx*ny) matrix w.r.t. grid node values."""
        pts, psi = self._points_and_psi(points)
        nx, ny = layout.values.shape
        return _fast.normal_matrix(
            self.metric.family_code, self.metric.params,
            pts[:, 0].copy(), pts[:, 1].copy(), psi,
            layout.origin[0], layout.origin[1], layout.spacing, nx, ny,
            *self._common_args())


def normal_operator(m: MetricField, cutoffs: CutoffSpec | None = None, *,
                    n_rho: int = 129, n_beta: int = 256,
                    rho_max: float = 1.95,
                    tables: NormalTables | None = None,
                    table_opts: dict | None = None) -> NormalOperator:
    """Construct the kernel-route operator, building fan tables on demand."""
    if (tables is None and m.has_fast_path
            and m.family_code != _fast.FAMILY_EUCLIDEAN):
        tables = build_normal_tables(m, rho_max=rho_max,
                                     **(table_opts or {}))
    return NormalOperator(m, cutoffs, n_rho=n_rho, n_beta=n_beta,
                          rho_max=rho_max, tables=tables)


def normal_point_quadrature(m: MetricField, f, x, *, n_rho: int = 1025,
                            n_beta: int = 64, rho_max: float = 1.95,
                            cutoffs: CutoffSpec | None = None,
                            tables: NormalTables | None = None) -> float:
    """High-resolution single-point quadrature with a callable field.

    Useful for validating the kernel route against closed forms (e.g. the
    flat-metric value at the center of a radial field).  Cutoffs default
    to none (psi = phi = 1).
    """
    x = np.asarray(x, dtype=float)
    rho = np.linspace(0.0, rho_max, n_rho)
    wr = _simpson_weights(n_rho, rho[1] - rho[0])
    beta = 2.0 * np.pi * (np.arange(n_beta) + 0.5) / n_beta
    wb = 2.0 * np.pi / n_beta
    ox = np.cos(beta)[None, :] * rho[:, None]
    oy = np.sin(beta)[None, :] * rho[:, None]
    y = np.stack([x[0] + ox, x[1] + oy], axis=-1)
    fv = np.asarray(f(y), dtype=float)
    ry = np.hypot(y[..., 0], y[..., 1])
    if cutoffs is not None:
        fv = fv * cutoffs.phi(ry)
        psi = float(cutoffs.psi(np.hypot(*x)))
    else:
        psi = 1.0
    if m.conformal is not None:
        cvals = np.asarray(m.conformal_factor(y), dtype=float)
    else:
        cvals = np.ones_like(ry)
    if m.family_code == _fast.FAMILY_EUCLIDEAN:
        U = np.ones_like(ry)
        A = np.ones_like(ry)
    elif tables is not None:
        U, A = _tables_at(tables, x, rho, beta)
    else:
        raise ValueError("curved metrics need fan tables here as well")
    integrand = A * cvals * fv / U
    return 2.0 * psi * float(wr @ integrand @ np.full(n_beta, wb))


def _tables_at(tables: NormalTables, x, rho, beta):
    """Quadrilinear table evaluation (numpy mirror of the fast kernel)."""
    sx = (x[0] - tables.origin[0]) / tables.spacing
    sy = (x[1] - tables.origin[1]) / tables.spacing
    icx = int(np.clip(math.floor(sx), 0, tables.u.shape[0] - 2))
    icy = int(np.clip(math.floor(sy), 0, tables.u.shape[1] - 2))
    wx = min(max(sx - icx, 0.0), 1.0)
    wy = min(max(sy - icy, 0.0), 1.0)
    drt = tables.rho_max / (tables.n_rho - 1)
    sr = np.clip(rho / drt, 0, tables.n_rho - 1 - 1e-9)
    ir = sr.astype(np.int64)
    wr = sr - ir
    dbt = 2.0 * np.pi / tables.n_beta
    sb = beta / dbt
    ib0 = np.floor(sb).astype(np.int64) % tables.n_beta
    ib1 = (ib0 + 1) % tables.n_beta
    wb = sb - np.floor(sb)

    def read(tab):
        c = ((1 - wx) * (1 - wy) * tab[icx, icy]
             + (1 - wx) * wy * tab[icx, icy + 1]
             + wx * (1 - wy) * tab[icx + 1, icy]
             + wx * wy * tab[icx + 1, icy + 1]).astype(float)
        rlo = c[ir][:, ib0] * (1 - wb)[None, :] + c[ir][:, ib1] * wb[None, :]
        rhi = (c[np.minimum(ir + 1, tables.n_rho - 1)][:, ib0]
               * (1 - wb)[None, :]
               + c[np.minimum(ir + 1, tables.n_rho - 1)][:, ib1]
               * wb[None, :])
        return rlo * (1 - wr)[:, None] + rhi * wr[:, None]

    return read(tables.u), read(tables.a)


# ---------------------------------------------------------------------------
# the dual-route consistency check


@dataclass(frozen=True)
class NormalIdentityReport:
    metric: str
    rel_errors: np.ndarray
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return float(np.max(self.rel_errors))

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def trial_fields(grid: ScalarGrid, trials: int, seed: int, *,
                 support: float = 0.68, k_max: int = 8) -> list[np.ndarray]:
    """Seeded band-limited trial fields compactly supported in the disk."""
    from .grids import RadialCutoff
    rng = np.random.default_rng(seed)
    pts = grid.mesh_points()
    r = np.hypot(pts[..., 0], pts[..., 1])
    window = RadialCutoff(0.45, support, 4)(r)
    dxi = 2.0 * np.pi / (grid.spacing * grid.values.shape[0])
    out = []
    for _ in range(trials):
        f = np.zeros(grid.values.shape)
        n_modes = rng.integers(3, 7)
        for _ in range(n_modes):
            while True:
                kx, ky = rng.integers(-k_max, k_max + 1, size=2)
                if kx * kx + ky * ky <= k_max * k_max:
                    break
            amp = rng.uniform(0.3, 1.0)
            phase = rng.uniform(0, 2 * np.pi)
            f += amp * np.cos(dxi * (kx * pts[..., 0] + ky * pts[..., 1])
                              + phase)
        out.append(f * window)
    return out


def verify_normal_identity(m: MetricField, *, resolution: int = 128,
                           trials: int = 5, seed: int = 0,
                           n_dir: int = 256, eval_stride: int = 3,
                           tolerance: float = 2e-2,
                           operator: NormalOperator | None = None,
                           step=None) -> NormalIdentityReport:
    """Compare the two normal-operator routes on random band-limited fields.

    The composition route integrates geodesic fans through the gridded
    field; the kernel route applies the tabulated singular kernel.  Errors
    are L2 over the evaluation set, relative to the L2 norm of the field.
    """
    grid = ScalarGrid.square(resolution)
    if operator is None:
        operator = normal_operator(m)
    pts = grid.mesh_points()[::eval_stride, ::eval_stride].reshape(-1, 2)
    keep = np.hypot(pts[:, 0], pts[:, 1]) <= operator.cutoffs.region_radius \
        - 0.05
    pts = pts[keep]
    h_eval = grid.spacing * eval_stride
    rels = []
    for fvals in trial_fields(grid, trials, seed):
        f = grid.with_values(fvals)
        a = normal_compose(m, f, pts, n_dir=n_dir, step=step)
        b = operator.apply(f, pts)
        num = h_eval * math.sqrt(float(np.sum((a - b) ** 2)))
        den = grid.spacing * math.sqrt(float(np.sum(fvals ** 2)))
        rels.append(num / den)
    rels = np.asarray(rels)
    return NormalIdentityReport(metric=m.name, rel_errors=rels,
                                tolerance=tolerance)
