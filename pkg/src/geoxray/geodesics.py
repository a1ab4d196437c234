"""Geodesic flow on a metric field: tracing, exp/log maps, simplicity checks.

All rays are integrated with fixed-step RK4; boundary crossings are resolved
by bisecting the final step to 1e-10. Built-in metric families run through
compiled kernels, anything else falls back to vectorized numpy of the same
scheme.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _fast
from .metrics import MetricField

__all__ = [
    "RayPath",
    "SimplicityReport",
    "default_step",
    "diameter_estimate",
    "trace_geodesic",
    "exit_time",
    "exit_state",
    "trace_fixed_time",
    "exp_map",
    "log_map",
    "geo_distance",
    "jacobian_factor",
    "check_simplicity",
    "boundary_frame",
    "sphere_directions",
    "batch_exit_states",
    "batch_ray_integrals",
]

STEP_DIVISOR = 2000       # default step = diameter_estimate / STEP_DIVISOR
TMAX_FACTOR = 100.0       # non-trapping horizon = TMAX_FACTOR * diameter
NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50


@dataclass(frozen=True)
class RayPath:
    """A sampled unit-speed geodesic. The last sample is the exit state."""

    times: np.ndarray        # (n,)
    points: np.ndarray       # (n, 2)
    velocities: np.ndarray   # (n, 2)
    exit_time: float
    exited: bool

    def __len__(self) -> int:
        return self.times.shape[0]


@dataclass(frozen=True)
class SimplicityReport:
    convex_boundary: bool
    nontrapping: bool
    no_conjugate_points: bool
    min_boundary_curvature: float
    max_exit_time: float
    horizon: float
    conjugate_witness: tuple[float, float, float] | None
    # witness = (boundary angle, direction angle, parameter of first
    # vanishing of the Jacobi determinant), when a conjugate point was found

    @property
    def simple(self) -> bool:
        return (self.convex_boundary and self.nontrapping
                and self.no_conjugate_points)


def diameter_estimate(m: MetricField) -> float:
    """Crude upper-ish bound for the geodesic diameter of the ball.

    2 * R_ext * sup sqrt(largest eigenvalue of g), sampled on a grid. Only
    used to size steps and the non-trapping horizon.
    """
    r = m.extended_radius
    s = np.linspace(-r, r, 41)
    xx, yy = np.meshgrid(s, s, indexing="ij")
    pts = np.stack([xx, yy], axis=-1).reshape(-1, 2)
    pts = pts[np.sum(pts * pts, axis=1) <= r * r]
    g = m.metric(pts)
    lam = np.linalg.eigvalsh(g)[..., -1]
    return 2.0 * r * float(np.sqrt(lam.max()))


def default_step(m: MetricField) -> float:
    return diameter_estimate(m) / STEP_DIVISOR


def _resolve(m, step, radius, t_max):
    diam = diameter_estimate(m)
    if step is None:
        step = diam / STEP_DIVISOR
    if radius is None:
        radius = m.radius
    if t_max is None:
        t_max = TMAX_FACTOR * diam
    return step, radius, t_max


def _check_inside(m, x, radius):
    # exit states produced by the bisection sit up to ~1e-10 outside
    if float(np.hypot(x[0], x[1])) > radius + 1e-9:
        raise ValueError(
            f"point {x!r} lies outside the ball of radius {radius:g}")


def _unit_velocity(m, x, v):
    n = float(m.norm(x, v))
    if n == 0.0 or not math.isfinite(n):
        raise ValueError("velocity must be nonzero and finite")
    return np.asarray(v, dtype=float) / n


# ---------------------------------------------------------------------------
# numpy fallback integrators (generic metrics)


def _np_accel(m, x, v):
    return m.geodesic_accel(x, v)


def _np_rk4(m, x, v, h):
    k1x, k1v = v, _np_accel(m, x, v)
    k2x = v + 0.5 * h * k1v
    k2v = _np_accel(m, x + 0.5 * h * k1x, k2x)
    k3x = v + 0.5 * h * k2v
    k3v = _np_accel(m, x + 0.5 * h * k2x, k3x)
    k4x = v + h * k3v
    k4v = _np_accel(m, x + h * k3x, k4x)
    return (x + (h / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x),
            v + (h / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v))


def _np_exit_single(m, x, v, h, radius, tmax):
    """Scalar exit computation, generic-metric path."""
    x = np.array(x, dtype=float)
    v = np.array(v, dtype=float)
    r2 = radius * radius
    if x @ x >= r2 - 1e-14 and x @ v >= 0.0:
        return 0.0, x, v, True
    t = 0.0
    while t < tmax:
        hh = min(h, tmax - t)
        xn, vn = _np_rk4(m, x[None], v[None], hh)
        xn, vn = xn[0], vn[0]
        if xn @ xn > r2:
            lo, hi = 0.0, hh
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                xm, _ = _np_rk4(m, x[None], v[None], mid)
                if xm[0] @ xm[0] > r2:
                    hi = mid
                else:
                    lo = mid
                if hi - lo < _fast.EXIT_BISECT_TOL:
                    break
            xn, vn = _np_rk4(m, x[None], v[None], hi)
            return t + hi, xn[0], vn[0], True
        x, v, t = xn, vn, t + hh
    return tmax, x, v, False


def _np_flow_fixed(m, x, v, T, h, cap):
    x = np.array(x, dtype=float)
    v = np.array(v, dtype=float)
    t = 0.0
    cap2 = cap * cap
    while t < T:
        hh = min(h, T - t)
        xn, vn = _np_rk4(m, x[None], v[None], hh)
        x, v = xn[0], vn[0]
        t += hh
        if x @ x > cap2:
            raise ValueError("geodesic left the extended ball during exp")
    return x, v


# ---------------------------------------------------------------------------
# public single-ray operations


def trace_geodesic(m: MetricField, x, v, *, step=None, radius=None,
                   t_max=None) -> RayPath:
    """Unit-speed geodesic from x in direction v until it exits the ball.

    v is renormalized to unit g-norm. If the ray has not exited by t_max it
    is reported with exited=False (trapping guard).
    """
    step, radius, t_max = _resolve(m, step, radius, t_max)
    x = np.asarray(x, dtype=float)
    _check_inside(m, x, radius)
    v = _unit_velocity(m, x, v)
    if m.has_fast_path:
        cap = int(math.ceil(t_max / step)) + 3
        out_t = np.empty(cap)
        out_x = np.empty((cap, 2))
        out_v = np.empty((cap, 2))
        n, tau, ex = _fast.trace_record(
            m.family_code, m.params, x[0], x[1], v[0], v[1],
            step, radius, t_max, out_t, out_x, out_v)
        return RayPath(out_t[:n].copy(), out_x[:n].copy(), out_v[:n].copy(),
                       float(tau), bool(ex))
    ts = [0.0]
    xs = [x.copy()]
    vs = [v.copy()]
    tau, qx, qv, ex = _np_exit_single(m, x, v, step, radius, t_max)
    # regenerate interior samples (generic path keeps it simple)
    t = 0.0
    xi, vi = x.copy(), v.copy()
    while t + step < tau:
        xn, vn = _np_rk4(m, xi[None], vi[None], step)
        xi, vi = xn[0], vn[0]
        t += step
        ts.append(t)
        xs.append(xi.copy())
        vs.append(vi.copy())
    ts.append(tau)
    xs.append(qx)
    vs.append(qv)
    return RayPath(np.array(ts), np.array(xs), np.array(vs), float(tau),
                   bool(ex))


def exit_state(m: MetricField, x, v, *, step=None, radius=None, t_max=None):
    """(tau, exit point, exit velocity, exited) for the unit-speed ray."""
    step, radius, t_max = _resolve(m, step, radius, t_max)
    x = np.asarray(x, dtype=float)
    _check_inside(m, x, radius)
    v = _unit_velocity(m, x, v)
    if m.has_fast_path:
        tau, qx, qy, wx, wy, ex = _fast.exit_state(
            m.family_code, m.params, x[0], x[1], v[0], v[1],
            step, radius, t_max)
        return float(tau), np.array([qx, qy]), np.array([wx, wy]), bool(ex)
    tau, q, w, ex = _np_exit_single(m, x, v, step, radius, t_max)
    return float(tau), q, w, bool(ex)


def exit_time(m: MetricField, x, v, **kw) -> float:
    return exit_state(m, x, v, **kw)[0]


def trace_fixed_time(m: MetricField, x, v, T, *, step=None):
    """Affine-parameter flow for exactly time T (no boundary stop).

    Raises if the trajectory leaves the extended ball.
    """
    if step is None:
        step = default_step(m)
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    cap = m.extended_radius
    if m.has_fast_path:
        x0, x1, v0, v1, ok = _fast.flow_fixed_time(
            m.family_code, m.params, x[0], x[1], v[0], v[1],
            float(T), step, cap)
        if not ok:
            raise ValueError("geodesic left the extended ball during exp")
        return np.array([x0, x1]), np.array([v0, v1])
    return _np_flow_fixed(m, x, v, float(T), step, cap)


def exp_map(m: MetricField, x, w, *, step=None) -> np.ndarray:
    """exp_x(w): flow from x with initial velocity w for unit time.

    Computed as the unit-speed ray in direction w traced for |w|_g.
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    L = float(m.norm(x, w))
    if L == 0.0:
        return x.copy()
    v = w / L
    p, _ = trace_fixed_time(m, x, v, L, step=step)
    return p


def log_map(m: MetricField, x, y, *, step=None) -> np.ndarray:
    """Inverse of exp_x by damped Newton shooting from the Euclidean chord.

    Converges to |exp_x(w) - y| <= 1e-10 or raises.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_inside(m, x, m.radius)
    _check_inside(m, y, m.radius)
    w = y - x
    if float(np.hypot(*w)) < 1e-14:
        return np.zeros(2)
    fd = 1e-6

    def resid(wv):
        return exp_map(m, x, wv, step=step) - y

    F = resid(w)
    fnorm = float(np.max(np.abs(F)))
    for _ in range(NEWTON_MAX_ITER):
        if fnorm <= NEWTON_TOL:
            return w
        J = np.empty((2, 2))
        for i in range(2):
            dw = np.zeros(2)
            dw[i] = fd
            J[:, i] = (resid(w + dw) - resid(w - dw)) / (2 * fd)
        try:
            delta = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as err:
            raise ValueError(f"log map shooting Jacobian singular at {x} -> {y}") from err
        lam = 1.0
        for _ in range(30):
            w_new = w + lam * delta
            F_new = resid(w_new)
            fn = float(np.max(np.abs(F_new)))
            if fn < fnorm:
                w, F, fnorm = w_new, F_new, fn
                break
            lam *= 0.5
        else:
            raise ValueError(
                f"log map line search stalled at {x} -> {y} (resid {fnorm:.2e})")
    if fnorm <= NEWTON_TOL:
        return w
    raise ValueError(
        f"log map did not converge for {x} -> {y} (resid {fnorm:.2e})")


def geo_distance(m: MetricField, x, y, *, step=None) -> float:
    """Geodesic distance via the log map (simple metrics only)."""
    w = log_map(m, x, y, step=step)
    return float(m.norm(np.asarray(x, dtype=float), w))


def jacobian_factor(m: MetricField, x, y, *, step=None, w=None) -> float:
    """Inverse Riemannian Jacobian determinant of exp_x at the preimage of y.

    Central differences of the exp map around w = log_map(x, y); the
    determinant is taken w.r.t. the metric volumes at x and y, so the
    Euclidean value is exactly 1.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if w is None:
        w = log_map(m, x, y, step=step)
    h = 1e-5 * (1.0 + float(np.hypot(*w)))
    D = np.empty((2, 2))
    for i in range(2):
        dw = np.zeros(2)
        dw[i] = h
        D[:, i] = (exp_map(m, x, w + dw, step=step)
                   - exp_map(m, x, w - dw, step=step)) / (2 * h)
    det = float(np.linalg.det(D))
    vol = float(m.sqrt_det(y) / m.sqrt_det(x))
    jac = det * vol
    if jac <= 0.0:
        raise ValueError(
            f"exp map degenerate between {x} and {y} (det {jac:.3e})")
    return 1.0 / jac


# ---------------------------------------------------------------------------
# boundary frames and sphere quadrature


def boundary_frame(m: MetricField, theta: np.ndarray):
    """g-orthonormal frame at boundary points of the unit ball.

    Returns (points, nu, tan, darc): inward g-unit normal, g-unit tangent,
    and the g-arclength density |d point/d theta|_g. Shapes (..., 2) / (...,).
    """
    theta = np.asarray(theta, dtype=float)
    p = np.stack([np.cos(theta), np.sin(theta)], axis=-1) * m.radius
    t_e = np.stack([-np.sin(theta), np.cos(theta)], axis=-1) * m.radius
    darc = m.norm(p, t_e)
    tan = t_e / darc[..., None]
    w = -p / m.radius  # Euclidean inward normal
    # Gram-Schmidt against tan, then normalize; keep inward orientation
    w = w - m.inner(p, w, tan)[..., None] * tan
    nu = w / m.norm(p, w)[..., None]
    return p, nu, tan, darc


def sphere_directions(m: MetricField, x, n_dirs: int):
    """Quadrature of the g-unit circle at x: directions and weights.

    Directions are the g-normalized Euclidean angles; weights approximate the
    g-arclength of the unit circle (summing to 2 pi for any metric). For
    conformal metrics the Euclidean-angle parameterization has unit speed, so
    the weights are exactly 2 pi / n.
    """
    x = np.asarray(x, dtype=float)
    betas = 2.0 * np.pi * np.arange(n_dirs) / n_dirs
    E = np.stack([np.cos(betas), np.sin(betas)], axis=-1)
    if m.conformal is not None:
        c = float(m.conformal_factor(x))
        dirs = E / math.sqrt(c)
        w = np.full(n_dirs, 2.0 * np.pi / n_dirs)
        return dirs, w
    xs = np.broadcast_to(x, (n_dirs, 2))
    dirs = m.unit(xs, E)
    db = 2.0 * np.pi / n_dirs
    dpl = m.unit(xs, np.stack([np.cos(betas + 1e-6), np.sin(betas + 1e-6)],
                              axis=-1))
    dmi = m.unit(xs, np.stack([np.cos(betas - 1e-6), np.sin(betas - 1e-6)],
                              axis=-1))
    speed = m.norm(xs, (dpl - dmi) / 2e-6)
    return dirs, speed * db


# ---------------------------------------------------------------------------
# batch drivers (used by the transform pipelines)


def batch_exit_states(m: MetricField, states: np.ndarray, *, step=None,
                      radius=None, t_max=None) -> np.ndarray:
    """Exit rows (tau, qx, qy, wx, wy, exited) for (n, 4) phase states.

    Velocities are renormalized to unit g-speed, matching exit_state.
    """
    step, radius, t_max = _resolve(m, step, radius, t_max)
    states = np.array(states, dtype=float)
    g = m.eval_fn(states[:, :2])
    speed = np.sqrt(np.einsum("nij,ni,nj->n", g, states[:, 2:], states[:, 2:]))
    states[:, 2:] /= speed[:, None]
    states = np.ascontiguousarray(states)
    if m.has_fast_path:
        return _fast.batch_exit(m.family_code, m.params, states, step,
                                radius, t_max)
    out = np.empty((states.shape[0], 6))
    for i, s in enumerate(states):
        tau, q, w, ex = _np_exit_single(m, s[:2], s[2:], step, radius, t_max)
        out[i] = (tau, q[0], q[1], w[0], w[1], float(ex))
    return out


def batch_ray_integrals(m: MetricField, states: np.ndarray, values: np.ndarray,
                        origin, spacing: float, *, step, radius=None,
                        t_max=None) -> np.ndarray:
    """Rows (integral of bilinear f along ray, tau, exited) per phase state.

    Velocities are renormalized to unit g-speed so the integral is taken
    with respect to g-arclength.
    """
    _, radius, t_max = _resolve(m, None, radius, t_max)
    states = np.array(states, dtype=float)
    g = m.eval_fn(states[:, :2])
    speed = np.sqrt(np.einsum("nij,ni,nj->n", g, states[:, 2:], states[:, 2:]))
    states[:, 2:] /= speed[:, None]
    states = np.ascontiguousarray(states)
    values = np.ascontiguousarray(values, dtype=float)
    if m.has_fast_path:
        return _fast.batch_ray_integral(
            m.family_code, m.params, states, step, radius, t_max,
            values, origin[0], origin[1], spacing)
    # generic fallback: trace with recording, then composite quadrature
    out = np.empty((states.shape[0], 3))
    from .grids import bilinear_sample  # local import to avoid a cycle
    for i, s in enumerate(states):
        path = trace_geodesic(m, s[:2], s[2:], step=step, radius=radius,
                              t_max=t_max)
        fv = bilinear_sample(values, origin, spacing, path.points)
        out[i] = (np.trapezoid(fv, path.times), path.exit_time,
                  float(path.exited))
    return out


# ---------------------------------------------------------------------------
# simplicity


def _boundary_curvature(m: MetricField, theta: float) -> float:
    """Geodesic curvature of the boundary circle w.r.t. the inward normal."""
    dth = 1e-5

    def unit_tangent(th):
        p, _, tan, _ = boundary_frame(m, np.asarray(th))
        return p, tan

    p0, t0 = unit_tangent(theta)
    pp, tp = unit_tangent(theta + dth)
    pm, tm = unit_tangent(theta - dth)
    dT = (tp - tm) / (2 * dth)
    # covariant derivative along the curve: dT/dtheta + Gamma(c')(T)
    te = np.array([-math.sin(theta), math.cos(theta)]) * m.radius
    gamma = m.christoffel(p0)
    cov = dT + np.einsum("ijk,j,k->i", gamma, te, t0)
    darc = float(m.norm(p0, te))
    nabla_tt = cov / darc
    _, nu, _, _ = boundary_frame(m, np.asarray(theta))
    return float(m.inner(p0, nabla_tt, nu))


def check_simplicity(m: MetricField, *, n_theta: int = 32, n_alpha: int = 12,
                     step=None, fd_delta: float = 1e-5) -> SimplicityReport:
    """Convexity, non-trapping and conjugate-point scan on a boundary fan.

    The conjugate-point test follows coordinate Jacobi fields J with J(0)=0,
    J'(0)=Id along each fan ray (finite differences of the flow in the
    initial velocity) and looks for a sign change of det J.
    """
    if step is None:
        step = default_step(m)
    diam = diameter_estimate(m)
    horizon = TMAX_FACTOR * diam

    thetas = 2.0 * np.pi * np.arange(n_theta) / n_theta
    kmin = min(_boundary_curvature(m, float(th)) for th in thetas)
    convex = bool(kmin > 0.0)

    # interior-opening fan; endpoints near +-pi/2 are grazing rays
    alphas = (-np.pi / 2) + np.pi * (np.arange(n_alpha) + 0.5) / n_alpha
    P, NU, TA, _ = boundary_frame(m, thetas)
    max_tau = 0.0
    trapped = False
    witness = None
    first_bad_t = math.inf

    for it, th in enumerate(thetas):
        for al in alphas:
            v = math.cos(al) * NU[it] + math.sin(al) * TA[it]
            res = _conjugate_scan(m, P[it], v, step, horizon, fd_delta)
            tau, exited, t_conj = res
            max_tau = max(max_tau, tau)
            if not exited:
                trapped = True
            if t_conj is not None and t_conj < first_bad_t:
                first_bad_t = t_conj
                witness = (float(th), float(al), float(t_conj))

    return SimplicityReport(
        convex_boundary=convex,
        nontrapping=not trapped,
        no_conjugate_points=witness is None,
        min_boundary_curvature=float(kmin),
        max_exit_time=float(max_tau),
        horizon=float(horizon),
        conjugate_witness=witness,
    )


def _conjugate_scan(m: MetricField, x, v, step, horizon, delta):
    """Trace a ray plus four velocity-perturbed shadows; monitor det J.

    Returns (tau, exited, t_first_conjugate_or_None).
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    # base ray: exit time first
    tau, _, _, exited = exit_state(m, x, v, step=step, t_max=horizon)
    if tau <= step:
        return tau, exited, None
    n_steps = int(math.ceil(tau / step))
    h = tau / n_steps
    states = np.empty((5, 4))
    states[0] = (*x, *v)
    for i in range(2):
        dv = np.zeros(2)
        dv[i] = delta
        states[1 + 2 * i] = (*x, *(v + dv))
        states[2 + 2 * i] = (*x, *(v - dv))
    prev_det = None
    prev_t = 0.0
    t_conj = None
    cur = states.copy()
    for k in range(1, n_steps + 1):
        cur = _advance_block(m, cur, h)
        J = np.empty((2, 2))
        J[:, 0] = (cur[1, :2] - cur[2, :2]) / (2 * delta)
        J[:, 1] = (cur[3, :2] - cur[4, :2]) / (2 * delta)
        det = float(np.linalg.det(J))
        t = k * h
        if det <= 0.0:
            if prev_det is not None and prev_det > 0.0:
                # linear interpolation of the crossing
                t_conj = prev_t + (t - prev_t) * prev_det / (prev_det - det)
            else:
                t_conj = t
            break
        prev_det, prev_t = det, t
    return tau, exited, t_conj


def _advance_block(m: MetricField, states, h):
    if m.has_fast_path:
        out = states.copy()
        for i in range(states.shape[0]):
            x0, x1, v0, v1 = _fast.rk4_step(
                m.family_code, m.params,
                states[i, 0], states[i, 1], states[i, 2], states[i, 3], h)
            out[i] = (x0, x1, v0, v1)
        return out
    xn, vn = _np_rk4(m, states[:, :2], states[:, 2:], h)
    return np.concatenate([xn, vn], axis=1)
