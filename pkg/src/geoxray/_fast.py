"""Numba-compiled inner loops.

Everything here works on plain floats and ndarrays so it can be JIT compiled.
The built-in metric families are all conformal, g(x) = c(x) * I, and are
dispatched by an integer family code plus a small parameter vector:

    code 0: Euclidean                 c = 1
    code 1: Gaussian conformal        c = 1 + par[0] * exp(-|x|^2)
    code 2: constant curvature        c = 4 / (1 + par[0]*|x|^2)^2
    code 3: finite-regularity bump    c = 1 + par[0] * max(0, 1-|x-x0|^2)^(par[1]+1/2)

Custom metrics (code < 0) never reach these kernels; the pure-numpy fallback
paths in `geodesics` handle them.

Accumulation order note: every output value is produced by one serial loop
over its own contributions, so results are bit-identical regardless of the
number of threads used for the outer (embarrassingly parallel) loop.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

FAMILY_EUCLIDEAN = 0
FAMILY_CONF_GAUSS = 1
FAMILY_CONST_CURV = 2
FAMILY_CONF_CK = 3

EXIT_BISECT_TOL = 1e-10


@njit(inline="always", cache=True)
def conf_factor(code, par, x0, x1):
    """Conformal factor c and its gradient at (x0, x1)."""
    if code == FAMILY_EUCLIDEAN:
        return 1.0, 0.0, 0.0
    elif code == FAMILY_CONF_GAUSS:
        e = par[0] * np.exp(-(x0 * x0 + x1 * x1))
        return 1.0 + e, -2.0 * x0 * e, -2.0 * x1 * e
    elif code == FAMILY_CONST_CURV:
        w = 1.0 + par[0] * (x0 * x0 + x1 * x1)
        c = 4.0 / (w * w)
        d = -16.0 * par[0] / (w * w * w)
        return c, d * x0, d * x1
    else:
        dx0 = x0 - par[2]
        dx1 = x1 - par[3]
        u = 1.0 - (dx0 * dx0 + dx1 * dx1)
        if u <= 0.0:
            return 1.0, 0.0, 0.0
        p = par[1] + 0.5
        d = -2.0 * par[0] * p * u ** (p - 1.0)
        return 1.0 + par[0] * u ** p, d * dx0, d * dx1


@njit(inline="always", cache=True)
def geodesic_accel(code, par, x0, x1, v0, v1):
    """Acceleration -Gamma^i_{jk} v^j v^k for a conformal metric."""
    c, g0, g1 = conf_factor(code, par, x0, x1)
    if code == FAMILY_EUCLIDEAN:
        return 0.0, 0.0
    gv = g0 * v0 + g1 * v1
    vv = v0 * v0 + v1 * v1
    s = -0.5 / c
    return s * (2.0 * gv * v0 - vv * g0), s * (2.0 * gv * v1 - vv * g1)


@njit(inline="always", cache=True)
def rk4_step(code, par, x0, x1, v0, v1, h):
    a0, a1 = geodesic_accel(code, par, x0, x1, v0, v1)
    k1x0, k1x1, k1v0, k1v1 = v0, v1, a0, a1

    p0 = x0 + 0.5 * h * k1x0
    p1 = x1 + 0.5 * h * k1x1
    q0 = v0 + 0.5 * h * k1v0
    q1 = v1 + 0.5 * h * k1v1
    a0, a1 = geodesic_accel(code, par, p0, p1, q0, q1)
    k2x0, k2x1, k2v0, k2v1 = q0, q1, a0, a1

    p0 = x0 + 0.5 * h * k2x0
    p1 = x1 + 0.5 * h * k2x1
    q0 = v0 + 0.5 * h * k2v0
    q1 = v1 + 0.5 * h * k2v1
    a0, a1 = geodesic_accel(code, par, p0, p1, q0, q1)
    k3x0, k3x1, k3v0, k3v1 = q0, q1, a0, a1

    p0 = x0 + h * k3x0
    p1 = x1 + h * k3x1
    q0 = v0 + h * k3v0
    q1 = v1 + h * k3v1
    a0, a1 = geodesic_accel(code, par, p0, p1, q0, q1)
    k4x0, k4x1, k4v0, k4v1 = q0, q1, a0, a1

    c6 = h / 6.0
    return (
        x0 + c6 * (k1x0 + 2.0 * k2x0 + 2.0 * k3x0 + k4x0),
        x1 + c6 * (k1x1 + 2.0 * k2x1 + 2.0 * k3x1 + k4x1),
        v0 + c6 * (k1v0 + 2.0 * k2v0 + 2.0 * k3v0 + k4v0),
        v1 + c6 * (k1v1 + 2.0 * k2v1 + 2.0 * k3v1 + k4v1),
    )


@njit(cache=True)
def exit_state(code, par, x0, x1, v0, v1, h, radius, tmax):
    """Integrate until |x| > radius; bisect the crossing to EXIT_BISECT_TOL.

    Returns (tau, qx, qy, wx, wy, exited). If the ray is outward on the
    boundary already, tau = 0. If tmax is reached first, exited = 0 and the
    state at tmax is returned.
    """
    r2 = radius * radius
    rr = x0 * x0 + x1 * x1
    if rr >= r2 - 1e-14 and x0 * v0 + x1 * v1 >= 0.0:
        return 0.0, x0, x1, v0, v1, 1
    t = 0.0
    while t < tmax:
        hh = h if t + h <= tmax else tmax - t
        y0, y1, w0, w1 = rk4_step(code, par, x0, x1, v0, v1, hh)
        if y0 * y0 + y1 * y1 > r2:
            lo = 0.0
            hi = hh
            # keep (x0,x1) at the inside state, bisect the step fraction
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                m0, m1, u0, u1 = rk4_step(code, par, x0, x1, v0, v1, mid)
                if m0 * m0 + m1 * m1 > r2:
                    hi = mid
                else:
                    lo = mid
                if hi - lo < EXIT_BISECT_TOL:
                    break
            tau = t + hi
            y0, y1, w0, w1 = rk4_step(code, par, x0, x1, v0, v1, hi)
            return tau, y0, y1, w0, w1, 1
        x0, x1, v0, v1 = y0, y1, w0, w1
        t += hh
    return tmax, x0, x1, v0, v1, 0


@njit(cache=True)
def trace_record(code, par, x0, x1, v0, v1, h, radius, tmax,
                 out_t, out_x, out_v):
    """Like exit_state, but records every accepted step.

    out_t: (m,), out_x: (m,2), out_v: (m,2) preallocated. Returns
    (n_samples, tau, exited); sample 0 is the initial state and the last
    sample is the exit state (or the tmax state if not exited).
    """
    r2 = radius * radius
    n = 0
    out_t[n] = 0.0
    out_x[n, 0] = x0
    out_x[n, 1] = x1
    out_v[n, 0] = v0
    out_v[n, 1] = v1
    n = 1
    rr = x0 * x0 + x1 * x1
    if rr >= r2 - 1e-14 and x0 * v0 + x1 * v1 >= 0.0:
        return n, 0.0, 1
    t = 0.0
    cap = out_t.shape[0]
    while t < tmax and n < cap:
        hh = h if t + h <= tmax else tmax - t
        y0, y1, w0, w1 = rk4_step(code, par, x0, x1, v0, v1, hh)
        if y0 * y0 + y1 * y1 > r2:
            lo = 0.0
            hi = hh
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                m0, m1, u0, u1 = rk4_step(code, par, x0, x1, v0, v1, mid)
                if m0 * m0 + m1 * m1 > r2:
                    hi = mid
                else:
                    lo = mid
                if hi - lo < EXIT_BISECT_TOL:
                    break
            tau = t + hi
            y0, y1, w0, w1 = rk4_step(code, par, x0, x1, v0, v1, hi)
            out_t[n] = tau
            out_x[n, 0] = y0
            out_x[n, 1] = y1
            out_v[n, 0] = w0
            out_v[n, 1] = w1
            return n + 1, tau, 1
        x0, x1, v0, v1 = y0, y1, w0, w1
        t += hh
        out_t[n] = t
        out_x[n, 0] = x0
        out_x[n, 1] = x1
        out_v[n, 0] = v0
        out_v[n, 1] = v1
        n += 1
    return n, t, 0


@njit(cache=True)
def flow_fixed_time(code, par, x0, x1, v0, v1, T, h, radius_cap):
    """Integrate for affine time exactly T (no boundary stop).

    Fails (ok = 0) if the trajectory leaves |x| > radius_cap.
    """
    r2 = radius_cap * radius_cap
    t = 0.0
    if T < 0.0:
        return x0, x1, v0, v1, 0
    while t < T:
        hh = h if t + h <= T else T - t
        x0, x1, v0, v1 = rk4_step(code, par, x0, x1, v0, v1, hh)
        t += hh
        if x0 * x0 + x1 * x1 > r2:
            return x0, x1, v0, v1, 0
    return x0, x1, v0, v1, 1


@njit(inline="always", cache=True)
def bilinear(f, gx0, gy0, gh, px, py):
    """Bilinear interpolation on a node grid, zero outside."""
    nx = f.shape[0]
    ny = f.shape[1]
    sx = (px - gx0) / gh
    sy = (py - gy0) / gh
    ix = int(np.floor(sx))
    iy = int(np.floor(sy))
    tx = sx - ix
    ty = sy - iy
    val = 0.0
    if 0 <= ix < nx and 0 <= iy < ny:
        val += f[ix, iy] * (1.0 - tx) * (1.0 - ty)
    if 0 <= ix + 1 < nx and 0 <= iy < ny:
        val += f[ix + 1, iy] * tx * (1.0 - ty)
    if 0 <= ix < nx and 0 <= iy + 1 < ny:
        val += f[ix, iy + 1] * (1.0 - tx) * ty
    if 0 <= ix + 1 < nx and 0 <= iy + 1 < ny:
        val += f[ix + 1, iy + 1] * tx * ty
    return val


@njit(cache=True)
def ray_integral_grid(code, par, x0, x1, v0, v1, h, radius, tmax,
                      f, gx0, gy0, gh):
    """Integral of the bilinear interpolant of f along the geodesic.

    The quadrature state F rides along the RK4 integration (F' = f(x(t))),
    so the bisected exit step closes the integral at tau exactly.
    Returns (F, tau, exited).
    """
    r2 = radius * radius
    rr = x0 * x0 + x1 * x1
    if rr >= r2 - 1e-14 and x0 * v0 + x1 * v1 >= 0.0:
        return 0.0, 0.0, 1
    F = 0.0
    t = 0.0
    while t < tmax:
        hh = h if t + h <= tmax else tmax - t
        y0, y1, w0, w1, Fn = _rk4_quad_step(code, par, x0, x1, v0, v1, F,
                                            hh, f, gx0, gy0, gh)
        if y0 * y0 + y1 * y1 > r2:
            lo = 0.0
            hi = hh
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                m0, m1, u0, u1 = rk4_step(code, par, x0, x1, v0, v1, mid)
                if m0 * m0 + m1 * m1 > r2:
                    hi = mid
                else:
                    lo = mid
                if hi - lo < EXIT_BISECT_TOL:
                    break
            y0, y1, w0, w1, Fn = _rk4_quad_step(code, par, x0, x1, v0, v1, F,
                                                hi, f, gx0, gy0, gh)
            return Fn, t + hi, 1
        x0, x1, v0, v1, F = y0, y1, w0, w1, Fn
        t += hh
    return F, t, 0


@njit(inline="always", cache=True)
def _rk4_quad_step(code, par, x0, x1, v0, v1, F, h, f, gx0, gy0, gh):
    a0, a1 = geodesic_accel(code, par, x0, x1, v0, v1)
    f1 = bilinear(f, gx0, gy0, gh, x0, x1)
    k1x0, k1x1, k1v0, k1v1 = v0, v1, a0, a1

    p0 = x0 + 0.5 * h * k1x0
    p1 = x1 + 0.5 * h * k1x1
    q0 = v0 + 0.5 * h * k1v0
    q1 = v1 + 0.5 * h * k1v1
    a0, a1 = geodesic_accel(code, par, p0, p1, q0, q1)
    f2 = bilinear(f, gx0, gy0, gh, p0, p1)
    k2x0, k2x1, k2v0, k2v1 = q0, q1, a0, a1

    p0 = x0 + 0.5 * h * k2x0
    p1 = x1 + 0.5 * h * k2x1
    q0 = v0 + 0.5 * h * k2v0
    q1 = v1 + 0.5 * h * k2v1
    a0, a1 = geodesic_accel(code, par, p0, p1, q0, q1)
    f3 = bilinear(f, gx0, gy0, gh, p0, p1)
    k3x0, k3x1, k3v0, k3v1 = q0, q1, a0, a1

    p0 = x0 + h * k3x0
    p1 = x1 + h * k3x1
    q0 = v0 + h * k3v0
    q1 = v1 + h * k3v1
    a0, a1 = geodesic_accel(code, par, p0, p1, q0, q1)
    f4 = bilinear(f, gx0, gy0, gh, p0, p1)
    k4x0, k4x1, k4v0, k4v1 = q0, q1, a0, a1

    c6 = h / 6.0
    return (
        x0 + c6 * (k1x0 + 2.0 * k2x0 + 2.0 * k3x0 + k4x0),
        x1 + c6 * (k1x1 + 2.0 * k2x1 + 2.0 * k3x1 + k4x1),
        v0 + c6 * (k1v0 + 2.0 * k2v0 + 2.0 * k3v0 + k4v0),
        v1 + c6 * (k1v1 + 2.0 * k2v1 + 2.0 * k3v1 + k4v1),
        F + c6 * (f1 + 2.0 * f2 + 2.0 * f3 + f4),
    )


# ---------------------------------------------------------------------------
# batch drivers


@njit(cache=True, parallel=True)
def batch_exit(code, par, states, h, radius, tmax):
    """Exit data for many rays.  states: (m, 4).  Returns (m, 6) array with
    rows (tau, qx, qy, wx, wy, exited)."""
    m = states.shape[0]
    out = np.empty((m, 6))
    for i in prange(m):
        tau, qx, qy, wx, wy, ex = exit_state(
            code, par, states[i, 0], states[i, 1], states[i, 2], states[i, 3],
            h, radius, tmax)
        out[i, 0] = tau
        out[i, 1] = qx
        out[i, 2] = qy
        out[i, 3] = wx
        out[i, 4] = wy
        out[i, 5] = ex
    return out


@njit(cache=True, parallel=True)
def batch_ray_integral(code, par, states, h, radius, tmax, f, gx0, gy0, gh):
    """Geodesic ray integrals of grid f for many rays. Returns (m, 3):
    (integral, tau, exited)."""
    m = states.shape[0]
    out = np.empty((m, 3))
    for i in prange(m):
        F, tau, ex = ray_integral_grid(
            code, par, states[i, 0], states[i, 1], states[i, 2], states[i, 3],
            h, radius, tmax, f, gx0, gy0, gh)
        out[i, 0] = F
        out[i, 1] = tau
        out[i, 2] = ex
    return out


@njit(cache=True, parallel=True)
def batch_flow_fixed_time(code, par, states, T, h, radius_cap):
    """Flow many rays for their own fixed times T[i]. Returns (m, 5):
    (x, y, vx, vy, ok)."""
    m = states.shape[0]
    out = np.empty((m, 5))
    for i in prange(m):
        x0, x1, v0, v1, ok = flow_fixed_time(
            code, par, states[i, 0], states[i, 1], states[i, 2], states[i, 3],
            T[i], h, radius_cap)
        out[i, 0] = x0
        out[i, 1] = x1
        out[i, 2] = v0
        out[i, 3] = v1
        out[i, 4] = ok
    return out


@njit(cache=True)
def fan_trace(code, par, cx, cy, dirs, h, radius, tmax, nsteps_cap):
    """Trace a fan of unit-speed geodesics from one center.

    dirs: (nd, 2) initial velocities (already g-normalized).
    Returns (pos, alive_len):
      pos: (nd, nsteps_cap, 2) positions at t_j = j*h (until each ray's exit),
      alive_len[i]: number of valid samples for ray i.
    The fan is used to build distance/Jacobian tables, so samples stop at the
    first step whose position leaves |x| > radius.
    """
    nd = dirs.shape[0]
    pos = np.zeros((nd, nsteps_cap, 2))
    alive = np.zeros(nd, dtype=np.int64)
    r2 = radius * radius
    for i in range(nd):
        x0 = cx
        x1 = cy
        v0 = dirs[i, 0]
        v1 = dirs[i, 1]
        pos[i, 0, 0] = x0
        pos[i, 0, 1] = x1
        n = 1
        t = 0.0
        while n < nsteps_cap and t < tmax:
            x0, x1, v0, v1 = rk4_step(code, par, x0, x1, v0, v1, h)
            t += h
            pos[i, n, 0] = x0
            pos[i, n, 1] = x1
            n += 1
            if x0 * x0 + x1 * x1 > r2:
                break
        alive[i] = n
    return pos, alive


# ---------------------------------------------------------------------------
# smoothstep cutoffs (coefficients precomputed by the caller)


@njit(inline="always", cache=True)
def smoothstep_poly(u, coef):
    """Polynomial smoothstep S(u) on [0,1]; S(0)=0, S(1)=1, C^q junctions.

    coef[m] are the expansion coefficients of S(u) = u^(q+1) * sum coef[m] u^m.
    """
    if u <= 0.0:
        return 0.0
    if u >= 1.0:
        return 1.0
    q1 = coef.shape[0]  # == q + 1
    acc = 0.0
    for m in range(q1 - 1, -1, -1):
        acc = acc * u + coef[m]
    return acc * u ** q1


@njit(inline="always", cache=True)
def radial_cutoff(r, r_one, r_zero, coef):
    """1 for r <= r_one, 0 for r >= r_zero, smoothstep between."""
    if r <= r_one:
        return 1.0
    if r >= r_zero:
        return 0.0
    return smoothstep_poly((r_zero - r) / (r_zero - r_one), coef)


# ---------------------------------------------------------------------------
# normal operator: polar quadrature of the singular kernel
#
# N f(x) = sum_{l,q} wrho[l] * dbeta * ker(x, rho_l, beta_q) * f(x + rho_l w_q)
# ker = psi(x) * 2 * A(x,rho,beta) * sqrt(det g(y)) * phi(|y|) / U(x,rho,beta)
# where U = d_g(x, x + rho w)/rho and A is the exp-map Jacobian factor, both
# supplied as tables over (coarse centers) x (rho nodes) x (beta nodes).
# The rho weight from the area element cancels the 1/rho kernel singularity.


@njit(inline="always", cache=True)
def _table_uv(tab, icx, icy, wx, wy, ir, wr, ib0, ib1, wb):
    """Quadrilinear table read: bilinear over the 2x2 coarse-center
    neighborhood times bilinear in the table's own (rho, beta) grid.
    tab: (ncx, ncy, nr_t, nb_t); (ir, wr) index the rho axis, (ib0, ib1,
    wb) the periodic beta axis."""
    e00 = (1.0 - wr) * tab[icx, icy, ir, ib0] + wr * tab[icx, icy, ir + 1, ib0]
    e01 = (1.0 - wr) * tab[icx, icy, ir, ib1] + wr * tab[icx, icy, ir + 1, ib1]
    v00 = (1.0 - wb) * e00 + wb * e01
    e00 = (1.0 - wr) * tab[icx, icy + 1, ir, ib0] \
        + wr * tab[icx, icy + 1, ir + 1, ib0]
    e01 = (1.0 - wr) * tab[icx, icy + 1, ir, ib1] \
        + wr * tab[icx, icy + 1, ir + 1, ib1]
    v01 = (1.0 - wb) * e00 + wb * e01
    e00 = (1.0 - wr) * tab[icx + 1, icy, ir, ib0] \
        + wr * tab[icx + 1, icy, ir + 1, ib0]
    e01 = (1.0 - wr) * tab[icx + 1, icy, ir, ib1] \
        + wr * tab[icx + 1, icy, ir + 1, ib1]
    v10 = (1.0 - wb) * e00 + wb * e01
    e00 = (1.0 - wr) * tab[icx + 1, icy + 1, ir, ib0] \
        + wr * tab[icx + 1, icy + 1, ir + 1, ib0]
    e01 = (1.0 - wr) * tab[icx + 1, icy + 1, ir, ib1] \
        + wr * tab[icx + 1, icy + 1, ir + 1, ib1]
    v11 = (1.0 - wb) * e00 + wb * e01
    return ((1.0 - wx) * ((1.0 - wy) * v00 + wy * v01)
            + wx * ((1.0 - wy) * v10 + wy * v11))


@njit(cache=True, parallel=True)
def normal_apply(code, par, xs, ys, psi_vals,
                 f, gx0, gy0, gh,
                 rho, wrho, wdir, dirx, diry,
                 phi_r1, phi_r0, ss_coef,
                 use_tables, utab, atab, tcx0, tcy0, tch,
                 tab_ir, tab_wr, tab_ib0, tab_ib1, tab_wb):
    """Apply the kernel-route normal operator at the points (xs, ys).

    psi_vals: outer cutoff at the evaluation points (precomputed).
    rho/wrho: radial nodes and weights (wrho includes the rho factor of the
    area element divided by rho from the kernel, i.e. plain d rho weights).
    dirx/diry: unit direction components per angular node; wdir: angular
    weights. Tables utab/atab live on their own (ncx, ncy, nr_t, nb_t)
    grid; tab_ir/tab_wr map radial node l into that grid and
    tab_ib0/tab_ib1/tab_wb map angular node q (beta axis periodic).
    """
    m = xs.shape[0]
    out = np.zeros(m)
    nr = rho.shape[0]
    nb = dirx.shape[0]
    for i in prange(m):
        px = xs[i]
        py = ys[i]
        psi = psi_vals[i]
        if psi == 0.0:
            out[i] = 0.0
            continue
        icx = 0
        icy = 0
        wx = 0.0
        wy = 0.0
        if use_tables == 1:
            ncx = utab.shape[0]
            ncy = utab.shape[1]
            sx = (px - tcx0) / tch
            sy = (py - tcy0) / tch
            icx = int(np.floor(sx))
            icy = int(np.floor(sy))
            if icx < 0:
                icx = 0
            if icy < 0:
                icy = 0
            if icx > ncx - 2:
                icx = ncx - 2
            if icy > ncy - 2:
                icy = ncy - 2
            wx = sx - icx
            wy = sy - icy
            if wx < 0.0:
                wx = 0.0
            if wx > 1.0:
                wx = 1.0
            if wy < 0.0:
                wy = 0.0
            if wy > 1.0:
                wy = 1.0
        acc = 0.0
        for q in range(nb):
            dx = dirx[q]
            dy = diry[q]
            aq = 0.0
            for l in range(nr):
                r = rho[l]
                yx = px + r * dx
                yy = py + r * dy
                ry = np.sqrt(yx * yx + yy * yy)
                phiv = radial_cutoff(ry, phi_r1, phi_r0, ss_coef)
                if phiv == 0.0:
                    continue
                cy_, _, _ = conf_factor(code, par, yx, yy)
                if use_tables == 1:
                    U = _table_uv(utab, icx, icy, wx, wy,
                                  tab_ir[l], tab_wr[l],
                                  tab_ib0[q], tab_ib1[q], tab_wb[q])
                    A = _table_uv(atab, icx, icy, wx, wy,
                                  tab_ir[l], tab_wr[l],
                                  tab_ib0[q], tab_ib1[q], tab_wb[q])
                else:
                    U = 1.0
                    A = 1.0
                fv = bilinear(f, gx0, gy0, gh, yx, yy)
                aq += wrho[l] * A * cy_ * phiv * fv / U
            acc += aq * wdir[q]
        out[i] = 2.0 * psi * acc
    return out


@njit(cache=True, parallel=True)
def normal_apply_packet(code, par, xs, ys, psi_vals,
                        pk_cx, pk_cy, pk_sigma, pk_kx, pk_ky,
                        rho, wrho, wdir, dirx, diry,
                        phi_r1, phi_r0, ss_coef,
                        use_tables, utab, atab, tcx0, tcy0, tch,
                        tab_ir, tab_wr, tab_ib0, tab_ib1, tab_wb):
    """Same quadrature as normal_apply but f is an analytic wave packet
    f(y) = exp(-|y-c|^2/(2 sigma^2)) * cos(k . y), evaluated exactly.
    """
    m = xs.shape[0]
    out = np.zeros(m)
    nr = rho.shape[0]
    nb = dirx.shape[0]
    inv2s2 = 1.0 / (2.0 * pk_sigma * pk_sigma)
    for i in prange(m):
        px = xs[i]
        py = ys[i]
        psi = psi_vals[i]
        if psi == 0.0:
            out[i] = 0.0
            continue
        icx = 0
        icy = 0
        wx = 0.0
        wy = 0.0
        if use_tables == 1:
            ncx = utab.shape[0]
            ncy = utab.shape[1]
            sx = (px - tcx0) / tch
            sy = (py - tcy0) / tch
            icx = int(np.floor(sx))
            icy = int(np.floor(sy))
            if icx < 0:
                icx = 0
            if icy < 0:
                icy = 0
            if icx > ncx - 2:
                icx = ncx - 2
            if icy > ncy - 2:
                icy = ncy - 2
            wx = sx - icx
            wy = sy - icy
            if wx < 0.0:
                wx = 0.0
            if wx > 1.0:
                wx = 1.0
            if wy < 0.0:
                wy = 0.0
            if wy > 1.0:
                wy = 1.0
        acc = 0.0
        for q in range(nb):
            dx = dirx[q]
            dy = diry[q]
            aq = 0.0
            for l in range(nr):
                r = rho[l]
                yx = px + r * dx
                yy = py + r * dy
                ry = np.sqrt(yx * yx + yy * yy)
                phiv = radial_cutoff(ry, phi_r1, phi_r0, ss_coef)
                if phiv == 0.0:
                    continue
                cy_, _, _ = conf_factor(code, par, yx, yy)
                if use_tables == 1:
                    U = _table_uv(utab, icx, icy, wx, wy,
                                  tab_ir[l], tab_wr[l],
                                  tab_ib0[q], tab_ib1[q], tab_wb[q])
                    A = _table_uv(atab, icx, icy, wx, wy,
                                  tab_ir[l], tab_wr[l],
                                  tab_ib0[q], tab_ib1[q], tab_wb[q])
                else:
                    U = 1.0
                    A = 1.0
                ex = yx - pk_cx
                ey = yy - pk_cy
                fv = np.exp(-(ex * ex + ey * ey) * inv2s2) * np.cos(
                    pk_kx * yx + pk_ky * yy)
                aq += wrho[l] * A * cy_ * phiv * fv / U
            acc += aq * wdir[q]
        out[i] = 2.0 * psi * acc
    return out


@njit(cache=True)
def normal_matrix(code, par, xs, ys, psi_vals,
                  gx0, gy0, gh, nx, ny,
                  rho, wrho, wdir, dirx, diry,
                  phi_r1, phi_r0, ss_coef,
                  use_tables, utab, atab, tcx0, tcy0, tch,
                  tab_ir, tab_wr, tab_ib0, tab_ib1, tab_wb):
    """Dense matrix of the kernel-route operator w.r.t. grid node values.

    Row i gives N f(x_i) as a linear functional of the full grid (nx*ny,
    flattened C-order), scattering each quadrature node through its bilinear
    stencil. Serial on purpose: probe sizes are small.
    """
    m = xs.shape[0]
    out = np.zeros((m, nx * ny))
    nr = rho.shape[0]
    nb = dirx.shape[0]
    for i in range(m):
        px = xs[i]
        py = ys[i]
        psi = psi_vals[i]
        if psi == 0.0:
            continue
        icx = 0
        icy = 0
        wx = 0.0
        wy = 0.0
        if use_tables == 1:
            ncx = utab.shape[0]
            ncy = utab.shape[1]
            sx = (px - tcx0) / tch
            sy = (py - tcy0) / tch
            icx = int(np.floor(sx))
            icy = int(np.floor(sy))
            if icx < 0:
                icx = 0
            if icy < 0:
                icy = 0
            if icx > ncx - 2:
                icx = ncx - 2
            if icy > ncy - 2:
                icy = ncy - 2
            wx = sx - icx
            wy = sy - icy
            if wx < 0.0:
                wx = 0.0
            if wx > 1.0:
                wx = 1.0
            if wy < 0.0:
                wy = 0.0
            if wy > 1.0:
                wy = 1.0
        for q in range(nb):
            dx = dirx[q]
            dy = diry[q]
            for l in range(nr):
                r = rho[l]
                yx = px + r * dx
                yy = py + r * dy
                ry = np.sqrt(yx * yx + yy * yy)
                phiv = radial_cutoff(ry, phi_r1, phi_r0, ss_coef)
                if phiv == 0.0:
                    continue
                cy_, _, _ = conf_factor(code, par, yx, yy)
                if use_tables == 1:
                    U = _table_uv(utab, icx, icy, wx, wy,
                                  tab_ir[l], tab_wr[l],
                                  tab_ib0[q], tab_ib1[q], tab_wb[q])
                    A = _table_uv(atab, icx, icy, wx, wy,
                                  tab_ir[l], tab_wr[l],
                                  tab_ib0[q], tab_ib1[q], tab_wb[q])
                else:
                    U = 1.0
                    A = 1.0
                w = 2.0 * psi * wdir[q] * wrho[l] * A * cy_ * phiv / U
                sxn = (yx - gx0) / gh
                syn = (yy - gy0) / gh
                jx = int(np.floor(sxn))
                jy = int(np.floor(syn))
                tx = sxn - jx
                ty = syn - jy
                if 0 <= jx < nx and 0 <= jy < ny:
                    out[i, jx * ny + jy] += w * (1.0 - tx) * (1.0 - ty)
                if 0 <= jx + 1 < nx and 0 <= jy < ny:
                    out[i, (jx + 1) * ny + jy] += w * tx * (1.0 - ty)
                if 0 <= jx < nx and 0 <= jy + 1 < ny:
                    out[i, jx * ny + jy + 1] += w * (1.0 - tx) * ty
                if 0 <= jx + 1 < nx and 0 <= jy + 1 < ny:
                    out[i, (jx + 1) * ny + jy + 1] += w * tx * ty
    return out
