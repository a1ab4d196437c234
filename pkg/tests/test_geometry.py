"""Geometry layer: metric fields, geodesic flow, exp/log, simplicity checks.

Expected values come from closed forms (straight lines in the Euclidean
disk, stereographic projection for the constant-curvature family) and from
an independent scipy.integrate reference integrator for the perturbed
metric.  The frozen constants below were produced by those oracles; the
oracle code is kept in this file so the numbers can be regenerated.
"""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from geoxray import geodesics, metrics

# Reference exit state for gaussian_conformal(0.2) from x0 = (-0.35, 0.21),
# v0 = (0.9, 0.31), computed with scipy RK45 at rtol=1e-12 (see
# _scipy_exit_oracle below).
GAUSS_X0 = np.array([-0.35, 0.21])
GAUSS_V0 = np.array([0.9, 0.31])
GAUSS_TAU = 1.3102138541641517
GAUSS_EXIT = np.array([8.1687120143032521e-01, 5.7682011084373341e-01])

ALL_FAMILIES = [
    metrics.euclidean(),
    metrics.gaussian_conformal(0.2),
    metrics.constant_curvature(0.5),
    metrics.ck_conformal(10, 0.3),
]


def _scipy_exit_oracle(eps, x0, v0):
    """Exit time/point via scipy's adaptive RK45 with a boundary event.

    Independent of the package's fixed-step integrator and bisection.
    """

    def c_fn(x):
        return 1.0 + eps * np.exp(-(x[0] ** 2 + x[1] ** 2))

    def rhs(t, y):
        x, v = y[:2], y[2:]
        e = eps * np.exp(-(x[0] ** 2 + x[1] ** 2))
        gc = np.array([-2 * x[0] * e, -2 * x[1] * e])
        acc = (-0.5 / c_fn(x)) * (2 * (gc @ v) * v - (v @ v) * gc)
        return np.concatenate([v, acc])

    def hit(t, y):
        return y[0] ** 2 + y[1] ** 2 - 1.0

    hit.terminal = True
    hit.direction = 1.0
    v0u = v0 / np.sqrt(c_fn(x0) * (v0 @ v0))
    sol = solve_ivp(rhs, (0.0, 10.0), np.concatenate([x0, v0u]),
                    rtol=1e-12, atol=1e-14, events=hit)
    return sol.t_events[0][0], sol.y_events[0][0][:2]


def _sphere_distance(x, y, curv):
    """Distance for the constant-curvature disk via stereographic projection."""
    u = np.sqrt(curv) * np.asarray(x, dtype=float)
    w = np.sqrt(curv) * np.asarray(y, dtype=float)

    def lift(p):
        s = 1.0 + p @ p
        return np.array([2 * p[0] / s, 2 * p[1] / s, (1.0 - p @ p) / s])

    dot = float(np.clip(lift(u) @ lift(w), -1.0, 1.0))
    return np.arccos(dot) / np.sqrt(curv)


# ---------------------------------------------------------------------------
# metric fields


class TestMetricFields:
    @pytest.mark.parametrize("m", ALL_FAMILIES, ids=lambda m: m.name)
    def test_positive_definite_on_extended_ball(self, m):
        rng = np.random.default_rng(7)
        pts = rng.uniform(-m.extended_radius / np.sqrt(2),
                          m.extended_radius / np.sqrt(2), size=(64, 2))
        g = m.eval_fn(pts)
        eig = np.linalg.eigvalsh(g)
        assert eig.min() > 0.0
        assert np.allclose(g, np.swapaxes(g, -1, -2))

    @pytest.mark.parametrize("m", ALL_FAMILIES, ids=lambda m: m.name)
    def test_derivatives_match_finite_differences(self, m):
        rng = np.random.default_rng(11)
        pts = rng.uniform(-0.6, 0.6, size=(16, 2))
        dg = m.deriv_fn(pts)
        h = 1e-6
        for axis in range(2):
            dp = np.zeros(2)
            dp[axis] = h
            fd = (m.eval_fn(pts + dp) - m.eval_fn(pts - dp)) / (2 * h)
            assert np.max(np.abs(dg[:, axis] - fd)) < 5e-9

    def test_euclidean_christoffels_vanish(self):
        m = metrics.euclidean()
        pts = np.array([[0.0, 0.0], [0.3, -0.4], [0.9, 0.1]])
        gamma = m.christoffel(pts)
        assert np.max(np.abs(gamma)) == 0.0

    @pytest.mark.parametrize("m", ALL_FAMILIES, ids=lambda m: m.name)
    def test_christoffel_lower_symmetry(self, m):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-0.7, 0.7, size=(32, 2))
        gamma = m.christoffel(pts)
        assert np.allclose(gamma, np.swapaxes(gamma, -1, -2), atol=1e-12)

    def test_ck_factor_matches_bump_profile(self):
        k, eps = 10, 0.3
        m = metrics.ck_conformal(k, eps)
        rng = np.random.default_rng(5)
        pts = rng.uniform(-1.0, 1.0, size=(128, 2))
        r2 = np.sum((pts - np.array([0.3, 0.0])) ** 2, axis=1)
        c = 1.0 + eps * np.maximum(0.0, 1.0 - r2) ** (k + 0.5)
        g = m.eval_fn(pts)
        assert np.allclose(g[:, 0, 0], c, atol=1e-14)
        assert np.allclose(g[:, 0, 1], 0.0)
        assert m.regularity == k

    def test_generic_callable_wrapper_agrees_with_builtin(self):
        eps = 0.2
        built = metrics.gaussian_conformal(eps)
        generic = metrics.from_conformal_factor(
            "gauss-generic",
            lambda p: 1.0 + eps * np.exp(-np.sum(p * p, axis=-1)),
            lambda p: (-2.0 * p * (eps * np.exp(-np.sum(
                p * p, axis=-1)))[..., None]))
        assert not generic.has_fast_path
        x0 = np.array([0.1, -0.25])
        v0 = np.array([0.7, 0.9])
        t1, q1, w1, ok1 = geodesics.exit_state(built, x0, v0)
        t2, q2, w2, ok2 = geodesics.exit_state(generic, x0, v0)
        assert ok1 and ok2
        assert abs(t1 - t2) < 1e-8
        assert np.linalg.norm(q1 - q2) < 1e-8


# ---------------------------------------------------------------------------
# geodesic flow against oracles


class TestEuclideanClosedForms:
    def test_exit_time_is_chord_length(self):
        m = metrics.euclidean()
        x0 = np.array([0.3, -0.4])
        v0 = np.array([2.0, 1.0])
        vu = v0 / np.linalg.norm(v0)
        b = x0 @ vu
        tau_exact = -b + np.sqrt(b * b + 1.0 - x0 @ x0)
        tau, q, w, ok = geodesics.exit_state(m, x0, v0)
        assert ok
        assert abs(tau - tau_exact) < 1e-9
        assert np.linalg.norm(q - (x0 + tau_exact * vu)) < 1e-9
        assert np.linalg.norm(w - vu) < 1e-12

    def test_distance_is_euclidean(self):
        m = metrics.euclidean()
        xa = np.array([0.2, 0.5])
        xb = np.array([-0.6, -0.1])
        d = geodesics.geo_distance(m, xa, xb)
        assert abs(d - np.linalg.norm(xa - xb)) < 1e-10

    def test_jacobian_factor_is_one(self):
        m = metrics.euclidean()
        fac = geodesics.jacobian_factor(
            m, np.array([0.1, 0.2]), np.array([-0.5, 0.3]))
        assert abs(fac - 1.0) < 1e-8

    def test_exit_time_zero_when_leaving(self):
        m = metrics.euclidean()
        q = np.array([1.0, 0.0])
        tau, _, _, ok = geodesics.exit_state(m, q, np.array([1.0, 0.5]))
        assert ok and tau == 0.0


class TestConstantCurvatureClosedForms:
    CURV = 0.5

    def test_distance_matches_stereographic_lift(self):
        m = metrics.constant_curvature(self.CURV)
        pairs = [([0.25, -0.15], [-0.4, 0.35]),
                 ([0.0, 0.0], [0.5, 0.0]),
                 ([-0.7, 0.1], [0.6, 0.2])]
        for xa, xb in pairs:
            d = geodesics.geo_distance(m, np.array(xa), np.array(xb))
            d_ref = _sphere_distance(xa, xb, self.CURV)
            assert abs(d - d_ref) < 1e-8

    def test_jacobian_factor_matches_sine_ratio(self):
        m = metrics.constant_curvature(self.CURV)
        xa = np.array([0.25, -0.15])
        xb = np.array([-0.4, 0.35])
        t = _sphere_distance(xa, xb, self.CURV)
        ref = np.sqrt(self.CURV) * t / np.sin(np.sqrt(self.CURV) * t)
        fac = geodesics.jacobian_factor(m, xa, xb)
        assert abs(fac - ref) / ref < 1e-7

    def test_boundary_curvature_closed_form(self):
        # for the projective disk model the geodesic curvature of the unit
        # circle works out to (1 - K)/2
        for curv in (0.5, 4.0):
            rep = geodesics.check_simplicity(metrics.constant_curvature(curv))
            assert abs(rep.min_boundary_curvature - (1.0 - curv) / 2.0) < 1e-6


class TestPerturbedMetricOracle:
    def test_exit_state_matches_scipy_reference(self):
        m = metrics.gaussian_conformal(0.2)
        tau, q, w, ok = geodesics.exit_state(m, GAUSS_X0, GAUSS_V0)
        assert ok
        assert abs(tau - GAUSS_TAU) < 1e-8
        assert np.linalg.norm(q - GAUSS_EXIT) < 1e-8

    def test_frozen_reference_reproducible(self):
        tau, q = _scipy_exit_oracle(0.2, GAUSS_X0, GAUSS_V0)
        assert abs(tau - GAUSS_TAU) < 1e-10
        assert np.linalg.norm(q - GAUSS_EXIT) < 1e-10

    def test_distance_bounded_by_conformal_range(self):
        # 1 <= c <= 1.2 pinches every path length between the Euclidean
        # distance and sqrt(1.2) times the straight chord
        m = metrics.gaussian_conformal(0.2)
        rng = np.random.default_rng(17)
        for _ in range(6):
            xa, xb = rng.uniform(-0.6, 0.6, size=(2, 2))
            d = geodesics.geo_distance(m, xa, xb)
            chord = np.linalg.norm(xa - xb)
            assert chord - 1e-9 <= d <= np.sqrt(1.2) * chord + 1e-9


# ---------------------------------------------------------------------------
# flow invariants


@st.composite
def interior_rays(draw):
    r = draw(st.floats(0.0, 0.8))
    t = draw(st.floats(0.0, 2 * np.pi))
    a = draw(st.floats(0.0, 2 * np.pi))
    x = np.array([r * np.cos(t), r * np.sin(t)])
    v = np.array([np.cos(a), np.sin(a)])
    return x, v


class TestFlowInvariants:
    @settings(max_examples=20, deadline=None)
    @given(ray=interior_rays(), fam=st.sampled_from([0, 1, 2]))
    def test_unit_speed_preserved(self, ray, fam):
        m = ALL_FAMILIES[fam]
        x, v = ray
        path = geodesics.trace_geodesic(m, x, v)
        speeds = np.array([m.norm(p, u)
                           for p, u in zip(path.points, path.velocities)])
        assert np.max(np.abs(speeds - 1.0)) < 1e-9

    @settings(max_examples=20, deadline=None)
    @given(ray=interior_rays(), fam=st.sampled_from([0, 1, 2]))
    def test_time_reversal_returns_to_start(self, ray, fam):
        m = ALL_FAMILIES[fam]
        x, v = ray
        tau, q, w, ok = geodesics.exit_state(m, x, v)
        assert ok
        if tau < 1e-6:
            return
        xb, vb = geodesics.trace_fixed_time(m, q, -w, tau)
        assert np.linalg.norm(xb - x) < 1e-6
        assert np.linalg.norm(vb + m.unit(x, v)) < 1e-6

    @settings(max_examples=15, deadline=None)
    @given(ray=interior_rays(), fam=st.sampled_from([0, 1, 2]))
    def test_exit_time_shrinks_along_ray(self, ray, fam):
        m = ALL_FAMILIES[fam]
        x, v = ray
        tau, _, _, ok = geodesics.exit_state(m, x, v)
        assert ok
        if tau < 0.2:
            return
        t = 0.5 * tau
        xm, vm = geodesics.trace_fixed_time(m, x, m.unit(x, v), t)
        tau2, _, _, _ = geodesics.exit_state(m, xm, vm)
        assert abs(tau2 - (tau - t)) < 1e-7

    @settings(max_examples=15, deadline=None)
    @given(ray=interior_rays(), fam=st.sampled_from([0, 1, 2]))
    def test_exp_log_roundtrip(self, ray, fam):
        m = ALL_FAMILIES[fam]
        x, v = ray
        w = 0.45 * m.unit(x, v)
        y = geodesics.exp_map(m, x, w)
        if np.hypot(*y) > 0.95:
            return
        w_back = geodesics.log_map(m, x, y)
        assert np.linalg.norm(w_back - w) < 1e-7

    def test_distance_symmetry(self):
        m = metrics.gaussian_conformal(0.2)
        rng = np.random.default_rng(23)
        for _ in range(5):
            xa, xb = rng.uniform(-0.7, 0.7, size=(2, 2))
            dab = geodesics.geo_distance(m, xa, xb)
            dba = geodesics.geo_distance(m, xb, xa)
            assert abs(dab - dba) < 1e-7

    def test_batched_exits_match_scalar(self):
        m = metrics.gaussian_conformal(0.2)
        rng = np.random.default_rng(29)
        xs = rng.uniform(-0.5, 0.5, size=(8, 2))
        angs = rng.uniform(0, 2 * np.pi, size=8)
        vs = np.stack([np.cos(angs), np.sin(angs)], axis=1)
        rows = geodesics.batch_exit_states(m, np.hstack([xs, vs]))
        for i in range(8):
            tau, q, w, ok = geodesics.exit_state(m, xs[i], vs[i])
            assert bool(rows[i, 5]) == ok
            assert abs(rows[i, 0] - tau) < 1e-12
            assert np.linalg.norm(rows[i, 1:3] - q) < 1e-12


# ---------------------------------------------------------------------------
# boundary frame and direction quadrature


class TestBoundaryFrame:
    def test_frame_is_orthonormal(self):
        m = metrics.gaussian_conformal(0.2)
        theta = np.linspace(0, 2 * np.pi, 12, endpoint=False)
        pts, nu, tan, darc = geodesics.boundary_frame(m, theta)
        for i in range(len(theta)):
            assert abs(m.norm(pts[i], nu[i]) - 1.0) < 1e-10
            assert abs(m.norm(pts[i], tan[i]) - 1.0) < 1e-10
            assert abs(m.inner(pts[i], nu[i], tan[i])) < 1e-10
            # normal points inward
            assert nu[i] @ pts[i] < 0.0

    def test_arclength_total(self):
        # conformal factor on the unit circle scales the circumference
        m = metrics.gaussian_conformal(0.2)
        n = 512
        theta = np.linspace(0, 2 * np.pi, n, endpoint=False)
        _, _, _, darc = geodesics.boundary_frame(m, theta)
        total = darc.sum() * (2 * np.pi / n) if darc.ndim else None
        # darc returns the density d(arc)/d(theta)
        dens = 2 * np.pi / n * np.sum(darc)
        ref = np.sqrt(1.0 + 0.2 * np.exp(-1.0)) * 2 * np.pi
        assert abs(dens - ref) < 1e-8

    def test_sphere_directions_weights(self):
        m = metrics.gaussian_conformal(0.2)
        x = np.array([0.2, -0.3])
        dirs, wts = geodesics.sphere_directions(m, x, 64)
        assert abs(wts.sum() - 2 * np.pi) < 1e-12
        norms = np.array([m.norm(x, d) for d in dirs])
        assert np.max(np.abs(norms - 1.0)) < 1e-12


# ---------------------------------------------------------------------------
# simplicity reports


class TestSimplicity:
    def test_euclidean_is_simple(self):
        rep = geodesics.check_simplicity(metrics.euclidean())
        assert rep.simple
        assert abs(rep.min_boundary_curvature - 1.0) < 1e-6

    def test_perturbed_metric_is_simple(self):
        rep = geodesics.check_simplicity(metrics.gaussian_conformal(0.2))
        assert rep.simple
        assert rep.max_exit_time < 3.0

    def test_low_curvature_disk_is_simple(self):
        rep = geodesics.check_simplicity(metrics.constant_curvature(0.5))
        assert rep.simple

    def test_high_curvature_disk_is_rejected(self):
        rep = geodesics.check_simplicity(metrics.constant_curvature(4.0))
        assert not rep.simple
        assert not rep.convex_boundary
        assert not rep.no_conjugate_points
        # first conjugate time on a curvature-4 sphere is pi/2
        t_conj = rep.conjugate_witness[-1]
        assert abs(t_conj - np.pi / 2) / (np.pi / 2) < 0.05
