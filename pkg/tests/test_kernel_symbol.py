"""Offset-form kernel, homogeneous split, and symbol analysis.

Oracles: on the flat metric every kernel quantity has a closed form
(2 psi phi / |z| pointwise, a polar profile equal to 2 psi phi, and an
exact square-cell average through the arcsinh integral of 1/|z| over a
square), the radial symbol reduces to a one-dimensional Hankel transform
evaluated here by dense panel quadrature, and the calibration constant
is 4 pi in two dimensions.  Curved-metric checks use small-radius
extrapolation against the two-point geodesic solvers, plus decay windows
frozen from runs against those oracles.
"""
from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoxray import kernel, metrics, symbols
from geoxray.grids import CutoffSpec


@pytest.fixture(scope="module")
def cut():
    return CutoffSpec.default()


@pytest.fixture(scope="module")
def flat_provider(cut):
    return kernel.KernelProvider(metrics.euclidean(), cut)


@pytest.fixture(scope="module")
def gauss_metric():
    return metrics.gaussian_conformal(0.2)


@pytest.fixture(scope="module")
def gauss_provider(gauss_metric, cut):
    return kernel.KernelProvider(gauss_metric, cut)


@pytest.fixture(scope="module")
def gauss_slice(gauss_metric, cut):
    return kernel.split_kernel(gauss_metric, cut, (0.1, -0.15))


def conformal_value(m, x):
    """Recover c(x) from the cotangent norm, c = |e|_{g*}^(-2)."""
    return float(np.asarray(m.conorm(np.asarray(x, float),
                                     np.array([1.0, 0.0])))) ** -2


class TestPointwiseKernel:
    def test_flat_closed_form(self, cut):
        m = metrics.euclidean()
        assert kernel.kernel_eval(m, cut, (0.0, 0.0), (0.5, 0.0)) == 4.0
        x = np.array([0.3, 0.2])
        for z in ([0.1, -0.2], [-0.45, 0.3], [0.0, 0.62]):
            z = np.asarray(z)
            y = x - z
            want = (2.0 * cut.psi(np.linalg.norm(x))
                    * cut.phi(np.linalg.norm(y)) / np.linalg.norm(z))
            got = kernel.kernel_eval(m, cut, x, z)
            assert got == pytest.approx(want, rel=1e-14)

    def test_zero_offset_rejected(self, cut):
        with pytest.raises(ValueError):
            kernel.kernel_eval(metrics.euclidean(), cut, (0.1, 0.0),
                               (0.0, 0.0))

    def test_dead_cutoffs_vanish(self, cut, gauss_metric):
        m = metrics.euclidean()
        assert kernel.kernel_eval(m, cut, (0.97, 0.0), (0.1, 0.1)) == 0.0
        assert kernel.kernel_eval(m, cut, (0.0, 0.0), (0.98, 0.0)) == 0.0
        assert kernel.h_eval(gauss_metric, cut, (0.96, 0.0), 0.1,
                             (1.0, 0.0)) == 0.0

    def test_flat_polar_profile(self, cut):
        m = metrics.euclidean()
        x = np.array([0.25, -0.1])
        for r in (0.0, 0.2, 0.55):
            for ang in (0.0, 1.1, 2.7, 4.4):
                omega = np.array([np.cos(ang), np.sin(ang)])
                want = (2.0 * cut.psi(np.linalg.norm(x))
                        * cut.phi(np.linalg.norm(x - r * omega)))
                got = kernel.h_eval(m, cut, x, r, omega)
                assert got == pytest.approx(want, abs=1e-14)

    def test_off_axis_direction_rejected(self, cut):
        with pytest.raises(ValueError):
            kernel.h_eval(metrics.euclidean(), cut, (0.0, 0.0), 0.1,
                          (1.0, 1.0))
        with pytest.raises(ValueError):
            kernel.h_eval(metrics.euclidean(), cut, (0.0, 0.0), -0.2,
                          (1.0, 0.0))

    def test_zero_radius_limit_conformal(self, cut, gauss_metric):
        # at r = 0 the profile is 2 psi phi sqrt(det g)/|omega|_g, which
        # collapses to 2 psi phi sqrt(c) for a conformal factor c
        for x in ([0.0, 0.0], [0.1, -0.15], [0.4, 0.3]):
            x = np.asarray(x)
            c = conformal_value(gauss_metric, x)
            pf = (cut.psi(np.linalg.norm(x)) * cut.phi(np.linalg.norm(x)))
            want = 2.0 * pf * np.sqrt(c)
            got = kernel.h_eval(gauss_metric, cut, x, 0.0, (1.0, 0.0))
            assert got == pytest.approx(want, rel=1e-12)

    def test_small_radius_convergence_curved(self, cut, gauss_metric):
        x = np.array([0.1, -0.15])
        omega = np.array([np.cos(0.7), np.sin(0.7)])
        h0 = kernel.h_eval(gauss_metric, cut, x, 0.0, omega)
        defects = []
        for rho in (1e-1, 1e-2, 1e-3):
            k = kernel.kernel_eval(gauss_metric, cut, x, rho * omega)
            defects.append(abs(k * rho - h0))
        assert defects[2] < 5e-3
        assert defects[2] < 0.15 * defects[0]

    @settings(max_examples=25, deadline=None)
    @given(rho=st.floats(1e-3, 0.7), ang=st.floats(0.0, 2 * np.pi),
           xr=st.floats(0.0, 0.6))
    def test_flat_homogeneity_property(self, rho, ang, xr):
        cut = CutoffSpec.default()
        m = metrics.euclidean()
        x = np.array([xr, -0.3 * xr])
        z = rho * np.array([np.cos(ang), np.sin(ang)])
        got = kernel.kernel_eval(m, cut, x, z)
        want = (2.0 * cut.psi(np.linalg.norm(x))
                * cut.phi(np.linalg.norm(x - z)) / rho)
        assert got == pytest.approx(want, rel=1e-13, abs=1e-13)


class TestSplit:
    def test_flat_interior_split_is_exact(self, cut):
        # chi support around an interior point stays inside phi == 1, so
        # the profile is radially constant and the remainder vanishes
        sl = kernel.split_kernel(metrics.euclidean(), cut, (0.2, 0.1))
        assert np.max(np.abs(sl.remainder)) == 0.0
        sl.validate(tol=1e-12)
        want = (cut.chi(sl.rho)[:, None] * 2.0
                * cut.psi(np.hypot(0.2, 0.1)) / sl.rho[:, None])
        assert np.allclose(sl.k_minus, want, rtol=1e-13)

    def test_flat_edge_split_recomposes(self, cut):
        # the phi junction crosses the unit quadrature panel here, so the
        # 16-point rule leaves a visible (but bounded) recomposition gap
        sl = kernel.split_kernel(metrics.euclidean(), cut, (0.5, 0.0))
        sl.validate(tol=3e-4)
        assert np.max(np.abs(sl.remainder)) > 0.0

    def test_curved_split_recomposes(self, gauss_slice):
        sl = gauss_slice
        sl.validate()
        assert np.all(np.isfinite(sl.remainder))
        assert np.max(np.abs(sl.remainder)) < 10.0
        # the remainder must stay bounded against the 1/rho part near 0
        lead = np.max(np.abs(sl.k[0]))
        assert np.max(np.abs(sl.remainder[0])) < 1e-2 * lead

    def test_leading_row_matches_zero_radius_profile(self, cut,
                                                     gauss_slice):
        sl = gauss_slice
        want = (cut.chi(sl.rho)[:, None] * sl.h_zero[None, :]
                / sl.rho[:, None])
        assert np.allclose(sl.k_minus, want, rtol=1e-12, atol=1e-12)


class TestProviderTables:
    def test_matches_scalar_kernel_curved(self, cut, gauss_metric,
                                          gauss_provider):
        rng = np.random.default_rng(7)
        x = np.array([0.1, -0.15])
        rho = np.exp(rng.uniform(np.log(5e-3), np.log(0.7), 60))
        ang = rng.uniform(0.0, 2 * np.pi, 60)
        Z = rho[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        table_vals = gauss_provider.values(x, Z)
        scalar = np.array([kernel.kernel_eval(gauss_metric, cut, x, z)
                           for z in Z])
        mask = scalar > 0.1
        rel = np.abs(table_vals[mask] - scalar[mask]) / scalar[mask]
        assert rel.max() < 1e-4

    def test_dead_entries_zero(self, cut, flat_provider):
        x = np.array([0.2, 0.0])
        Z = np.array([[0.0, 0.0], [1.2, 0.0], [0.0, -1.17]])
        vals = flat_provider.values(x, Z)
        assert np.all(vals == 0.0)
        assert np.all(flat_provider.values((0.97, 0.0),
                                           np.array([[0.1, 0.0]])) == 0.0)

    def test_singular_cell_average_flat(self, cut, flat_provider):
        # (1/d^2) int_{square d} 2 psi phi/|z| dz = 8 asinh(1)/d near 0
        for delta in (2e-3, 8e-3):
            want = 8.0 * np.arcsinh(1.0) / delta
            got = flat_provider.cell_average((0.0, 0.0), delta)
            assert got == pytest.approx(want, rel=1e-4)

    def test_cell_averages_match_midpoint_refinement(self, cut,
                                                     flat_provider):
        delta = 4e-3
        centers = np.array([[3 * delta, 2 * delta], [-5 * delta, delta]])
        got = flat_provider.cell_averages((0.0, 0.0), centers, delta)
        sub = (np.arange(9) - 4) / 9.0 * delta
        for c, g in zip(centers, got):
            pts = c[None, None, :] + np.stack(
                np.meshgrid(sub, sub, indexing="ij"), axis=-1)
            ref = np.mean(2.0 / np.linalg.norm(pts, axis=-1))
            assert g == pytest.approx(ref, rel=2e-4)


def hankel_oracle(cut, s):
    """4 pi int phi(rho) J0(s rho) drho by dense panel Gauss quadrature."""
    from scipy.special import j0
    nodes, w = np.polynomial.legendre.leggauss(16)
    edges = np.linspace(0.0, cut.phi.r_zero, 193)
    lo, hi = edges[:-1, None], edges[1:, None]
    r = (0.5 * (hi - lo) * nodes[None, :] + 0.5 * (hi + lo)).ravel()
    wts = (0.5 * (hi - lo) * w[None, :]).ravel() * cut.phi(r)
    return 4.0 * np.pi * (j0(np.multiply.outer(np.asarray(s), r)) @ wts)


class TestSymbolTransform:
    def test_flat_matches_hankel_oracle(self, cut, flat_provider):
        fs = symbols.symbol_fft(flat_provider, (0.0, 0.0))
        s = np.geomspace(40.0, 400.0, 17)
        want = hankel_oracle(cut, s)
        for ang in (0.0, 0.9, 2.3):
            pts = s[:, None] * np.array([np.cos(ang), np.sin(ang)])
            got = fs.sample(pts).real
            assert np.max(np.abs(got - want) / np.abs(want)) < 5e-2

    def test_center_symmetry_gives_real_symbol(self, cut, flat_provider):
        fs = symbols.symbol_fft(flat_provider, (0.0, 0.0))
        assert not fs.aliasing
        scale = np.abs(fs.values.real).max()
        assert np.abs(fs.values.imag).max() < 1e-12 * scale

    def test_hermitian_symmetry_curved(self, cut, gauss_provider):
        fs = symbols.symbol_fft(gauss_provider, (0.1, -0.15))
        pts = np.array([[30.0, 12.0], [5.0, -80.0], [150.0, 40.0]])
        defect = np.abs(fs.sample(-pts) - np.conj(fs.sample(pts)))
        assert defect.max() < 1e-8

    def test_dead_center_zero(self, cut, flat_provider):
        fs = symbols.symbol_fft(flat_provider, (0.97, 0.0), n=256)
        assert np.all(fs.values == 0.0)
        assert not fs.aliasing

    def test_undersampled_grid_warns(self, cut, flat_provider):
        with pytest.warns(RuntimeWarning):
            fs = symbols.symbol_fft(flat_provider, (0.0, 0.0), n=32)
        assert fs.aliasing

    def test_sample_outside_range_rejected(self, cut, flat_provider):
        fs = symbols.symbol_fft(flat_provider, (0.0, 0.0), n=256)
        top = fs.xi.max()
        with pytest.raises(ValueError):
            fs.sample(np.array([[3.0 * top, 0.0]]))


class TestPrincipalSymbol:
    def test_calibration_constant(self):
        c = symbols.calibrate_constant()
        assert abs(c - 4.0 * np.pi) < 1e-6 * 4.0 * np.pi

    def test_plateau_flat_and_curved(self, cut, gauss_metric):
        s = np.geomspace(60.0, 600.0, 25)
        xi = np.stack([s * 0.6, s * 0.8], axis=-1)
        cal = symbols.calibrate_constant()
        for m in (metrics.euclidean(), gauss_metric):
            for x in ([0.0, 0.0], [0.45, 0.1], [-0.3, 0.5]):
                x = np.asarray(x)
                pf = (cut.psi(np.linalg.norm(x))
                      * cut.phi(np.linalg.norm(x)))
                a1 = symbols.principal_symbol(m, cut, x, xi)
                plateau = a1 * np.asarray(m.conorm(x, xi)) / (cal * pf)
                assert np.max(np.abs(plateau - 1.0)) < 5e-2

    def test_dead_point_and_bad_frequency(self, cut):
        m = metrics.euclidean()
        xi = np.array([[40.0, 0.0]])
        assert symbols.principal_symbol(m, cut, (0.96, 0.0), xi) == 0.0
        with pytest.raises(ValueError):
            symbols.b_profile(m, cut, (0.0, 0.0), -3.0)
        with pytest.raises(ValueError):
            symbols.principal_symbol(m, cut, (0.0, 0.0),
                                     np.array([[0.0, 0.0]]))

    def test_remainder_profile_decay(self, cut):
        # junction smoothness of the near-diagonal window drives the decay
        # of the leading-part tail; the fitted slope must clear -7.5
        m = metrics.ck_conformal(10, 0.2)
        s = np.geomspace(30.0, 300.0, 41)
        mags = np.abs(symbols.b_profile(m, cut, (0.1, -0.15), s))
        slope, _, r2 = symbols.fit_decay(s, mags)
        assert slope <= -7.5
        assert r2 > 0.9

    def test_difference_symbol_one_order_lower(self, cut, flat_provider):
        m = metrics.euclidean()
        x = np.array([0.2, -0.1])
        s = np.geomspace(4.0, 60.0, 21)
        fs = symbols.symbol_fft(flat_provider, x)
        pts = s[:, None] * np.array([1.0, 0.0])
        diff = np.abs(fs.sample(pts).real
                      - symbols.principal_symbol(m, cut, x, pts))
        slope, _, _ = symbols.fit_decay(s, diff)
        assert slope <= -1.75


class TestSeminorms:
    def oracle_grid(self, order=-1.0):
        s = np.geomspace(4.0, 400.0, 33)
        angles = 2.0 * np.pi * np.arange(16) / 16
        q = 1.0 / np.sqrt(1.0 + s ** 2)
        vals = np.broadcast_to(q[None, :, None],
                               (1, s.size, angles.size)).astype(complex)
        return symbols.SymbolGrid(x=np.zeros((1, 2)), x_step=0.0, s=s,
                                  angles=angles, values=vals.copy(),
                                  order=order, regularity=np.inf,
                                  deriv_budget=2)

    def test_exact_multiplier_exponents(self):
        report = symbols.seminorm_check(self.oracle_grid(), -1.0, 2)
        assert report.passed
        by_alpha = {r.alpha: r.exponent for r in report.rows
                    if r.x_order == 0}
        assert by_alpha[0] == pytest.approx(-1.0, abs=0.1)
        assert by_alpha[1] == pytest.approx(-2.0, abs=0.1)
        assert by_alpha[2] == pytest.approx(-3.1, abs=0.15)

    def test_wrong_claim_fails(self):
        report = symbols.seminorm_check(self.oracle_grid(order=-2.0),
                                        -2.0, 1)
        assert not report.passed

    def test_full_symbol_class_curved(self, cut, gauss_metric,
                                      gauss_provider):
        grid = symbols.symbol_grid(gauss_metric, cut, (0.1, -0.15),
                                   kind="full", provider=gauss_provider)
        report = symbols.seminorm_check(grid, -1.0, 2)
        assert report.passed, report.table()

    def test_difference_symbol_class_curved(self, cut, gauss_metric,
                                            gauss_provider):
        grid = symbols.symbol_grid(gauss_metric, cut, (0.1, -0.15),
                                   kind="difference", stencil=False,
                                   provider=gauss_provider)
        report = symbols.seminorm_check(grid, -2.0, 1, x_max=0,
                                        s_window=(4.0, 80.0))
        assert report.passed, report.table()

    def test_short_span_rejected(self):
        sym = self.oracle_grid()
        with pytest.raises(ValueError):
            symbols.seminorm_check(sym, -1.0, 1, s_window=(10.0, 50.0))
