"""Frequency-side machinery: lattice transforms, operator application,
Sobolev norms, the leading-order inverse symbol, and the composition
residual experiments."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoxray import metrics, parametrix as P
from geoxray.grids import CutoffSpec, ScalarGrid
from geoxray.transform import WavePacket


@pytest.fixture(scope="module")
def cut():
    return CutoffSpec.default()


@pytest.fixture(scope="module")
def flat():
    return metrics.euclidean()


@pytest.fixture(scope="module")
def gauss():
    return metrics.gaussian_conformal(0.2)


@pytest.fixture(scope="module")
def layout64():
    return ScalarGrid.square(64)


def lattice_harmonic(layout, kint, phase=0.0):
    k = (2.0 * np.pi / layout.side) * np.asarray(kint, dtype=float)
    pts = layout.mesh_points()
    return k, layout.with_values(np.cos(pts @ k + phase))


def banded_random_field(layout, seed=7, env_width=0.24):
    """Random mix of mid-band harmonics under a Gaussian envelope that
    dies inside the inner region."""
    rng = np.random.default_rng(seed)
    pts = layout.mesh_points()
    vals = np.zeros(layout.shape)
    for _ in range(6):
        ang = rng.uniform(0.0, 2.0 * np.pi)
        k = rng.uniform(8.0, 20.0) * np.array([np.cos(ang), np.sin(ang)])
        vals += rng.normal() * np.cos(pts @ k + rng.uniform(0, 2 * np.pi))
    r = np.hypot(pts[..., 0], pts[..., 1])
    return layout.with_values(vals * np.exp(-((r / env_width) ** 2)))


class TestHatTransforms:
    def test_roundtrip_is_identity(self, layout64):
        rng = np.random.default_rng(3)
        f = layout64.with_values(rng.normal(size=layout64.shape))
        back = P.inverse_hat(P.forward_hat(f), layout64).real
        assert np.abs(back - f.values).max() < 1e-12

    def test_harmonic_concentrates_on_one_mode(self, layout64):
        k, h = lattice_harmonic(layout64, (5, -3))
        hat = P.forward_hat(h)
        mags = np.abs(hat)
        order = np.argsort(mags.ravel())[::-1]
        # a real cosine splits over the +/-k pair, nothing else
        assert mags.ravel()[order[1]] > 0.4 * mags.ravel()[order[0]]
        assert mags.ravel()[order[2]] < 1e-9 * mags.ravel()[order[0]]


class TestPseudoOp:
    def test_identity_op(self, layout64):
        rng = np.random.default_rng(11)
        f = layout64.with_values(rng.normal(size=layout64.shape))
        got = P.PseudoOp.identity(layout64).apply(f)
        assert np.abs(got.values - f.values).max() < 1e-12

    def test_multiplier_acts_by_eigenvalue(self, layout64):
        k, h = lattice_harmonic(layout64, (5, -3), phase=0.3)
        mult = lambda xi: (1.0 + xi[..., 0] ** 2 + xi[..., 1] ** 2) ** -0.5
        op = P.PseudoOp.from_multiplier(layout64, mult)
        lam = float(mult(k[None, :])[0])
        got = op.apply(h)
        assert np.abs(got.values - lam * h.values).max() < 1e-12

    def test_separable_harmonic_oracle(self):
        layout = ScalarGrid.square(32)
        pts = layout.mesh_points()
        prof = 1.0 + 0.3 * np.sin(pts[..., 0])
        xi = P.freq_lattice(layout)
        mvals = np.exp(-0.01 * (xi[..., 0] ** 2 + xi[..., 1] ** 2))
        op = P.PseudoOp.from_separable(layout, [(prof, mvals)])
        k, h = lattice_harmonic(layout, (3, 4), phase=-0.7)
        want = prof * np.exp(-0.01 * float(k @ k)) * h.values
        assert np.abs(op.apply(h).values - want).max() < 1e-12

    def test_separable_matches_direct_sum(self, cut, gauss):
        layout = ScalarGrid.square(32)
        rng = np.random.default_rng(5)
        f = layout.with_values(rng.normal(size=layout.shape))
        cal = P.calibrate_constant(cut.chi)
        sep = P.PseudoOp.parametrix(gauss, cut, layout, cal=cal)

        def fn(pts, freqs):
            s = np.hypot(freqs[:, 0], freqs[:, 1])
            gi = gauss.inverse_metric(pts)
            conorm = np.sqrt(np.einsum("bij,mi,mj->bm", gi, freqs, freqs))
            return cut.zeta(s)[None, :] * conorm / cal

        direct = P.PseudoOp.from_function(layout, fn)
        a = sep.apply(f).values
        b = direct.apply(f).values
        assert np.abs(a - b).max() < 1e-12 * np.abs(a).max()

    def test_direct_mode_is_linear(self):
        layout = ScalarGrid.square(24)

        def fn(pts, freqs):
            s = np.hypot(freqs[:, 0], freqs[:, 1])
            return (1.0 + pts[:, :1] ** 2) * np.log1p(s)[None, :]

        op = P.PseudoOp.from_function(layout, fn)
        rng = np.random.default_rng(9)
        f = layout.with_values(rng.normal(size=layout.shape))
        g = layout.with_values(rng.normal(size=layout.shape))
        lhs = op.apply(layout.with_values(f.values + 2.0 * g.values)).values
        rhs = op.apply(f).values + 2.0 * op.apply(g).values
        assert np.abs(lhs - rhs).max() < 1e-12 * max(1.0, np.abs(rhs).max())

    def test_constant_anisotropic_metric_reduces_to_multiplier(self, cut):
        # an x-independent non-conformal metric: the chunked double sum
        # must agree with the plain multiplier route
        gmat = np.array([[1.44, 0.2], [0.2, 1.0]])
        gin = np.linalg.inv(gmat)
        m = metrics.from_callables(
            "tilted-constant",
            lambda x: np.broadcast_to(gmat, np.shape(x)[:-1] + (2, 2)),
            regularity=8)
        layout = ScalarGrid.square(24)
        op = P.PseudoOp.parametrix(m, cut, layout)
        assert op.mode == "direct"
        xi = P.freq_lattice(layout)
        s = np.hypot(xi[..., 0], xi[..., 1])
        conorm = np.sqrt(np.einsum("ij,abi,abj->ab", gin, xi, xi))
        cal = P.calibrate_constant(cut.chi)
        ref = P.PseudoOp.from_multiplier(layout, cut.zeta(s) * conorm / cal)
        rng = np.random.default_rng(2)
        f = layout.with_values(rng.normal(size=layout.shape))
        a = op.apply(f).values
        b = ref.apply(f).values
        assert np.abs(a - b).max() < 1e-11 * np.abs(b).max()

    def test_low_band_corrector_acts_below_the_ramp(self, cut, flat,
                                                    layout64):
        cal = P.calibrate_constant(cut.chi)
        op = P.PseudoOp.parametrix(flat, cut, layout64,
                                   low_band=lambda s: np.full_like(s, 2.0))
        k, h = lattice_harmonic(layout64, (1, 0))
        s = float(np.hypot(*k))
        pred = cut.zeta(s) * s / cal + (1.0 - cut.zeta(s)) * 2.0
        got = op.apply(h)
        assert np.abs(got.values - pred * h.values).max() < 1e-12

    def test_grid_mismatch_rejected(self, cut, flat, layout64):
        op = P.PseudoOp.parametrix(flat, cut, layout64)
        other = ScalarGrid.square(48)
        with pytest.raises(ValueError):
            op.apply(other.with_values(np.zeros(other.shape)))

    def test_bad_calibration_rejected(self, cut, flat, layout64):
        with pytest.raises(ValueError):
            P.PseudoOp.parametrix(flat, cut, layout64, cal=0.0)


class TestParametrixSymbol:
    def test_dead_below_the_ramp(self, cut, flat):
        xi = np.array([[2.0, 0.0], [0.0, 2.8], [1.5, 1.5]])
        p = P.parametrix_symbol(flat, cut, np.zeros(2), xi, cal=4 * np.pi)
        assert np.all(p == 0.0)

    def test_flat_plateau_value(self, cut, flat):
        xi = np.array([[10.0, 0.0]])
        p = P.parametrix_symbol(flat, cut, np.zeros(2), xi, cal=4 * np.pi)
        assert abs(p[0] - 10.0 / (4 * np.pi)) < 1e-12

    def test_conformal_origin_value(self, cut, gauss):
        xi = np.array([[0.0, 20.0]])
        p = P.parametrix_symbol(gauss, cut, np.zeros(2), xi, cal=4 * np.pi)
        want = 20.0 / (4 * np.pi * np.sqrt(1.2))
        assert abs(p[0] - want) < 1e-12 * want

    @settings(max_examples=25, deadline=None)
    @given(s=st.floats(6.0, 30.0), lam=st.floats(1.0, 3.0),
           ang=st.floats(0.0, 2 * np.pi))
    def test_homogeneous_above_the_ramp(self, cut, gauss, s, lam, ang):
        # zeta == 1 past the ramp, so scaling the frequency scales the
        # symbol exactly (degree one)
        xi = s * np.array([[np.cos(ang), np.sin(ang)]])
        x = np.array([0.2, -0.1])
        p1 = P.parametrix_symbol(gauss, cut, x, xi, cal=4 * np.pi)
        p2 = P.parametrix_symbol(gauss, cut, x, lam * xi, cal=4 * np.pi)
        assert abs(p2[0] - lam * p1[0]) < 1e-10 * max(1.0, abs(p2[0]))


class TestSobolevNorm:
    def test_order_zero_is_the_l2_norm(self, layout64):
        rng = np.random.default_rng(13)
        f = layout64.with_values(rng.normal(size=layout64.shape))
        assert abs(P.sobolev_norm(f, 0.0) - f.norm_l2()) < 1e-14

    def test_packet_scaling_matches_its_frequency(self, layout64):
        pk = P.wave_packet(layout64.side, 4)
        f = layout64.with_values(pk(layout64.mesh_points()))
        s0 = P.sobolev_norm(f, 0.0)
        for t in (-1.0, 1.0):
            ratio = P.sobolev_norm(f, t) / s0
            pred = (1.0 + pk.freq ** 2) ** (t / 2)
            assert abs(ratio / pred - 1.0) < 5e-2

    def test_monotone_in_the_order(self, layout64):
        pk = P.wave_packet(layout64.side, 3)
        f = layout64.with_values(pk(layout64.mesh_points()))
        norms = [P.sobolev_norm(f, t) for t in (-1.0, 0.0, 1.0)]
        assert norms[0] < norms[1] < norms[2]


class TestResidual:
    def test_support_guard_rejects_wide_fields(self, cut, flat):
        layout = ScalarGrid.square(64)
        f = banded_random_field(layout, env_width=0.45)
        with pytest.raises(ValueError):
            P.residual(flat, cut, f)

    def test_flat_packet_residual_is_small(self, cut, flat):
        layout = ScalarGrid.square(128)
        pk = P.wave_packet(layout.side, 4)
        f = layout.with_values(pk(layout.mesh_points()))
        pnf, res = P.residual(flat, cut, f)
        ratio = res.norm_l2() / f.norm_l2()
        assert 1e-3 < ratio < 0.1

    def test_residual_falls_under_refinement(self, cut, flat):
        pk = P.wave_packet(2.2, 4)
        ratios = []
        for n in (96, 128, 160):
            layout = ScalarGrid.square(n)
            f = layout.with_values(pk(layout.mesh_points()))
            pnf, res = P.residual(flat, cut, f)
            ratios.append(res.norm_l2() / f.norm_l2())
        assert ratios[0] > ratios[1] > ratios[2]


class TestWavePacket:
    def test_frequency_sits_on_the_lattice(self):
        for j in (3, 4, 5, 6):
            pk = P.wave_packet(2.2, j)
            kint = np.asarray(pk.kvec) / (2 * np.pi / 2.2)
            assert np.abs(kint - np.rint(kint)).max() < 1e-12
            assert abs(pk.freq / 2.0 ** j * 2.2 / (2 * np.pi) - 1.0) < 0.1

    def test_envelope_peaks_at_the_center(self):
        # the harmonic phase is anchored at the physical origin, so the
        # packet value at its center is the bare cosine there
        pk = P.wave_packet(2.2, 3, center=(0.1, -0.2))
        x0 = np.array([0.1, -0.2])
        want = np.cos(x0 @ np.asarray(pk.kvec))
        assert abs(pk(x0) - want) < 1e-14
        off = x0 + np.array([0.15, 0.0])
        bare = np.cos(off @ np.asarray(pk.kvec))
        decay = pk(off) / bare
        assert abs(decay - np.exp(-0.15 ** 2 / (2 * 0.15 ** 2))) < 1e-12

    def test_degenerate_inputs_rejected(self):
        with pytest.raises(ValueError):
            P.wave_packet(2.2, 3, direction=(0.0, 0.0))
        with pytest.raises(ValueError):
            P.wave_packet(2.2, -3)


class TestSmoothingStudy:
    def test_report_structure_from_short_run(self, cut, flat):
        rep = P.smoothing_order(flat, cut, levels=(3, 4, 5), n=96,
                                quad={3: (65, 128), 4: (97, 128),
                                      5: (129, 192)})
        rep.validate()
        assert len(rep.rows()) == 3
        assert np.all(rep.ratios > 0.0)
        assert np.isfinite(rep.tau_hat) and np.isfinite(rep.r_squared)
        assert rep.band_edges[0] == 0.0 and np.isinf(rep.band_edges[-1])
        assert "fitted smoothing order" in rep.table()

    def test_needs_three_levels(self, cut, flat):
        with pytest.raises(ValueError):
            P.smoothing_order(flat, cut, levels=(3, 4))


class TestSymbolCalculus:
    def test_ellipticity_gap_is_moderate(self, cut, flat, gauss):
        layout = ScalarGrid.square(64)
        f = banded_random_field(layout)
        r_flat, _ = P.ellipticity_gap(flat, cut, f)
        r_gauss, _ = P.ellipticity_gap(gauss, cut, f)
        assert r_flat < 0.5
        assert 0.1 < r_flat < 0.35
        # the conformal factor cancels between the two symbols, so the
        # composed action is metric independent across this family
        assert abs(r_flat - r_gauss) < 1e-6

    def test_difference_symbol_loses_an_order(self, cut, flat):
        rep = P.order_gain_ratios(flat, cut)
        assert rep.slope < -0.7
        assert rep.ratios[0] > rep.ratios[-1]
        assert rep.r_squared > 0.6
