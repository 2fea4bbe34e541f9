import numpy as np
import pytest

import qudit_readout.nmr as nmr
from qudit_readout.nmr import (
    FitError,
    LevelTrackingError,
    NmrSpectrumSet,
    RankDeficientError,
    fit_quadrupole,
    nmr_frequencies,
    nmr_frequency_curve,
    splittings,
    synth_spectra,
)
from qudit_readout.spin import PhysicalParams, QuadrupoleTensor, SpinQuantum

ANGLES_19 = np.deg2rad(np.arange(0, 181, 10))


@pytest.fixture(scope="module")
def clean(sb_params, sb_tensor, sq8):
    return synth_spectra(sb_params, sb_tensor, sq8, ANGLES_19, 0.0, 0)


class TestForwardModel:
    def test_pure_zeeman(self, sb_params, sq8):
        f = nmr_frequencies(sb_params, QuadrupoleTensor.zero(), sq8)
        assert np.allclose(f, sb_params.gamma_n * sb_params.b0, rtol=0, atol=1e-8)

    def test_ionized_splittings(self, sb_params, sb_tensor, sq8):
        fq1, fq2 = splittings(nmr_frequencies(sb_params, sb_tensor, sq8))
        assert abs(abs(fq1) - 22.5) / 22.5 < 0.02
        assert abs(abs(fq2) - 0.70) / 0.70 < 0.15

    def test_neutral_splitting(self, sb_params, sb_tensor, sq8):
        fq1, _ = splittings(nmr_frequencies(sb_params, sb_tensor, sq8, "neutral"))
        assert abs(abs(fq1) - 134.0) / 134.0 < 0.15

    def test_first_order_perturbation(self, sb_params, sb_tensor, sq8):
        fq1, _ = splittings(nmr_frequencies(sb_params, sb_tensor, sq8))
        bound = 10 * np.abs(sb_tensor.matrix).max() ** 2 / (sb_params.gamma_n * sb_params.b0)
        assert abs(abs(fq1) - 3 * sb_tensor.qzz) < bound

    def test_first_order_splitting_sign_change_near_45(self, sb_params, sb_tensor, sq8):
        curve = nmr_frequency_curve(sb_params, sb_tensor, sq8, np.deg2rad([30, 40, 50, 60]))
        fq1 = [splittings(row)[0] for row in curve]
        assert np.sign(fq1[0]) == np.sign(fq1[1])
        assert np.sign(fq1[1]) != np.sign(fq1[2])
        assert np.sign(fq1[2]) == np.sign(fq1[3])

    def test_180_degree_periodicity(self, sb_params, sb_tensor, sq8):
        th = np.deg2rad(np.arange(0, 91, 15))
        a = nmr_frequency_curve(sb_params, sb_tensor, sq8, th)
        b = nmr_frequency_curve(sb_params, sb_tensor, sq8, th + np.pi)
        fa = np.array([splittings(r) for r in a])
        fb = np.array([splittings(r) for r in b])
        assert np.abs(fa - fb).max() < 1e-6

    def test_continuity_on_degree_grid(self, sb_params, sb_tensor, sq8):
        curve = nmr_frequency_curve(sb_params, sb_tensor, sq8, np.deg2rad(np.arange(-90, 181)))
        assert np.abs(np.diff(curve, axis=0)).max() < 5.0

    def test_negative_angles_tracked(self, sb_params, sb_tensor, sq8):
        both = nmr_frequency_curve(sb_params, sb_tensor, sq8, np.deg2rad([-20.0, 20.0]))
        assert both.shape == (2, 7)
        assert np.all(both > 0)

    def test_neutral_larger_spacing(self, sb_params, sb_tensor, sq8):
        f = nmr_frequencies(sb_params, sb_tensor, sq8, "neutral")
        assert f.shape == (7,)

    def test_unknown_charge_state(self, sb_params, sb_tensor, sq8):
        with pytest.raises(ValueError):
            nmr_frequencies(sb_params, sb_tensor, sq8, "cationic")

    def test_ambiguous_tracking_raises(self, sb_params, sb_tensor, sq8, monkeypatch):
        monkeypatch.setattr(nmr, "TRACK_MARGIN", 1.01)
        with pytest.raises(LevelTrackingError, match="finer angle step"):
            nmr_frequency_curve(sb_params, sb_tensor, sq8, [np.deg2rad(10)])


class TestSplittings:
    def test_equal_spacing(self):
        assert splittings([1.0, 3.0, 5.0, 7.0]) == (2.0, 0.0)

    def test_offset_invariant(self):
        f = np.array([10.0, 12.5, 13.1, 17.0])
        assert np.allclose(splittings(f), splittings(f + 1234.5))

    def test_too_few(self):
        with pytest.raises(ValueError):
            splittings([1.0, 2.0])


class TestSynth:
    def test_noiseless_exact(self, sb_params, sb_tensor, sq8, clean):
        assert np.array_equal(clean.freqs, nmr_frequency_curve(sb_params, sb_tensor, sq8, ANGLES_19))
        assert np.all(clean.sigma == 1.0)

    def test_seeds(self, sb_params, sb_tensor, sq8):
        angles = np.linspace(0, np.pi, 1500)
        exact = nmr_frequency_curve(sb_params, sb_tensor, sq8, angles)
        a = synth_spectra(sb_params, sb_tensor, sq8, angles, 0.5, 1)
        b = synth_spectra(sb_params, sb_tensor, sq8, angles, 0.5, 2)
        assert not np.array_equal(a.freqs, b.freqs)
        n = exact.size
        for s in (a, b):
            assert abs(np.mean(s.freqs - exact)) < 3 * 0.5 / np.sqrt(n)
        assert np.array_equal(a.freqs, synth_spectra(sb_params, sb_tensor, sq8, angles, 0.5, 1).freqs)

    def test_spectrum_set_validation(self):
        with pytest.raises(ValueError):
            NmrSpectrumSet(np.zeros(2), np.ones((3, 7)), 1.0)
        with pytest.raises(ValueError):
            NmrSpectrumSet(np.zeros(1), np.ones((1, 7)), 0.0)
        assert NmrSpectrumSet(np.zeros(1), np.ones((1, 7)), 1.0).dimension == 8

    def test_negative_noise(self, sb_params, sb_tensor, sq8):
        with pytest.raises(ValueError):
            synth_spectra(sb_params, sb_tensor, sq8, [0.0], -1.0, 0)


class TestFit:
    def test_noiseless_recovery(self, sb_params, sb_tensor, clean):
        fit = fit_quadrupole(clean, sb_params)
        assert np.abs(fit.tensor.params - sb_tensor.params).max() < 1e-6
        assert fit.residual_rms < 1e-6
        assert fit.covariance.shape == (5, 5)
        assert np.all(fit.std_errors >= 0)

    def test_mirror_is_spectrally_identical(self, sb_params, sq8, clean):
        fit = fit_quadrupole(clean, sb_params)
        mirror = nmr_frequency_curve(sb_params, fit.mirror, sq8, ANGLES_19)
        assert np.abs(mirror - clean.freqs).max() < 1e-8

    def test_init_sign_picks_branch(self, sb_params, sb_tensor, clean):
        fit = fit_quadrupole(clean, sb_params, init=QuadrupoleTensor(qxy=25.0, qyz=-3.0))
        assert fit.tensor.qxy > 0
        assert np.abs(fit.tensor.params - fit.mirror.params).max() > 1
        assert np.abs(fit.mirror.params - sb_tensor.params).max() < 1e-6

    @pytest.mark.parametrize("seed", range(4))
    def test_noisy_within_three_sigma(self, sb_params, sb_tensor, sq8, seed):
        data = synth_spectra(sb_params, sb_tensor, sq8, ANGLES_19, 0.5, 100 + seed)
        fit = fit_quadrupole(data, sb_params)
        assert np.all(np.abs(fit.tensor.params - sb_tensor.params) < 3 * fit.std_errors)
        assert 0.2 < fit.residual_rms < 0.8

    def test_sigma_scaling(self, sb_params, sb_tensor, sq8):
        data = synth_spectra(sb_params, sb_tensor, sq8, ANGLES_19, 0.5, 7)
        scaled = NmrSpectrumSet(data.angles, data.freqs, data.sigma * 3.0)
        a, b = fit_quadrupole(data, sb_params), fit_quadrupole(scaled, sb_params)
        assert np.allclose(a.tensor.params, b.tensor.params, atol=1e-6)
        assert np.allclose(b.std_errors, 3.0 * a.std_errors, rtol=1e-5)

    def test_fit_larmor(self, sb_params, sb_tensor, clean):
        fit = fit_quadrupole(clean, sb_params.replace(b0=1.3955), fit_larmor=True)
        assert fit.larmor == pytest.approx(sb_params.nuclear_larmor, abs=1e-5)
        assert np.abs(fit.tensor.params - sb_tensor.params).max() < 1e-5
        assert fit.larmor_std_error is not None

    def test_single_angle_rank_deficient(self, sb_params, sb_tensor, sq8):
        data = synth_spectra(sb_params, sb_tensor, sq8, [np.deg2rad(10)], 0.0, 0)
        with pytest.raises(RankDeficientError) as info:
            fit_quadrupole(data, sb_params)
        assert info.value.direction.shape == (5,)
        assert isinstance(info.value, FitError)

    def test_neutral_fit(self, sb_params, sb_tensor, sq8):
        angles = np.deg2rad(np.arange(0, 181, 20))
        data = synth_spectra(sb_params, sb_tensor, sq8, angles, 0.0, 0, "neutral")
        fit = fit_quadrupole(data, sb_params)
        assert np.abs(fit.tensor.params - sb_tensor.params).max() < 1e-5

    def test_iteration_budget(self, sb_params, clean):
        with pytest.raises(FitError, match="did not converge"):
            fit_quadrupole(clean, sb_params, max_iterations=2)
