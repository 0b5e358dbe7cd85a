"""Calibration closures: every route must recover injected ground truth."""

import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from twinbeam.calibration import (
    CoincidenceRecord,
    EmGainModel,
    PnrHistograms,
    analog_calibration,
    dark_click_probability,
    efficiency_from_nrf_alpha,
    em_output_pmf,
    emccd_threshold_calibration,
    klyshko_efficiency,
    pnr_efficiencies,
    predicted_threshold_efficiency,
    simulate_em_readout,
    simulate_emccd_pair,
    simulate_klyshko,
    simulate_pnr,
)
from twinbeam.errors import DataError, DomainError
from twinbeam.estimators import nrf_alpha_grid
from twinbeam.geometry import ModeLayout, collection_efficiency, \
    synthesize_layout_frames
from twinbeam.reports import read_provenance, read_table
from twinbeam.rng import stream


class TestCoincidenceRecord:
    def test_formula_example(self):
        est = klyshko_efficiency(CoincidenceRecord(5000, 100, 100000, 2000, 0.98))
        assert est.value == pytest.approx(4900 / 96040, rel=1e-12)
        assert est.status == "ok"
        assert 0 < est.standard_error < 0.01

    def test_measured_equals_accidental(self):
        est = klyshko_efficiency(CoincidenceRecord(300, 300, 5000, 10, 0.9))
        assert est.value == 0.0

    def test_noiseless_ideal(self):
        est = klyshko_efficiency(CoincidenceRecord(700, 0, 2000, 0, 1.0))
        assert est.value == pytest.approx(700 / 2000, rel=1e-12)

    def test_above_unity_flagged(self):
        est = klyshko_efficiency(CoincidenceRecord(99000, 0, 100000, 0, 0.5))
        assert est.value > 1.0
        assert est.status == "inconsistent"

    def test_no_true_triggers(self):
        with pytest.raises(DomainError):
            klyshko_efficiency(CoincidenceRecord(10, 5, 400, 400, 0.9))

    @pytest.mark.parametrize("args", [
        (100, 200, 1000, 0, 0.9),    # accidentals above measured
        (100, 0, 1000, 2000, 0.9),   # noise above triggers
        (100, 0, 1000, 0, 0.0),      # transmission at zero
        (100, 0, 1000, 0, 1.5),      # transmission above one
        (-1, 0, 1000, 0, 0.9),
        (100.5, 0, 1000, 0, 0.9),
    ])
    def test_validation(self, args):
        with pytest.raises(DomainError):
            CoincidenceRecord(*args)

    def test_csv_round_trip(self, tmp_path):
        rec = CoincidenceRecord(5000, 100, 100000, 2000, 0.98, windows=10**6)
        path = tmp_path / "klyshko.csv"
        rec.save_csv(path, provenance={"run": "bench-a"})
        assert CoincidenceRecord.load_csv(path) == rec
        assert read_provenance(path)["run"] == "bench-a"


class TestKlyshkoSimulation:
    TRUE_ETA = 0.6

    def test_closure_within_one_percent(self):
        rec = simulate_klyshko(self.TRUE_ETA, 0.9, 0.98, 0.01, 1e-4, 1e-4,
                               10**6, stream(25, 0))
        est = klyshko_efficiency(rec)
        assert abs(est.value - self.TRUE_ETA) / self.TRUE_ETA < 0.01
        assert abs(est.value - self.TRUE_ETA) < 3 * est.standard_error

    def test_zero_noise_zero_accidentals(self):
        rec = simulate_klyshko(0.6, 0.9, 0.98, 0.01, 0.0, 0.0, 200000,
                               stream(25, 1))
        assert rec.accidental == 0
        assert rec.trigger_noise == 0

    @pytest.mark.parametrize("eta2", [0.1, 0.9])
    def test_trigger_efficiency_invariance(self, eta2):
        rec = simulate_klyshko(self.TRUE_ETA, eta2, 0.98, 0.01, 1e-4, 1e-4,
                               10**6, stream(25, 2))
        est = klyshko_efficiency(rec)
        assert abs(est.value - self.TRUE_ETA) < 3 * est.standard_error

    def test_trigger_efficiency_slope_zero(self):
        vals = []
        for i, eta2 in enumerate((0.1, 0.9)):
            rec = simulate_klyshko(self.TRUE_ETA, eta2, 0.98, 0.01, 1e-4,
                                   1e-4, 10**6, stream(25, 3 + i))
            est = klyshko_efficiency(rec)
            vals.append((est.value, est.standard_error))
        diff = vals[1][0] - vals[0][0]
        sigma = math.hypot(vals[0][1], vals[1][1])
        assert abs(diff) < 3 * sigma

    @pytest.mark.parametrize("rate", [0.002, 0.01])
    def test_pair_rate_invariance(self, rate):
        rec = simulate_klyshko(self.TRUE_ETA, 0.9, 0.98, rate, 1e-4, 1e-4,
                               10**6, stream(25, 5))
        est = klyshko_efficiency(rec)
        assert abs(est.value - self.TRUE_ETA) < 3 * est.standard_error

    def test_poisson_pairs_close(self):
        rec = simulate_klyshko(self.TRUE_ETA, 0.9, 0.98, 0.01, 1e-4, 1e-4,
                               10**6, stream(25, 6), pair_dist="poisson")
        est = klyshko_efficiency(rec)
        assert abs(est.value - self.TRUE_ETA) / self.TRUE_ETA < 0.03

    def test_high_pair_rate_warns(self):
        with pytest.warns(UserWarning, match="low-flux"):
            simulate_klyshko(0.6, 0.9, 0.98, 0.05, 0.0, 0.0, 1000,
                             stream(25, 7))

    @pytest.mark.parametrize("kwargs", [
        {"eta1": 1.2}, {"eta2": -0.1}, {"tau": 0.0}, {"pair_rate": 1.0},
        {"noise1": -0.2}, {"windows": 1}, {"pair_dist": "fixed"},
    ])
    def test_validation(self, kwargs):
        base = dict(eta1=0.6, eta2=0.9, tau=0.98, pair_rate=0.005,
                    noise1=0.0, noise2=0.0, windows=100,
                    rng=stream(25, 8))
        base.update(kwargs)
        with pytest.raises(DomainError):
            simulate_klyshko(**base)


class TestPnrHistograms:
    def test_peak_zero_example(self):
        h = PnrHistograms([0.4, 0.6], [0.5, 0.5], 0.8)
        res = pnr_efficiencies(h, peaks=[0])
        assert res.peaks[0].value == pytest.approx(0.25, rel=1e-12)
        assert math.isnan(res.peaks[0].standard_error)  # no sample counts

    def test_equal_histograms_all_zero(self):
        h = PnrHistograms([0.3, 0.4, 0.3], [0.3, 0.4, 0.3], 0.9)
        res = pnr_efficiencies(h)
        assert all(p.value == 0.0 for p in res.peaks if p.status == "ok")
        assert res.combined == 0.0

    def test_flat_step_degenerate_not_fatal(self):
        h = PnrHistograms([0.2, 0.3, 0.5], [0.25, 0.25, 0.5], 0.9)
        res = pnr_efficiencies(h)
        assert res.peak(1).status == "degenerate"
        assert math.isnan(res.peak(1).value)
        assert res.peak(2).status == "ok"

    def test_histogram_padding(self):
        h = PnrHistograms([1.0], [0.5, 0.5], 0.9)
        assert h.width == 2
        assert h.heralded[1] == 0.0

    @pytest.mark.parametrize("kwargs,err", [
        ({"heralded": [0.5, 0.6], "unheralded": [0.5, 0.5]}, DataError),
        ({"heralded": [0.5, 0.5], "unheralded": [0.7, 0.5]}, DataError),
        ({"heralded": [1.2, -0.2], "unheralded": [0.5, 0.5]}, DataError),
        ({"herald_purity": 0.0}, DomainError),
        ({"herald_purity": 1.3}, DomainError),
        ({"n_heralded": -2}, DomainError),
    ])
    def test_validation(self, kwargs, err):
        base = dict(heralded=[0.5, 0.5], unheralded=[0.5, 0.5],
                    herald_purity=0.8)
        base.update(kwargs)
        with pytest.raises(err):
            PnrHistograms(**base)

    def test_peak_range_checked(self):
        h = PnrHistograms([0.5, 0.5], [0.5, 0.5], 0.8)
        with pytest.raises(DomainError):
            pnr_efficiencies(h, peaks=[5])

    def test_csv_round_trip(self, tmp_path):
        sim = simulate_pnr(0.5, 0.9, 4000, 4000, stream(30, 0),
                           background=("poisson", 0.8))
        path = tmp_path / "pnr.csv"
        sim.save_csv(path)
        back = PnrHistograms.load_csv(path)
        np.testing.assert_array_equal(back.heralded, sim.heralded)
        np.testing.assert_array_equal(back.unheralded, sim.unheralded)
        assert back.herald_purity == sim.herald_purity
        assert back.n_heralded == sim.n_heralded
        assert back.meta["background"] == "poisson(mean=0.8)"

    def test_thermal_closure_three_se(self):
        truth = 0.6
        sim = simulate_pnr(truth, 0.85, 200000, 200000, stream(31, 0),
                           background=("thermal", 1.2))
        res = pnr_efficiencies(sim)
        usable = [p for p in res.peaks if p.status == "ok"]
        assert len(usable) >= 6
        for p in usable:
            assert abs(p.value - truth) < 3 * p.standard_error
        assert abs(res.combined - truth) < 3 * res.combined_se
        assert res.combined_se < 0.005

    def test_peak_consistency_chi_square(self):
        sim = simulate_pnr(0.6, 0.85, 200000, 200000, stream(31, 0),
                           background=("thermal", 1.2))
        res = pnr_efficiencies(sim)
        assert res.dof >= 5
        assert res.p_value > 1e-3

    def test_poisson_background_full_purity(self):
        truth = 0.35
        sim = simulate_pnr(truth, 1.0, 150000, 150000, stream(32, 0),
                           background=("poisson", 1.0))
        res = pnr_efficiencies(sim)
        assert abs(res.combined - truth) < 3 * res.combined_se

    def test_combination_beats_single_peaks(self):
        sim = simulate_pnr(0.6, 0.85, 100000, 100000, stream(33, 0),
                           background=("thermal", 1.2))
        res = pnr_efficiencies(sim)
        best = min(p.standard_error for p in res.peaks if p.status == "ok")
        assert res.combined_se < best

    def test_simulation_validation(self):
        with pytest.raises(DomainError):
            simulate_pnr(1.4, 0.9, 100, 100, stream(30, 1))
        with pytest.raises(DomainError):
            simulate_pnr(0.5, 0.9, 100, 100, stream(30, 1),
                         background=("binomial", 1.0))


LAYOUT = ModeLayout.from_dimensionless(8.0)


class TestAnalogCalibration:
    TRUE_ETA = 0.55
    MU = 0.1

    @classmethod
    def setup_class(cls):
        cls.frames = synthesize_layout_frames(
            LAYOUT, cls.MU, (12, 12), 20000, stream(41, 1),
            eta1=cls.TRUE_ETA, eta2=cls.TRUE_ETA)
        cls.est = analog_calibration(*cls.frames, LAYOUT, mu=cls.MU)

    def test_trivial_inversion(self):
        assert efficiency_from_nrf_alpha(0.3, 1.0, 1.0) == pytest.approx(0.7)

    def test_collection_must_be_positive(self):
        with pytest.raises(DomainError):
            efficiency_from_nrf_alpha(0.3, 1.0, 0.0)

    def test_closure_two_percent(self):
        assert self.est.status == "ok"
        assert abs(self.est.value - self.TRUE_ETA) / self.TRUE_ETA < 0.02
        assert abs(self.est.value - self.TRUE_ETA) < 4 * self.est.standard_error

    def test_collection_mismatch_shifts_proportionally(self):
        f1, f2 = (f[:, 1:-1, 1:-1] for f in self.frames)
        rep = nrf_alpha_grid(f1, f2)
        a = collection_efficiency(LAYOUT, self.MU)
        for scale in (0.9, 1.1):
            shifted = efficiency_from_nrf_alpha(rep.value, rep.meta["alpha"],
                                                scale * a)
            assert shifted == pytest.approx(self.est.value / scale, rel=1e-9)

    def test_read_noise_biases_low(self):
        sigma_r = 0.5
        rng = stream(41, 2)
        f1 = self.frames[0] + rng.normal(0.0, sigma_r, self.frames[0].shape)
        f2 = self.frames[1] + rng.normal(0.0, sigma_r, self.frames[1].shape)
        noisy = analog_calibration(f1, f2, LAYOUT, mu=self.MU)
        mean_sum = f1[:, 1:-1, 1:-1].mean() + f2[:, 1:-1, 1:-1].mean()
        predicted_drop = 2 * sigma_r**2 / (
            mean_sum * collection_efficiency(LAYOUT, self.MU))
        drop = self.est.value - noisy.value
        assert drop > 0
        assert drop == pytest.approx(predicted_drop, rel=0.25)

    def test_negative_collection_rejected(self):
        skew = ModeLayout.from_dimensionless(3.0, 0.2)
        with pytest.warns(UserWarning):
            with pytest.raises(DomainError):
                analog_calibration(*self.frames, skew, mu=50.0)

    def test_trim_needs_grid_frames(self):
        flat = self.frames[0].reshape(20000, -1)
        with pytest.raises(DataError):
            analog_calibration(flat, flat, LAYOUT, mu=self.MU, trim=1)

    def test_trim_bounds(self):
        with pytest.raises(DomainError):
            analog_calibration(*self.frames, LAYOUT, mu=self.MU, trim=6)


class TestEmOutputDensity:
    MODEL = EmGainModel(100.0, 10.0)

    @pytest.mark.parametrize("kwargs", [
        {"gain": 0.0}, {"gain": -5.0}, {"read_noise": -1.0},
        {"threshold": math.inf},
    ])
    def test_model_validation(self, kwargs):
        base = dict(gain=100.0, read_noise=10.0)
        base.update(kwargs)
        with pytest.raises(DomainError):
            EmGainModel(**base)

    def test_zero_photons_point_mass(self):
        d = em_output_pmf(0, EmGainModel(100.0, 0.0))
        assert d.survival(-1.0) == 1.0
        assert d.survival(0.0) == 0.0
        assert d.pdf(1.0) == 0.0
        assert np.isinf(d.pdf(0.0))

    def test_single_photon_exponential(self):
        g = 100.0
        d = em_output_pmf(1, EmGainModel(g, 0.0))
        x = np.array([0.5, 30.0, 250.0])
        np.testing.assert_allclose(d.pdf(x), np.exp(-x / g) / g, rtol=1e-12)
        assert d.survival(30.0) == pytest.approx(math.exp(-0.3), rel=1e-12)

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
    def test_density_normalized(self, n):
        d = em_output_pmf(n, self.MODEL)
        head, _ = quad(lambda x: float(d.pdf(x)), -160.0, 160.0, limit=400)
        tail, _ = quad(lambda x: float(d.pdf(x)), 160.0, 100.0 * n + 2600.0,
                       limit=400)
        assert head + tail == pytest.approx(1.0, abs=1e-6)

    def test_noisy_survival_closed_form(self):
        g, sr, t = 100.0, 10.0, 30.0
        d = em_output_pmf(1, self.MODEL)
        exact = (math.exp(-t / g) * math.exp(sr**2 / (2 * g**2))
                 * norm.cdf((t - sr**2 / g) / sr) + norm.sf(t / sr))
        assert float(d.survival(t)) == pytest.approx(exact, rel=1e-12)

    def test_survival_matches_pdf_integral(self):
        d = em_output_pmf(3, self.MODEL)
        for t in (-20.0, 0.0, 150.0, 600.0):
            tail, _ = quad(lambda x: float(d.pdf(x)), t, 300.0 + 2600.0,
                           limit=400)
            assert float(d.survival(t)) == pytest.approx(tail, abs=1e-8)

    def test_dark_click_probability(self):
        assert dark_click_probability(self.MODEL, 30.0) == pytest.approx(
            norm.sf(3.0), rel=1e-9)
        assert dark_click_probability(EmGainModel(50.0, 0.0), 5.0) == 0.0

    def test_readout_sampler_moments(self):
        rng = stream(50, 0)
        counts = np.repeat(np.arange(4), 50000)
        out = simulate_em_readout(counts, self.MODEL, rng)
        for n in range(4):
            sel = out[counts == n]
            g, sr = self.MODEL.gain, self.MODEL.read_noise
            se_mean = math.sqrt((n * g**2 + sr**2) / sel.size)
            assert abs(sel.mean() - n * g) < 4 * se_mean
        noiseless = simulate_em_readout(np.zeros(100, dtype=int),
                                        EmGainModel(100.0, 0.0), rng)
        assert np.all(noiseless == 0.0)

    def test_negative_counts_rejected(self):
        with pytest.raises(DomainError):
            simulate_em_readout(np.array([-1, 2]), self.MODEL, stream(50, 1))


class TestEmccdCalibration:
    MODEL = EmGainModel(100.0, 10.0)
    BASE = 0.5
    MU = 0.0009
    GRID_T = [15.0, 20.0, 30.0, 50.0, 80.0, 120.0]

    @classmethod
    def setup_class(cls):
        cls.adu = simulate_emccd_pair(LAYOUT, cls.MU, (16, 16), 12000,
                                      cls.MODEL, cls.BASE, stream(53, 0))
        cls.cal = emccd_threshold_calibration(*cls.adu, cls.MODEL, LAYOUT,
                                              cls.GRID_T, mu=cls.MU)

    def test_anchor_threshold_within_three_percent(self):
        # three read-noise sigmas, the canonical photon-counting cut
        i = self.GRID_T.index(30.0)
        predicted = predicted_threshold_efficiency(self.MODEL, self.BASE, 30.0)
        assert self.cal.status[i] == "ok"
        assert abs(self.cal.efficiency[i] - predicted) / predicted < 0.03

    @pytest.mark.parametrize("t", [20.0, 50.0, 80.0])
    def test_curve_matches_forward_model(self, t):
        i = self.GRID_T.index(t)
        predicted = predicted_threshold_efficiency(self.MODEL, self.BASE, t)
        assert abs(self.cal.efficiency[i] - predicted) / predicted < 0.03

    def test_monotone_non_increasing(self):
        assert self.cal.monotone()

    def test_base_efficiency_recovered(self):
        base = self.cal.base
        assert abs(base.value - self.BASE) < 4 * base.standard_error
        assert base.meta["path"] == "analog"

    def test_saturated_threshold_rejected(self):
        cal = emccd_threshold_calibration(*self.adu, self.MODEL, LAYOUT,
                                          [-1e6, 30.0], mu=self.MU)
        assert cal.status[0] == "saturated"
        assert math.isnan(cal.efficiency[0])
        assert cal.status[1] == "ok"
        assert cal.monotone()

    def test_dark_only_threshold_no_signal(self):
        cal = emccd_threshold_calibration(*self.adu, self.MODEL, LAYOUT,
                                          [1e7], mu=self.MU)
        assert cal.status == ("no-signal",)

    def test_zero_threshold_zero_noise_is_base(self):
        model = EmGainModel(100.0, 0.0)
        assert predicted_threshold_efficiency(model, self.BASE, 0.0) \
            == pytest.approx(self.BASE, rel=1e-12)
        adu = simulate_emccd_pair(LAYOUT, self.MU, (16, 16), 8000, model,
                                  self.BASE, stream(53, 1))
        cal = emccd_threshold_calibration(*adu, model, LAYOUT, [0.0],
                                          mu=self.MU)
        assert cal.status == ("ok",)
        assert abs(cal.efficiency[0] - self.BASE) / self.BASE < 0.03

    def test_curve_csv_round_trip(self, tmp_path):
        path = tmp_path / "curve.csv"
        self.cal.save_csv(path)
        header, rows = read_table(path)
        assert header == ["threshold", "efficiency", "standard_error",
                          "status"]
        assert len(rows) == len(self.GRID_T)
        assert [float(r[0]) for r in rows] == self.GRID_T
        prov = read_provenance(path)
        assert float(prov["gain"]) == self.MODEL.gain
        assert float(prov["base_efficiency"]) == self.cal.base.value

    def test_threshold_grid_validation(self):
        with pytest.raises(DomainError):
            emccd_threshold_calibration(*self.adu, self.MODEL, LAYOUT, [],
                                        mu=self.MU)
        with pytest.raises(DomainError):
            emccd_threshold_calibration(*self.adu, self.MODEL, LAYOUT,
                                        [np.nan], mu=self.MU)
