import math

import numpy as np
import pytest

import twinbeam as tb
from twinbeam.errors import DataError, DomainError
from twinbeam.geometry import bin_grid
from twinbeam.imaging import (
    AbsorptionImage,
    AbsorptionObject,
    bin_mask,
    binning_sweep,
    estimate_alpha,
    measure_reference,
    phi_mask,
    pi_mask,
    predicted_alpha_uncertainty,
    simulate_imaging,
    snr_ratio,
)


def ssn_setup(alpha, eta, mu, mean_n, grid=(16, 16), k=300, seed_path=(0,)):
    """Twin-beam imaging run plus its no-object reference at matched flux."""
    m = mean_n / (eta * mu)
    src = tb.SourceSpec("twin_beam", mu, m)
    obj = AbsorptionObject.uniform(alpha, grid)
    rng = tb.stream(500, *seed_path)
    fs = simulate_imaging(src, obj, "ssn", eta, eta, k, rng)
    ref_fs = simulate_imaging(src, AbsorptionObject.uniform(0.0, grid), "ssn",
                              eta, eta, k, rng)
    return fs, measure_reference(ref_fs.channel(0))


# ---------------------------------------------------------------------------
# objects and masks
# ---------------------------------------------------------------------------

def test_object_validation():
    with pytest.raises(DomainError):
        AbsorptionObject(np.full((4, 4), 1.2))
    with pytest.raises(DomainError):
        AbsorptionObject(np.zeros(16))


def test_object_binning_averages_blocks():
    a = AbsorptionObject(np.kron(np.array([[0.0, 0.4], [0.8, 1.0]]), np.ones((2, 2))))
    b = a.binned(2)
    assert b.alpha.tolist() == [[0.0, 0.4], [0.8, 1.0]]
    with pytest.raises(DataError):
        a.binned(3)


def test_masks_are_nontrivial_and_disjoint_from_background():
    for mask in (pi_mask((48, 48)), phi_mask((48, 48))):
        frac = mask.mean()
        assert 0.05 < frac < 0.5
    # binning keeps a recognizable region
    m3 = bin_mask(phi_mask((48, 48)), 3)
    assert m3.shape == (16, 16)
    assert m3.any() and not m3.all()


def test_from_mask_levels():
    obj = AbsorptionObject.from_mask(np.eye(4, dtype=bool), 0.3, background=0.1)
    assert obj.alpha[0, 0] == 0.3
    assert obj.alpha[0, 1] == 0.1


# ---------------------------------------------------------------------------
# simulation moments
# ---------------------------------------------------------------------------

def test_full_absorption_blanks_probe():
    src = tb.SourceSpec("twin_beam", 0.5, 20)
    obj = AbsorptionObject.uniform(1.0, (4, 4))
    fs = simulate_imaging(src, obj, "ssn", 0.9, 0.9, 50, tb.stream(501, 0))
    assert not fs.channel(0).any()
    assert fs.channel(1).any()


def test_direct_coherent_mean_is_composed_loss():
    src = tb.SourceSpec("coherent", 2.0, 10)
    obj = AbsorptionObject.uniform(0.5, (8, 8))
    fs = simulate_imaging(src, obj, "direct", 0.7, 0.7, 2000, tb.stream(501, 1))
    assert fs.channels == 1
    mean = fs.channel(0).mean()
    expect = 10 * 2.0 * 0.7 * 0.5
    se = math.sqrt(expect / (2000 * 64))
    assert abs(mean - expect) < 4 * se


def test_ssn_no_object_nrf_matches_balanced_prediction():
    eta = 0.7
    src = tb.SourceSpec("twin_beam", 0.5, 30)
    obj = AbsorptionObject.uniform(0.0, (8, 8))
    fs = simulate_imaging(src, obj, "ssn", eta, eta, 1500, tb.stream(501, 2))
    rep = tb.nrf_grid(fs.channel(0), fs.channel(1),
                      prediction=tb.balanced_twb_nrf(eta))
    assert rep.deviation_sigma() < 4.0


def test_scheme_source_compatibility_enforced():
    obj = AbsorptionObject.uniform(0.1, (4, 4))
    with pytest.raises(DomainError):
        simulate_imaging(tb.SourceSpec("twin_beam", 0.5, 5), obj, "differential",
                         0.9, 0.9, 10, tb.stream(0, 0))
    with pytest.raises(DomainError):
        simulate_imaging(tb.SourceSpec("coherent", 0.5, 5), obj, "ssn",
                         0.9, 0.9, 10, tb.stream(0, 0))


def test_layout_based_run_applies_object():
    lay = tb.ModeLayout.from_dimensionless(5.0, 0.0, 0.5)
    src = tb.SourceSpec("twin_beam", 0.5)
    obj = AbsorptionObject.uniform(0.4, (8, 8))
    fs = simulate_imaging(src, obj, "ssn", 0.8, 0.8, 400, tb.stream(501, 3),
                          layout=lay)
    probe, ref = fs.pair()
    inner = (slice(None), slice(1, -1), slice(1, -1))
    ratio = probe[inner].mean() / ref[inner].mean()
    assert ratio == pytest.approx(0.6, abs=0.02)


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

def test_noiseless_reconstruction_is_exact():
    # deterministic counts: probe = (1-alpha) * n, reference = n
    from twinbeam.imaging import ReferenceFlux
    probe = np.full((5, 3, 3), 700, dtype=np.uint32)
    ref_frames = np.full((5, 3, 3), 1000, dtype=np.uint32)
    reference = ReferenceFlux(1000.0, 0.0, 5)
    img = estimate_alpha((probe, ref_frames), "ssn", reference)
    assert np.allclose(img.alpha_hat, 0.3)
    img_d = estimate_alpha((probe, None), "direct", reference)
    assert np.allclose(img_d.alpha_hat, 0.3)


def test_alpha_estimates_unbiased():
    alpha = 0.3
    fs, ref = ssn_setup(alpha, eta=0.6, mu=5.0, mean_n=1000.0, seed_path=(1,))
    img = estimate_alpha(fs, "ssn", ref)
    pooled_se = img.std_error.mean() / math.sqrt(img.alpha_hat.size)
    assert abs(img.alpha_hat.mean() - alpha) < 3 * pooled_se


def test_single_shot_uncertainty_formulas_close():
    # exact formulas: measured single-shot spread within a few percent
    eta, mu, mean_n, alpha = 0.6, 5.0, 1000.0, 0.3
    fs, ref = ssn_setup(alpha, eta, mu, mean_n, seed_path=(2,))
    fano = 1 + eta * mu
    sigma = 1 - eta
    probe, refch = fs.pair()
    diff_samples = (refch.astype(float) - probe) / ref.mean
    pred = predicted_alpha_uncertainty("ssn", alpha, fano, sigma, ref.mean)
    assert diff_samples.std(ddof=1) == pytest.approx(pred, rel=0.05)
    direct_samples = 1 - probe / ref.mean
    pred_d = predicted_alpha_uncertainty("direct", alpha, fano, sigma, ref.mean)
    assert direct_samples.std(ddof=1) == pytest.approx(pred_d, rel=0.05)


def test_reported_per_pixel_se_matches_spread():
    fs, ref = ssn_setup(0.1, eta=0.8, mu=2.0, mean_n=500.0, seed_path=(3,))
    img = estimate_alpha(fs, "ssn", ref)
    spread = img.alpha_hat.std(ddof=1)
    assert img.std_error.mean() == pytest.approx(spread, rel=0.2)


def test_estimate_alpha_validation():
    from twinbeam.imaging import ReferenceFlux
    ref = ReferenceFlux(100.0, 0.1, 10)
    with pytest.raises(DataError):
        estimate_alpha((np.zeros((1, 2, 2), dtype=np.uint32), None), "direct", ref)
    with pytest.raises(DataError):
        estimate_alpha((np.zeros((5, 2, 2), dtype=np.uint32), None), "ssn", ref)
    with pytest.raises(DataError):
        ReferenceFlux(0.0, 0.1, 10)


# ---------------------------------------------------------------------------
# analytic sensitivities
# ---------------------------------------------------------------------------

def test_direct_shot_noise_limit():
    assert predicted_alpha_uncertainty("direct", 0.2, 1.0, 1.0, 100.0) == \
        pytest.approx(math.sqrt(0.8 / 100))


def test_differential_classical_limit():
    # sigma = 1, alpha -> 0: sqrt(2/<n>)
    assert predicted_alpha_uncertainty("differential", 0.0, 1.0, 1.0, 50.0) == \
        pytest.approx(math.sqrt(2 / 50))


def test_ssn_equals_direct_at_half_sigma():
    a = predicted_alpha_uncertainty("ssn", 0.0, 1.0, 0.5, 200.0)
    b = predicted_alpha_uncertainty("direct", 0.0, 1.0, 0.5, 200.0)
    assert a == pytest.approx(b)


def test_snr_ratio_reference_points():
    assert snr_ratio("ssn", "differential", 1e-9, 1.0) == pytest.approx(1.0)
    assert snr_ratio("ssn", "direct", 1e-9, 0.5) == pytest.approx(1.0)
    assert snr_ratio("ssn", "differential", 1e-9, 0.8) == pytest.approx(math.sqrt(0.8), abs=1e-6)
    # exact small-alpha forms
    a, s = 0.2, 0.6
    assert snr_ratio("ssn", "differential", a, s) == \
        pytest.approx(math.sqrt((a + 2 * s * (1 - a)) / (2 - a)))
    assert snr_ratio("ssn", "direct", a, s) == \
        pytest.approx(math.sqrt((a + 2 * s * (1 - a)) / (1 - a)))


def test_uncertainty_ordering():
    # SSN beats differential classical whenever sigma < 1 (all alpha);
    # it beats direct iff sigma < (1 - 2 alpha) / (2 (1 - alpha)), which is
    # the textbook sigma < 1/2 condition in the alpha -> 0 limit
    n = 1000.0
    for alpha in (0.01, 0.3):
        dr = predicted_alpha_uncertainty("direct", alpha, 1.0, 1.0, n)
        dc = predicted_alpha_uncertainty("differential", alpha, 1.0, 1.0, n)
        threshold = (1 - 2 * alpha) / (2 * (1 - alpha))
        for sigma in (0.1, 0.4, 0.8):
            ssn = predicted_alpha_uncertainty("ssn", alpha, 1.0, sigma, n)
            assert ssn < dc
            assert (ssn < dr) == (sigma < threshold), (alpha, sigma)
        assert dc > predicted_alpha_uncertainty("ssn", alpha, 1.0, 0.8, n) > dr


# ---------------------------------------------------------------------------
# detection scenario and binning sweep
# ---------------------------------------------------------------------------

def test_faint_mask_detected_in_ssn_but_not_direct():
    # sigma = 0.8 via eta = 0.2; <N> = eta mu M = 7000 per pixel per frame
    eta, mu, m, k = 0.2, 200.0, 175.0, 300
    src = tb.SourceSpec("twin_beam", mu, m)
    mask = phi_mask((48, 48), stroke=6)
    obj = AbsorptionObject.from_mask(mask, 0.01)
    rng = tb.stream(502, 0)
    fs = simulate_imaging(src, obj, "ssn", eta, eta, k, rng)
    fs0 = simulate_imaging(src, AbsorptionObject.uniform(0.0, (48, 48)), "ssn",
                           eta, eta, k, rng)
    probe, ref_ch = fs.pair()
    # sub-shot-noise at binning 3
    ref3 = measure_reference(bin_grid(fs0.channel(0), 3))
    img3 = estimate_alpha((bin_grid(probe, 3), bin_grid(ref_ch, 3)), "ssn",
                          ref3, binning=3)
    assert img3.detects(bin_mask(mask, 3))
    # direct at native resolution drowns in the thermal excess noise
    ref1 = measure_reference(fs0.channel(0))
    img1 = estimate_alpha((probe, None), "direct", ref1)
    assert not img1.detects(mask)
    assert img1.region_z(mask) > 0  # signal present, just insignificant


def test_binning_sweep_tracks_geometry():
    lay = tb.ModeLayout.from_dimensionless(4.0, 0.0, 0.5)
    eta, mu = 0.9, 0.5
    f1, f2 = tb.synthesize_layout_frames(lay, mu, (16, 16), 1500,
                                         tb.stream(503, 0), eta1=eta, eta2=eta)
    rows = binning_sweep((f1, f2), (1, 2, 4), eta, lay, mu)
    sigmas = [r["sigma"] for r in rows]
    assert sigmas[0] > sigmas[1] > sigmas[2]
    for r in rows:
        assert r["deviation_sigma"] < 4.0
        assert r["ratio_ssn_direct"] == pytest.approx(math.sqrt(2 * r["sigma"]))
        assert r["ratio_ssn_differential"] == pytest.approx(math.sqrt(r["sigma"]))


def test_image_export_and_region_api(tmp_path):
    img = AbsorptionImage(np.full((4, 4), 0.2), np.full((4, 4), 0.05),
                          "ssn", n_frames=10)
    mask = np.zeros((4, 4), dtype=bool)
    mask[1:3, 1:3] = True
    assert img.region_z(mask) == pytest.approx(4.0)
    assert img.detects(mask)
    with pytest.raises(DataError):
        img.region_z(np.zeros((4, 4), dtype=bool))
    out = tmp_path / "img.csv"
    img.to_csv(out)
    text = out.read_text().splitlines()
    assert text[0].startswith("# scheme=ssn")
    assert "row,col,alpha_hat,std_error" in text[3]
