import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import twinbeam as tb
from twinbeam.errors import DataError, DomainError
from twinbeam.geometry import collection_efficiency_dimensionless


# ---------------------------------------------------------------------------
# mode counting
# ---------------------------------------------------------------------------

def test_mode_counts_square_region_no_misalignment():
    # L = 10 r, delta = 0: correlated 64/pi, border 2L/r = 20, unilateral 0
    lay = tb.ModeLayout(coherence_radius=1.0, region_size=10.0)
    mc = tb.mode_counts(lay)
    assert mc.unilateral == pytest.approx(0.0)
    assert mc.border == pytest.approx(20.0)
    assert mc.correlated == pytest.approx(64.0 / math.pi, rel=1e-12)


def test_mode_counts_with_misalignment():
    lay = tb.ModeLayout(coherence_radius=1.0, region_size=10.0, misalignment=1.0)
    mc = tb.mode_counts(lay)
    assert mc.unilateral == pytest.approx(20.0 / math.pi, rel=1e-12)
    assert mc.correlated == pytest.approx((64.0 - 20.0) / math.pi, rel=1e-12)


def test_layout_validation():
    with pytest.raises(DomainError):
        tb.ModeLayout(1.0, 1.5)            # region must exceed one cell
    with pytest.raises(DomainError):
        tb.ModeLayout(1.0, 10.0, misalignment=3.0)   # delta < L/4
    with pytest.raises(DomainError):
        tb.ModeLayout(1.0, 10.0, border_efficiency=1.2)
    with pytest.raises(DomainError):
        tb.ModeLayout(0.0, 10.0)


def test_correlated_count_must_stay_positive():
    lay = tb.ModeLayout(1.0, 2.2, misalignment=0.54)
    with pytest.raises(DomainError):
        tb.mode_counts(lay)


def test_from_dimensionless_round_trip():
    lay = tb.ModeLayout.from_dimensionless(x=5.0, d=0.25, beta=0.4,
                                           coherence_radius=2.0)
    assert lay.x == pytest.approx(5.0)
    assert lay.d == pytest.approx(0.25)
    assert lay.region_size == pytest.approx(20.0)
    assert lay.misalignment == pytest.approx(1.0)


def test_rescaled_layout_multiplies_region_only():
    lay = tb.ModeLayout.from_dimensionless(4.0, 0.1, 0.5)
    big = lay.rescaled(2)
    assert big.x == pytest.approx(8.0)
    assert big.misalignment == lay.misalignment
    assert big.coherence_radius == lay.coherence_radius


# ---------------------------------------------------------------------------
# collection efficiency
# ---------------------------------------------------------------------------

def test_collection_efficiency_reference_point():
    lay = tb.ModeLayout.from_dimensionless(5.0, 0.0, 0.5)
    a = tb.collection_efficiency(lay, mu=0.0)
    assert a == pytest.approx(0.8353, abs=5e-4)


@given(st.floats(2.05, 40.0), st.floats(0.0, 0.45), st.floats(0.0, 1.0),
       st.floats(0.0, 5.0))
@settings(max_examples=80, deadline=None)
def test_counts_formula_equals_dimensionless_formula(x, frac, beta, mu):
    d = frac * x / 4  # keep delta < L/4
    lay = tb.ModeLayout.from_dimensionless(x, d, beta)
    try:
        tb.mode_counts(lay)
    except DomainError:
        return  # correlated count collapsed; nothing to compare
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # A outside [0,1] is fine here
        a1 = tb.collection_efficiency(lay, mu)
    a2 = collection_efficiency_dimensionless(x, d, beta, mu)
    assert a1 == pytest.approx(a2, rel=1e-9, abs=1e-9)


def test_collection_efficiency_approaches_one_for_large_regions():
    lay = tb.ModeLayout.from_dimensionless(400.0, 0.0, 0.5)
    assert tb.collection_efficiency(lay, 0.5) == pytest.approx(1.0, abs=0.01)


def test_collection_efficiency_warns_outside_unit_interval():
    lay = tb.ModeLayout.from_dimensionless(3.0, 0.3, 0.0)
    with pytest.warns(UserWarning):
        a = tb.collection_efficiency(lay, mu=30.0)
    assert a < 0.0  # raw value is reported, not clamped


def test_predicted_nrf():
    assert tb.predicted_nrf(0.9, 0.8353) == pytest.approx(1 - 0.9 * 0.8353)


# ---------------------------------------------------------------------------
# frame synthesis vs closed forms
# ---------------------------------------------------------------------------

def test_synthesized_frames_match_moment_closed_forms():
    lay = tb.ModeLayout.from_dimensionless(6.0, 0.25, 0.5)
    mu, eta, k = 0.5, 0.7, 900
    f1, f2 = tb.synthesize_layout_frames(lay, mu, grid=(24, 24), n_frames=k,
                                         rng=tb.stream(300, 0), eta1=eta, eta2=eta)
    mc = tb.mode_counts(lay)
    mean_modes = mc.correlated + mc.unilateral + mc.border * lay.border_efficiency
    pred_mean = mean_modes * eta * mu
    got = f1.mean(axis=0)
    se = math.sqrt(f1.var() / k)
    inner = got[1:-1, 1:-1]  # edge pixels lose shared-border flux off-grid
    assert abs(inner.mean() - pred_mean) < 4 * se / math.sqrt(inner.size)
    a = tb.collection_efficiency(lay, mu)
    rep = tb.nrf_grid(f1[:, 1:-1, 1:-1], f2[:, 1:-1, 1:-1],
                      prediction=tb.predicted_nrf(eta, a))
    assert rep.deviation_sigma() < 4.0


def test_synthesis_rejects_border_probability_above_half_on_grids():
    lay = tb.ModeLayout.from_dimensionless(4.0, 0.0, 0.8)
    with pytest.raises(DomainError):
        tb.synthesize_layout_frames(lay, 0.5, (4, 4), 10, tb.stream(0, 0))


def test_synthesis_single_pixel_grid():
    lay = tb.ModeLayout.from_dimensionless(4.0, 0.0, 0.5)
    f1, f2 = tb.synthesize_layout_frames(lay, 0.5, (1, 1), 500, tb.stream(301, 0))
    assert f1.shape == (500, 1, 1)
    assert f1.sum() > 0


# ---------------------------------------------------------------------------
# pixel binning
# ---------------------------------------------------------------------------

def test_bin_grid_conserves_counts():
    rng = tb.stream(302, 0)
    frames = rng.poisson(3.0, size=(50, 8, 8)).astype(np.uint32)
    binned = tb.bin_grid(frames, 2)
    assert binned.shape == (50, 4, 4)
    assert binned.sum() == frames.sum()
    assert binned[0, 0, 0] == frames[0, :2, :2].sum()


def test_bin_grid_rejects_non_divisible():
    frames = np.zeros((10, 9, 9), dtype=np.uint32)
    with pytest.raises(DataError):
        tb.bin_grid(frames, 2)


def test_binning_recombines_border_modes():
    # binning d pixels together behaves like a region d times larger: the
    # measured NRF must fall and track 1 - eta * A(d * x)
    lay = tb.ModeLayout.from_dimensionless(4.0, 0.0, 0.5)
    mu, eta, k = 0.5, 0.9, 1600
    f1, f2 = tb.synthesize_layout_frames(lay, mu, grid=(16, 16), n_frames=k,
                                         rng=tb.stream(303, 0), eta1=eta, eta2=eta)
    values = []
    for d in (1, 2, 4):
        b1, b2 = tb.bin_grid(f1, d), tb.bin_grid(f2, d)
        trim = 1 if d == 1 else None  # see edge-pixel note above
        sl = slice(trim, -trim if trim else None)
        a = tb.collection_efficiency(lay.rescaled(d), mu)
        rep = tb.nrf_grid(b1[:, sl, sl], b2[:, sl, sl],
                          prediction=tb.predicted_nrf(eta, a))
        assert rep.deviation_sigma() < 4.0, f"d={d}"
        values.append(rep.value)
    assert values[0] > values[1] > values[2]


# ---------------------------------------------------------------------------
# cross-correlation alignment map
# ---------------------------------------------------------------------------

def test_correlation_map_peaks_at_injected_shift():
    lay = tb.ModeLayout.from_dimensionless(5.0, 0.0, 0.5)
    shift = (1, -2)
    f1, f2 = tb.synthesize_layout_frames(lay, 0.8, grid=(16, 16), n_frames=600,
                                         rng=tb.stream(304, 0),
                                         shift_pixels=shift)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # shifted border pixels go dark
        corr = tb.cross_correlation_map(f1, f2, max_shift=3)
    assert tb.correlation_peak(corr) == shift


def test_correlation_map_centered_without_shift():
    lay = tb.ModeLayout.from_dimensionless(5.0, 0.0, 0.5)
    f1, f2 = tb.synthesize_layout_frames(lay, 0.8, grid=(12, 12), n_frames=600,
                                         rng=tb.stream(305, 0))
    corr = tb.cross_correlation_map(f1, f2, max_shift=2)
    assert tb.correlation_peak(corr) == (0, 0)
    # peak clearly separated from the off-center background
    background = corr.copy()
    background[2, 2] = -np.inf
    assert corr[2, 2] > np.nanmax(background) + 0.1
