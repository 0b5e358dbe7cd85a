"""twinbeam: a Monte Carlo lab for photon-number correlations.

Simulates twin-beam and classically correlated light with realistic losses
and detector models, estimates the standard correlation witnesses (Fano,
NRF, Cauchy-Schwarz ratio), and implements the protocols that exploit them:
sub-shot-noise absorption imaging, intensity-correlation quantum
illumination, ghost imaging, and absolute detector calibration.
"""
from .core import (
    DetectorSpec,
    JointMoments,
    MomentPair,
    SourceSpec,
    apply_loss,
    balanced_twb_nrf,
    cs_ratio_twb,
    detected_moments,
    fano_detected,
    joint_detected_pmf,
    loss_covariance,
    loss_moments,
    moments_from_joint_pmf,
    sample_detected_pair,
    sample_pair,
    simulate_pair_series,
    split_beam_nrf,
    thermal_pmf,
    twb_detected_moments,
    unbalanced_twb_nrf,
)
from .errors import DataError, DomainError, StatisticalCheckError, UndefinedStatisticError
from .estimators import (
    EstimateReport,
    cauchy_schwarz,
    covariance,
    fano,
    mandel_q,
    nrf,
    nrf_alpha,
    nrf_grid,
    population_value,
)
from .geometry import (
    ModeCounts,
    ModeLayout,
    bin_grid,
    collection_efficiency,
    collection_efficiency_dimensionless,
    correlation_peak,
    cross_correlation_map,
    mode_counts,
    predicted_nrf,
    synthesize_layout_frames,
)
from .rng import stream

__version__ = "0.1.0"
