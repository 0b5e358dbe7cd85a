"""Target detection in dominant background via intensity covariance.

A probe beam is sent toward a region that may contain a weakly reflecting
target (reflectivity eta_P); whatever returns is detected together with an
independent multithermal background (n_B photons over M_B modes) that
cannot be measured separately. The retained reference beam (efficiency
eta_R) is measured jointly, and the target is declared present when the
probe/reference covariance exceeds a preset threshold.

Twin beams and split thermal beams have identical local statistics here;
they differ only in the covariance under H1, which is why the quantum
enhancement of the discrimination SNR is exactly the Cauchy-Schwarz ratio
1/mu + 1 and survives arbitrarily strong background.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .core import SourceSpec, sample_detected_pair
from .errors import DataError, DomainError
from .estimators import EstimateReport, cauchy_schwarz

QI_SOURCE_KINDS = ("twin_beam", "split_thermal")


@dataclass(frozen=True)
class QiScenario:
    """One operating point of the illumination experiment.

    probe_photons, modes        n and M of the probe/reference pair (mu = n/M)
    background_photons/modes    n_B and M_B of the thermal background
    target_reflectivity         eta_P, probe survival when the target exists
    reference_efficiency        eta_R
    pixel_pairs                 correlated pixel pairs measured per shot
    """

    kind: str = "twin_beam"
    probe_photons: float = 4.0
    modes: float = 40.0
    background_photons: float = 30.0
    background_modes: float = 100.0
    target_reflectivity: float = 0.5
    reference_efficiency: float = 0.9
    target_present: bool = True
    pixel_pairs: int = 80

    def __post_init__(self):
        if self.kind not in QI_SOURCE_KINDS:
            raise DomainError(f"kind must be one of {QI_SOURCE_KINDS}, got {self.kind!r}")
        if self.probe_photons <= 0 or self.modes <= 0:
            raise DomainError("probe_photons and modes must be > 0")
        if self.background_photons < 0 or self.background_modes <= 0:
            raise DomainError("background_photons must be >= 0 with background_modes > 0")
        for name in ("target_reflectivity", "reference_efficiency"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise DomainError(f"{name} must lie in [0, 1], got {v}")
        if self.pixel_pairs < 1:
            raise DomainError("pixel_pairs must be >= 1")

    @property
    def mu(self) -> float:
        return self.probe_photons / self.modes

    def source(self) -> SourceSpec:
        """Pair source with matched local statistics for either kind."""
        if self.kind == "twin_beam":
            return SourceSpec("twin_beam", self.mu, self.modes)
        # split thermal with the same per-arm mu: parent 2 mu, balanced split
        return SourceSpec("split_thermal", 2 * self.mu, self.modes, tau=0.5)

    def replace(self, **kw) -> "QiScenario":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# Analytic predictions
# ---------------------------------------------------------------------------

def predicted_covariance(s: QiScenario) -> float:
    """Reference/receiver covariance under the scenario's hypothesis."""
    if not s.target_present or s.target_reflectivity == 0:
        return 0.0
    n, ep, er = s.probe_photons, s.target_reflectivity, s.reference_efficiency
    if s.kind == "twin_beam":
        return ep * er * n * (1 + s.mu)
    return ep * er * n * s.mu  # = eta_P eta_R n^2 / M


def predicted_reference_variance(s: QiScenario) -> float:
    n, er = s.probe_photons, s.reference_efficiency
    return n * er * (1 + er * s.mu)


def predicted_background_variance(s: QiScenario) -> float:
    nb = s.background_photons
    return nb * (1 + nb / s.background_modes)


def predicted_qi_snr(s: QiScenario, kappa: int) -> float:
    """Discrimination SNR after `kappa` independent pair samples.

    Background-dominated form: the receiver variance is approximated by the
    background variance alone, which is the regime the covariance receiver
    is designed for (a warning fires outside it).
    """
    if kappa < 1:
        raise DomainError("kappa must be >= 1")
    reflected = s.target_reflectivity * s.probe_photons
    if s.background_photons < 5 * reflected:
        warnings.warn(
            f"background {s.background_photons:.3g} is not dominant over the "
            f"reflected probe {reflected:.3g}; the SNR formula degrades",
            stacklevel=2)
    v1 = predicted_reference_variance(s)
    vb = predicted_background_variance(s)
    if v1 <= 0 or vb <= 0:
        raise DomainError("zero variance: scenario has no fluctuations to correlate")
    present = s if s.target_present else s.replace(target_present=True)
    return math.sqrt(kappa) * predicted_covariance(present) / math.sqrt(2 * v1 * vb)


def qi_enhancement(mu: float) -> float:
    """Predicted SNR ratio twin-beam / split-thermal: 1/mu + 1."""
    if mu <= 0:
        raise DomainError(f"mu must be > 0, got {mu}")
    return 1.0 / mu + 1.0


def predicted_epsilon(s: QiScenario, background_photons: float | None = None) -> float:
    """Cauchy-Schwarz parameter of the receiver pair at a given background."""
    nb = s.background_photons if background_photons is None else background_photons
    n, m = s.probe_photons, s.modes
    ep, er = s.target_reflectivity, s.reference_efficiency
    v1 = (er * n) ** 2 / m
    v2 = (ep * n) ** 2 / m + nb**2 / s.background_modes
    if v1 <= 0 or v2 <= 0:
        raise DomainError("normally ordered variances vanish; epsilon undefined")
    cov = predicted_covariance(s.replace(target_present=True))
    return cov / math.sqrt(v1 * v2)


def nonclassicality_boundary(s: QiScenario, simplified: bool = True) -> float:
    """Background level n_B* above which the receiver pair looks classical.

    The simplified form eta_P sqrt(M M_B) holds for mu << 1; the exact
    boundary carries an extra sqrt(1 + 2 mu).
    """
    base = s.target_reflectivity * math.sqrt(s.modes * s.background_modes)
    if simplified:
        if s.mu > 0.2:
            warnings.warn(f"mu = {s.mu:.3g} is not << 1; "
                          "use simplified=False for the exact boundary",
                          stacklevel=2)
        return base
    return base * math.sqrt(1 + 2 * s.mu)


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def simulate_qi_shots(s: QiScenario, n_shots: int,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(n1, n2) count arrays of shape (n_shots, pixel_pairs).

    n1 is the retained reference; n2 is the receiver arm: the reflected
    probe (if the target is present) plus the independent background.
    """
    if n_shots < 1:
        raise DomainError("n_shots must be >= 1")
    total = n_shots * s.pixel_pairs
    ep = s.target_reflectivity if s.target_present else 0.0
    n1, probe = sample_detected_pair(s.source(), s.reference_efficiency, ep,
                                     total, rng)
    nb, mb = s.background_photons, s.background_modes
    background = rng.negative_binomial(mb, 1.0 / (1.0 + nb / mb), size=total) \
        if nb > 0 else np.zeros(total, dtype=np.int64)
    n2 = probe + background
    shape = (n_shots, s.pixel_pairs)
    return n1.reshape(shape), n2.reshape(shape)


def shot_covariances(n1: np.ndarray, n2: np.ndarray) -> np.ndarray:
    """Per-shot sample covariance across the pixel pairs of each shot."""
    if n1.shape != n2.shape or n1.ndim != 2:
        raise DataError("need matched (n_shots, pixel_pairs) arrays")
    if n1.shape[1] < 2:
        raise DataError("per-shot covariance needs >= 2 pixel pairs")
    d1 = n1 - n1.mean(axis=1, keepdims=True)
    d2 = n2 - n2.mean(axis=1, keepdims=True)
    return (d1 * d2).sum(axis=1) / (n1.shape[1] - 1)


# ---------------------------------------------------------------------------
# Discrimination
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QiDecision:
    statistic: float
    threshold: float
    verdict: str  # "H1" (target present) or "H0"
    shots: int


def decide(s: QiScenario, n_shots: int, rng: np.random.Generator,
           threshold: float | None = None) -> QiDecision:
    """One full decision: average the per-shot covariances and compare."""
    if threshold is None:
        threshold = predicted_covariance(s.replace(target_present=True)) / 2
    stat = float(shot_covariances(*simulate_qi_shots(s, n_shots, rng)).mean())
    return QiDecision(stat, threshold, "H1" if stat >= threshold else "H0", n_shots)


@dataclass(frozen=True)
class DiscriminationResult:
    scenario: QiScenario
    n_shots: int
    n_trials: int
    threshold: float
    mean_present: float
    mean_absent: float
    var_present: float
    var_absent: float
    type_i: float
    type_ii: float
    measured_snr: float
    measured_snr_se: float
    predicted_snr: float
    meta: dict = field(default_factory=dict)


def run_discrimination(s: QiScenario, n_shots: int, rng: np.random.Generator,
                       n_trials: int = 200,
                       threshold: float | None = None) -> DiscriminationResult:
    """Repeated H0/H1 trials: error rates and the measured per-run SNR.

    The measured SNR is |m1 - m0| / sqrt(v1 + v0) over the trial statistics,
    directly comparable to predicted_qi_snr(s, kappa = n_shots * pixel_pairs).
    Its SE comes from a delta-method propagation of the four moments.
    """
    if n_trials < 10:
        raise DomainError("n_trials must be >= 10 for error-rate estimates")
    if threshold is None:
        threshold = predicted_covariance(s.replace(target_present=True)) / 2
    stats = {}
    for present in (True, False):
        sc = s.replace(target_present=present)
        trials = np.empty(n_trials)
        for t in range(n_trials):
            n1, n2 = simulate_qi_shots(sc, n_shots, rng)
            trials[t] = shot_covariances(n1, n2).mean()
        stats[present] = trials
    m1, m0 = stats[True].mean(), stats[False].mean()
    v1, v0 = stats[True].var(ddof=1), stats[False].var(ddof=1)
    denom = v1 + v0
    snr = abs(m1 - m0) / math.sqrt(denom)
    # delta method: Var(snr) = Var(m1-m0)/denom + snr^2/4 * Var(v1+v0)/denom^2
    var_mean_diff = (v1 + v0) / n_trials
    var_var_sum = 2 * (v1**2 + v0**2) / (n_trials - 1)
    snr_se = math.sqrt(var_mean_diff / denom
                       + snr**2 / 4 * var_var_sum / denom**2)
    return DiscriminationResult(
        scenario=s, n_shots=n_shots, n_trials=n_trials, threshold=threshold,
        mean_present=m1, mean_absent=m0, var_present=float(v1), var_absent=float(v0),
        type_i=float((stats[False] >= threshold).mean()),
        type_ii=float((stats[True] < threshold).mean()),
        measured_snr=snr, measured_snr_se=snr_se,
        predicted_snr=predicted_qi_snr(s, n_shots * s.pixel_pairs))


def measured_snr_ratio(s: QiScenario, n_shots: int, rng: np.random.Generator,
                       n_blocks: int = 20) -> tuple[float, float]:
    """Measured SNR ratio twin-beam / split-thermal with a block jackknife SE.

    Both sources run at the same local statistics; each uses n_shots shots.
    The per-shot covariance samples are cut into blocks and the ratio
    jackknifed over blocks.
    """
    if n_shots % n_blocks:
        raise DomainError(f"n_shots must divide into {n_blocks} blocks")
    covs = {}
    for kind in QI_SOURCE_KINDS:
        sc = s.replace(kind=kind)
        rows = []
        for present in (True, False):
            n1, n2 = simulate_qi_shots(sc.replace(target_present=present),
                                       n_shots, rng)
            rows.append(shot_covariances(n1, n2))
        covs[kind] = rows  # [present, absent]

    def ratio(mask):
        out = {}
        for kind, (c1, c0) in covs.items():
            m1, m0 = c1[mask].mean(), c0[mask].mean()
            v1, v0 = c1[mask].var(ddof=1), c0[mask].var(ddof=1)
            out[kind] = abs(m1 - m0) / math.sqrt(v1 + v0)
        return out["twin_beam"] / out["split_thermal"]

    full = ratio(np.ones(n_shots, dtype=bool))
    block = n_shots // n_blocks
    reps = []
    for b in range(n_blocks):
        mask = np.ones(n_shots, dtype=bool)
        mask[b * block:(b + 1) * block] = False
        reps.append(ratio(mask))
    reps = np.asarray(reps)
    se = math.sqrt((n_blocks - 1) / n_blocks * ((reps - reps.mean()) ** 2).sum())
    return full, se


# ---------------------------------------------------------------------------
# Non-classicality sweep
# ---------------------------------------------------------------------------

def epsilon_sweep(s: QiScenario, background_values, n_shots: int,
                  rng: np.random.Generator) -> list[dict]:
    """Measured Cauchy-Schwarz parameter versus background strength."""
    rows = []
    for nb in background_values:
        sc = s.replace(background_photons=float(nb), target_present=True)
        n1, n2 = simulate_qi_shots(sc, n_shots, rng)
        rep: EstimateReport = cauchy_schwarz(
            n1.ravel(), n2.ravel(), prediction=predicted_epsilon(sc))
        rows.append({"background_photons": float(nb), "epsilon": rep.value,
                     "epsilon_se": rep.standard_error, "status": rep.status,
                     "epsilon_predicted": rep.analytic_prediction})
    return rows


def epsilon_crossing(rows: list[dict]) -> float:
    """Background level where measured epsilon crosses 1 (log-interpolated)."""
    pts = [(r["background_photons"], r["epsilon"]) for r in rows
           if r["status"] == "ok" and np.isfinite(r["epsilon"])]
    pts.sort()
    for (x0, e0), (x1, e1) in zip(pts, pts[1:]):
        if e0 > 1.0 >= e1:
            f = (e0 - 1.0) / (e0 - e1)
            return math.exp(math.log(x0) + f * (math.log(x1) - math.log(x0)))
    raise DataError("epsilon does not cross 1 inside the sweep range")
