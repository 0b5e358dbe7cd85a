"""Absolute detector calibration with loop-closing simulators.

Four routes, each paired with a synthetic-data generator so the chain
"inject ground truth -> simulate -> estimate" can be checked end to end:

* coincidence (Klyshko) calibration of a click detector on a heralded
  pair source;
* a peak-wise extension for photon-number-resolving detectors that
  inverts heralded against unheralded click histograms;
* analog calibration of a spatially resolving sensor from the unbalanced
  noise reduction factor and the mode-geometry collection factor;
* EMCCD photon counting, where clicks above an electron threshold stand
  in for photon counts and the gain model predicts the threshold cost.

Path transmission of the heralded arm is always an input, never fitted.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .errors import DataError, DomainError
from .estimators import GridPairMoments, grid_pair_moments
from .geometry import ModeLayout, collection_efficiency, synthesize_layout_frames
from .reports import read_provenance, read_table, write_table

# Pile-up stays below ~1% of the coincidence rate under this limit.
PAIR_RATE_LIMIT = 0.01


@dataclass
class EfficiencyEstimate:
    """A recovered detection efficiency with its standard error.

    status is "ok" for values inside [0, 1] and "inconsistent" otherwise;
    an inconsistent value is still returned because how far it overshoots
    is itself the diagnostic.
    """

    value: float
    standard_error: float
    status: str = "ok"
    meta: dict = field(default_factory=dict)


def _efficiency_status(value: float) -> str:
    return "ok" if 0.0 <= value <= 1.0 else "inconsistent"


# ---------------------------------------------------------------------------
# Coincidence (Klyshko) calibration
# ---------------------------------------------------------------------------

_COINCIDENCE_COLUMNS = ["measured", "accidental", "triggers", "trigger_noise",
                        "path_transmission", "windows"]


@dataclass(frozen=True)
class CoincidenceRecord:
    """Aggregate counts of one coincidence calibration run.

    measured and accidental are coincidence-window counts, the latter taken
    from deliberately shifted windows.  triggers counts heralding-arm clicks
    with the source on; trigger_noise the same with the source blocked.
    path_transmission is the independently measured optical transmission of
    the calibrated arm.
    """

    measured: int
    accidental: int
    triggers: int
    trigger_noise: int
    path_transmission: float
    windows: int = 0

    def __post_init__(self):
        for name in ("measured", "accidental", "triggers", "trigger_noise",
                     "windows"):
            v = getattr(self, name)
            if v != int(v) or v < 0:
                raise DomainError(f"{name} must be a nonnegative count, got {v}")
        if self.measured < self.accidental:
            raise DomainError("measured coincidences below accidentals")
        if self.triggers < self.trigger_noise:
            raise DomainError("trigger clicks below trigger noise clicks")
        tau = self.path_transmission
        if not (0.0 < tau <= 1.0) or not math.isfinite(tau):
            raise DomainError(f"path transmission must be in (0, 1], got {tau}")

    def save_csv(self, path, provenance: dict | None = None) -> None:
        row = [getattr(self, c) for c in _COINCIDENCE_COLUMNS]
        write_table(path, _COINCIDENCE_COLUMNS, [row], provenance)

    @classmethod
    def load_csv(cls, path) -> "CoincidenceRecord":
        header, rows = read_table(path)
        if header != _COINCIDENCE_COLUMNS or len(rows) != 1:
            raise DataError(f"{path}: expected one row with columns "
                            f"{_COINCIDENCE_COLUMNS}")
        vals = rows[0]
        return cls(int(vals[0]), int(vals[1]), int(vals[2]), int(vals[3]),
                   float(vals[4]), int(vals[5]))


def klyshko_efficiency(rec: CoincidenceRecord) -> EfficiencyEstimate:
    """Heralded-arm efficiency from background-subtracted coincidences.

    eta = (measured - accidental) / (tau * (triggers - trigger_noise)).

    The error model conditions on the trigger count: true coincidences are
    binomial over the true triggers, the accidental subtraction adds two
    Poisson-scale terms (one inside the measured count, one from the shifted
    windows), and the blocked-run noise count perturbs the denominator.
    """
    true_triggers = rec.triggers - rec.trigger_noise
    if true_triggers <= 0:
        raise DomainError("no true trigger clicks: triggers must exceed noise")
    pairs = rec.measured - rec.accidental
    tau = rec.path_transmission
    value = pairs / (tau * true_triggers)
    p = min(tau * value, 1.0)
    var = (pairs * (1.0 - p) + 2.0 * rec.accidental) / (tau * true_triggers) ** 2
    var += value**2 * rec.trigger_noise / true_triggers**2
    est = EfficiencyEstimate(value, math.sqrt(var), _efficiency_status(value))
    est.meta.update(true_triggers=true_triggers, net_coincidences=pairs)
    return est


def simulate_klyshko(eta1: float, eta2: float, tau: float, pair_rate: float,
                     noise1: float, noise2: float, windows: int,
                     rng: np.random.Generator,
                     pair_dist: str = "bernoulli") -> CoincidenceRecord:
    """Simulate a coincidence run window by window.

    eta1 is the efficiency under calibration, eta2 the trigger efficiency,
    noise1/noise2 per-window dark-click probabilities.  pair_dist chooses
    how many pairs a window holds: "bernoulli" (0 or 1, exact at any rate)
    or "poisson", where multi-pair windows still produce one click per arm
    and leave a residual bias second order in pair_rate.  The accidental
    count
    tallies coincidence windows that are not a fully detected pair; the
    simulator tags noise clicks directly, standing in for an ideal
    delayed-window estimate.  Trigger noise comes from a fresh
    source-blocked run of the same length.
    """
    for name, v in (("eta1", eta1), ("eta2", eta2)):
        if not 0.0 <= v <= 1.0:
            raise DomainError(f"{name} must be in [0, 1], got {v}")
    if not 0.0 < tau <= 1.0:
        raise DomainError(f"tau must be in (0, 1], got {tau}")
    for name, v in (("pair_rate", pair_rate), ("noise1", noise1),
                    ("noise2", noise2)):
        if not 0.0 <= v < 1.0:
            raise DomainError(f"{name} must be in [0, 1), got {v}")
    if windows < 2:
        raise DomainError("need at least 2 windows")
    if pair_rate > PAIR_RATE_LIMIT:
        warnings.warn(
            f"pair rate {pair_rate} exceeds the low-flux design limit "
            f"{PAIR_RATE_LIMIT} per window; coincidence pile-up is not "
            "corrected", stacklevel=2)

    if pair_dist == "bernoulli":
        pair = rng.random(windows) < pair_rate
        trig_sig = pair & (rng.random(windows) < eta2)
        her_sig = pair & (rng.random(windows) < tau * eta1)
    elif pair_dist == "poisson":
        m = rng.poisson(pair_rate, windows)
        trig_sig = rng.binomial(m, eta2) > 0
        her_sig = rng.binomial(m, tau * eta1) > 0
    else:
        raise DomainError(f"unknown pair_dist {pair_dist!r}")
    trig = trig_sig | (rng.random(windows) < noise2)
    her = her_sig | (rng.random(windows) < noise1)
    measured = int(np.count_nonzero(trig & her))
    accidental = measured - int(np.count_nonzero(trig_sig & her_sig))
    triggers = int(np.count_nonzero(trig))
    # The blocked run can out-count the signal run by chance when noise
    # dominates; clip to keep the record's invariant in that degenerate
    # regime.
    trigger_noise = min(int(np.count_nonzero(rng.random(windows) < noise2)),
                        triggers)
    return CoincidenceRecord(measured, accidental, triggers, trigger_noise,
                             tau, windows)


# ---------------------------------------------------------------------------
# Photon-number-resolving (peak-wise) calibration
# ---------------------------------------------------------------------------

_PNR_COLUMNS = ["clicks", "heralded", "unheralded"]


@dataclass(frozen=True)
class PnrHistograms:
    """Click-count frequencies with and without a herald.

    heralded[i] and unheralded[i] are the observed probabilities of i
    clicks; herald_purity is the probability that a herald flags a genuine
    event.  n_heralded / n_unheralded are the underlying sample counts and
    drive the standard errors; leave them at 0 for pure closed-form input.
    """

    heralded: np.ndarray
    unheralded: np.ndarray
    herald_purity: float
    n_heralded: int = 0
    n_unheralded: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        h = np.atleast_1d(np.asarray(self.heralded, dtype=float))
        u = np.atleast_1d(np.asarray(self.unheralded, dtype=float))
        if h.ndim != 1 or u.ndim != 1:
            raise DataError("histograms must be 1-D")
        width = max(h.size, u.size)
        h = np.pad(h, (0, width - h.size))
        u = np.pad(u, (0, width - u.size))
        for name, arr in (("heralded", h), ("unheralded", u)):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise DataError(f"{name} histogram must be finite and >= 0")
            if abs(arr.sum() - 1.0) > 1e-9:
                raise DataError(f"{name} histogram sums to {arr.sum()!r}, "
                                "expected 1 within 1e-9")
        if not 0.0 < self.herald_purity <= 1.0:
            raise DomainError(
                f"herald purity must be in (0, 1], got {self.herald_purity}")
        for name in ("n_heralded", "n_unheralded"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0")
        h.flags.writeable = False
        u.flags.writeable = False
        object.__setattr__(self, "heralded", h)
        object.__setattr__(self, "unheralded", u)

    @property
    def width(self) -> int:
        return self.heralded.size

    @classmethod
    def from_counts(cls, heralded_counts, unheralded_counts,
                    herald_purity: float, meta: dict | None = None
                    ) -> "PnrHistograms":
        hc = np.atleast_1d(np.asarray(heralded_counts, dtype=float))
        uc = np.atleast_1d(np.asarray(unheralded_counts, dtype=float))
        nh, nu = hc.sum(), uc.sum()
        if nh <= 0 or nu <= 0:
            raise DataError("count histograms must be non-empty")
        return cls(hc / nh, uc / nu, herald_purity, int(round(nh)),
                   int(round(nu)), dict(meta or {}))

    def save_csv(self, path, provenance: dict | None = None) -> None:
        prov = {"herald_purity": repr(self.herald_purity),
                "n_heralded": self.n_heralded,
                "n_unheralded": self.n_unheralded}
        prov.update({k: v for k, v in self.meta.items()})
        if provenance:
            prov.update(provenance)
        rows = [[i, repr(float(h)), repr(float(u))]
                for i, (h, u) in enumerate(zip(self.heralded, self.unheralded))]
        write_table(path, _PNR_COLUMNS, rows, prov)

    @classmethod
    def load_csv(cls, path) -> "PnrHistograms":
        header, rows = read_table(path)
        if header != _PNR_COLUMNS:
            raise DataError(f"{path}: expected columns {_PNR_COLUMNS}")
        prov = read_provenance(path)
        if "herald_purity" not in prov:
            raise DataError(f"{path}: missing '# herald_purity=' line")
        idx = [int(r[0]) for r in rows]
        if idx != list(range(len(rows))):
            raise DataError(f"{path}: click column must run 0..{len(rows) - 1}")
        h = np.array([float(r[1]) for r in rows])
        u = np.array([float(r[2]) for r in rows])
        meta = {k: v for k, v in prov.items()
                if k not in ("herald_purity", "n_heralded", "n_unheralded")}
        return cls(h, u, float(prov["herald_purity"]),
                   int(prov.get("n_heralded", 0)),
                   int(prov.get("n_unheralded", 0)), meta)


def simulate_pnr(efficiency: float, herald_purity: float, n_heralded: int,
                 n_unheralded: int, rng: np.random.Generator,
                 background: tuple[str, float] = ("poisson", 1.0)
                 ) -> PnrHistograms:
    """Forward model for the peak-wise calibration.

    Unheralded windows draw clicks from the background distribution alone;
    heralded windows add exactly one extra click with probability
    herald_purity * efficiency.  background is ("poisson", mean) or
    ("thermal", mean) and is recorded in the histogram metadata, since the
    estimator must work for any background shape.
    """
    if not 0.0 <= efficiency <= 1.0:
        raise DomainError(f"efficiency must be in [0, 1], got {efficiency}")
    if n_heralded < 1 or n_unheralded < 1:
        raise DomainError("need at least one window per histogram")
    kind, mean = background
    if mean < 0:
        raise DomainError(f"background mean must be >= 0, got {mean}")

    def draw(size):
        if kind == "poisson":
            return rng.poisson(mean, size)
        if kind == "thermal":
            return rng.negative_binomial(1, 1.0 / (1.0 + mean), size)
        raise DomainError(f"unknown background kind {kind!r}")

    unheralded = draw(n_unheralded)
    heralded = draw(n_heralded)
    heralded = heralded + (rng.random(n_heralded) < herald_purity * efficiency)
    width = int(max(unheralded.max(), heralded.max())) + 1
    return PnrHistograms.from_counts(
        np.bincount(heralded, minlength=width),
        np.bincount(unheralded, minlength=width),
        herald_purity,
        meta={"background": f"{kind}(mean={mean})"})


@dataclass(frozen=True)
class PeakEfficiency:
    """Efficiency recovered from one click-number peak."""

    clicks: int
    value: float
    standard_error: float
    status: str  # "ok" or "degenerate"


@dataclass(frozen=True)
class PnrResult:
    """Peak-wise efficiencies plus their inverse-variance combination.

    chi_square tests mutual consistency of the usable peaks (dof of them
    minus one); without sample counts the standard errors and the
    combination statistics are NaN.
    """

    peaks: tuple[PeakEfficiency, ...]
    combined: float
    combined_se: float
    chi_square: float
    dof: int
    p_value: float

    def peak(self, clicks: int) -> PeakEfficiency:
        for p in self.peaks:
            if p.clicks == clicks:
                return p
        raise DomainError(f"no peak for {clicks} clicks")


def pnr_efficiencies(h: PnrHistograms, peaks=None) -> PnrResult:
    """Invert the heralded/unheralded histogram pair peak by peak.

    Peak 0 uses (unheralded[0] - heralded[0]) / (purity * unheralded[0]);
    peak i >= 1 divides the heralded excess by the unheralded step
    unheralded[i-1] - unheralded[i].  Steps compatible with zero (within 3
    of their own standard error) are flagged "degenerate" and excluded from
    the combination rather than failing the whole inversion.
    """
    p_arr, u_arr, xi = h.heralded, h.unheralded, h.herald_purity
    if peaks is None:
        peaks = range(h.width)
    peaks = list(peaks)
    if any(i < 0 or i >= h.width for i in peaks):
        raise DomainError(f"peaks must lie in [0, {h.width - 1}]")
    have_counts = h.n_heralded > 0 and h.n_unheralded > 0
    nh = max(h.n_heralded, 1)
    nu = max(h.n_unheralded, 1)

    def var_p(i):
        return p_arr[i] * (1.0 - p_arr[i]) / nh

    def var_u(i):
        return u_arr[i] * (1.0 - u_arr[i]) / nu

    out = []
    for i in peaks:
        if i == 0:
            u0, p0 = u_arr[0], p_arr[0]
            if u0 <= 0.0:
                out.append(PeakEfficiency(0, math.nan, math.nan, "degenerate"))
                continue
            value = float((u0 - p0) / (xi * u0))
            if have_counts:
                var = (var_p(0) / (xi * u0) ** 2
                       + var_u(0) * (p0 / (xi * u0**2)) ** 2)
                se = math.sqrt(var)
            else:
                se = math.nan
            out.append(PeakEfficiency(0, value, se, "ok"))
            continue
        step = u_arr[i - 1] - u_arr[i]
        cov = -u_arr[i - 1] * u_arr[i] / nu
        var_step = var_u(i - 1) + var_u(i) - 2.0 * cov
        degenerate = (abs(step) <= 3.0 * math.sqrt(var_step)) if have_counts \
            else step == 0.0
        if degenerate:
            out.append(PeakEfficiency(i, math.nan, math.nan, "degenerate"))
            continue
        value = float((p_arr[i] - u_arr[i]) / (xi * step))
        if have_counts:
            d_p = 1.0 / (xi * step)
            d_prev = -value / step
            d_this = (value - 1.0 / xi) / step
            var = (d_p**2 * var_p(i) + d_prev**2 * var_u(i - 1)
                   + d_this**2 * var_u(i) + 2.0 * d_prev * d_this * cov)
            se = math.sqrt(var)
        else:
            se = math.nan
        out.append(PeakEfficiency(i, value, se, "ok"))

    usable = [p for p in out if p.status == "ok"]
    if not have_counts:
        vals = [p.value for p in usable]
        combined = float(np.mean(vals)) if vals else math.nan
        return PnrResult(tuple(out), combined, math.nan, math.nan, 0, math.nan)
    usable = [p for p in usable if p.standard_error > 0]
    if not usable:
        return PnrResult(tuple(out), math.nan, math.nan, math.nan, 0, math.nan)
    w = np.array([1.0 / p.standard_error**2 for p in usable])
    vals = np.array([p.value for p in usable])
    combined = float(w @ vals / w.sum())
    combined_se = float(1.0 / math.sqrt(w.sum()))
    chi = float(w @ (vals - combined) ** 2)
    dof = len(usable) - 1
    p_value = float(stats.chi2.sf(chi, dof)) if dof >= 1 else math.nan
    return PnrResult(tuple(out), combined, combined_se, chi, dof, p_value)


# ---------------------------------------------------------------------------
# Analog (spatially resolving) calibration
# ---------------------------------------------------------------------------

def efficiency_from_nrf_alpha(sigma_alpha: float, alpha: float,
                              collection: float) -> float:
    """Invert sigma_alpha = (1 + alpha)/2 - eta * A for eta."""
    if collection <= 0:
        raise DomainError(
            f"collection factor must be > 0, got {collection}")
    return ((1.0 + alpha) / 2.0 - sigma_alpha) / collection


def _trimmed_grids(frames1, frames2, trim: int):
    f1 = np.asarray(frames1)
    f2 = np.asarray(frames2)
    if f1.shape != f2.shape:
        raise DataError(f"frame shapes differ: {f1.shape} vs {f2.shape}")
    if trim < 0:
        raise DomainError(f"trim must be >= 0, got {trim}")
    if trim == 0:
        return f1, f2
    if f1.ndim != 3:
        raise DataError("border trim needs (K, H, W) frames")
    if min(f1.shape[1:]) <= 2 * trim + 1:
        raise DomainError(f"trim {trim} leaves no interior pixels on "
                          f"{f1.shape[1:]} grid")
    sl = (slice(None), slice(trim, -trim), slice(trim, -trim))
    return f1[sl], f2[sl]


def _nrf_alpha_efficiency(gm: GridPairMoments, collection: float,
                          correction=None) -> EfficiencyEstimate:
    """Jackknife eta from pooled grid moments; correction(alpha, m1, m2)
    returns an additive bias term removed from the difference variance."""

    def statistic(m1, m2, v1, v2, c):
        alpha = m1 / m2
        v = v1 + alpha**2 * v2 - 2.0 * alpha * c
        if correction is not None:
            v = v - correction(alpha, m1, m2)
        sigma = v / (m1 + alpha * m2)
        return ((1.0 + alpha) / 2.0 - sigma) / collection

    value, se = gm.jackknife(statistic)
    est = EfficiencyEstimate(value, se, _efficiency_status(value))
    est.meta.update(alpha=float(gm.mean1 / gm.mean2), frames=gm.n_frames,
                    pixels=gm.n_pixels, collection=collection)
    return est


def analog_calibration(frames1, frames2, layout: ModeLayout, mu: float = 0.0,
                       trim: int = 1, block: int = 256) -> EfficiencyEstimate:
    """Efficiency of an analog spatially resolving detector pair.

    Pools the unbalanced noise reduction factor over all (trimmed) pixels
    and inverts it with the collection factor of the layout; the standard
    error is a frame-wise jackknife of the whole chain, alpha included.
    Border pixels see partial modes, so trim >= 1 is the right default for
    synthesized frames.  Uncorrected additive read noise biases the result
    low by roughly (1 + alpha^2) * var_read / ((1 + alpha) * mean * A).
    """
    collection = collection_efficiency(layout, mu)
    if collection <= 0:
        raise DomainError(f"collection factor {collection:.4g} <= 0; the "
                          "inversion is undefined for this layout")
    f1, f2 = _trimmed_grids(frames1, frames2, trim)
    gm = grid_pair_moments(f1, f2, block)
    est = _nrf_alpha_efficiency(gm, collection)
    est.meta["trim"] = trim
    return est


# ---------------------------------------------------------------------------
# EMCCD photon counting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmGainModel:
    """Electron-multiplying readout: gain, Gaussian read noise, threshold.

    gain is the mean number of output electrons per photoelectron;
    threshold (electrons) is the click cut for photon counting, or None
    for the analog path.
    """

    gain: float
    read_noise: float
    threshold: float | None = None

    def __post_init__(self):
        if not self.gain > 0 or not math.isfinite(self.gain):
            raise DomainError(f"gain must be > 0, got {self.gain}")
        if self.read_noise < 0 or not math.isfinite(self.read_noise):
            raise DomainError(f"read noise must be >= 0, got {self.read_noise}")
        if self.threshold is not None and not math.isfinite(self.threshold):
            raise DomainError("threshold must be finite or None")


def _one_sided_moments(center, sigma, k_max):
    """M_k = integral over w >= 0 of w^k N(w; center, sigma^2) dw, k = 0..k_max.

    Integration by parts gives M_k = center*M_{k-1} + (k-1)*sigma^2*M_{k-2}.
    """
    z = np.asarray(center, dtype=float) / sigma
    out = np.empty((k_max + 1,) + z.shape)
    out[0] = stats.norm.cdf(z)
    if k_max >= 1:
        out[1] = center * out[0] + sigma * stats.norm.pdf(z)
    for k in range(2, k_max + 1):
        out[k] = center * out[k - 1] + (k - 1) * sigma**2 * out[k - 2]
    return out


@dataclass(frozen=True)
class EmOutputDensity:
    """Output-electron distribution for a fixed photoelectron number.

    The multiplication register turns n photoelectrons into an Erlang
    (gamma with integer shape n, scale gain) charge; n = 0 leaves a point
    mass at zero.  Gaussian read noise is convolved on top; completing the
    square reduces the convolution to one-sided Gaussian moments, so pdf
    and survival are closed-form.
    """

    photoelectrons: int
    model: EmGainModel

    def __post_init__(self):
        if self.photoelectrons < 0:
            raise DomainError("photoelectron number must be >= 0")

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        n, g, sr = self.photoelectrons, self.model.gain, self.model.read_noise
        if sr == 0.0:
            if n == 0:
                return np.where(x == 0.0, np.inf, 0.0)
            return stats.gamma.pdf(x, a=n, scale=g)
        if n == 0:
            return stats.norm.pdf(x, scale=sr)
        # f(x) = exp(sr^2/2g^2 - x/g) * M_{n-1}(x - sr^2/g) / (g^n (n-1)!)
        m_top = _one_sided_moments(x - sr**2 / g, sr, n - 1)[n - 1]
        expo = sr**2 / (2.0 * g**2) - x / g - special.gammaln(n) \
            - n * math.log(g)
        with np.errstate(over="ignore", invalid="ignore"):
            out = np.exp(expo) * m_top
        # exp only overflows hundreds of gains out in the left tail, where
        # the true density has long since underflowed
        return np.where(np.isfinite(out), np.maximum(out, 0.0), 0.0)

    def survival(self, threshold):
        t = np.asarray(threshold, dtype=float)
        n, g, sr = self.photoelectrons, self.model.gain, self.model.read_noise
        if sr == 0.0:
            if n == 0:
                return np.where(t < 0.0, 1.0, 0.0)[()]
            return np.where(t < 0.0, 1.0,
                            special.gammaincc(n, np.maximum(t, 0.0) / g))[()]
        if n == 0:
            return stats.norm.sf(t, scale=sr)[()]
        # S(t) = Phi(-t/sr) + exp(sr^2/2g^2 - t/g) * sum_k M_k(t - sr^2/g)
        #        / (g^k k!), the Erlang survival series averaged over noise
        moments = _one_sided_moments(t - sr**2 / g, sr, n - 1)
        series = np.zeros_like(t)
        log_fact = 0.0
        for k in range(n):
            if k:
                log_fact += math.log(k)
            series += moments[k] * np.exp(-k * math.log(g) - log_fact)
        expo = sr**2 / (2.0 * g**2) - t / g
        with np.errstate(over="ignore", invalid="ignore"):
            out = stats.norm.sf(t, scale=sr) + np.exp(expo) * series
        out = np.where(np.isfinite(out), np.clip(out, 0.0, 1.0),
                       np.where(t < 0.0, 1.0, 0.0))
        return out[()]


def em_output_pmf(photoelectrons: int, model: EmGainModel) -> EmOutputDensity:
    """Density of the EM output charge given the photoelectron number."""
    return EmOutputDensity(int(photoelectrons), model)


def dark_click_probability(model: EmGainModel, threshold: float) -> float:
    """Probability an empty pixel crosses the threshold (read noise only)."""
    return float(em_output_pmf(0, model).survival(threshold))


def predicted_threshold_efficiency(model: EmGainModel, base_efficiency: float,
                                   threshold: float) -> float:
    """Sparse-regime click efficiency: eta(T) = eta0 * P(output > T | n=1)."""
    if not 0.0 <= base_efficiency <= 1.0:
        raise DomainError(f"base efficiency must be in [0, 1], got "
                          f"{base_efficiency}")
    return base_efficiency * float(em_output_pmf(1, model).survival(threshold))


def simulate_em_readout(photoelectrons, model: EmGainModel,
                        rng: np.random.Generator) -> np.ndarray:
    """Stochastic gain plus read noise applied to photoelectron counts.

    Output is continuous (electrons); discretize only when writing files.
    """
    n = np.asarray(photoelectrons)
    if np.any(n < 0):
        raise DomainError("photoelectron counts must be >= 0")
    out = rng.gamma(np.asarray(n, dtype=float), model.gain)
    if model.read_noise > 0:
        out = out + rng.normal(0.0, model.read_noise, n.shape)
    return out


def simulate_emccd_pair(layout: ModeLayout, mu: float, grid, n_frames: int,
                        model: EmGainModel, base_efficiency: float,
                        rng: np.random.Generator
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Correlated EMCCD output frames: layout synthesis, binomial detection
    at base_efficiency, then stochastic gain and read noise per channel."""
    n1, n2 = synthesize_layout_frames(layout, mu, grid, n_frames, rng,
                                      eta1=base_efficiency,
                                      eta2=base_efficiency)
    return (simulate_em_readout(n1, model, rng),
            simulate_em_readout(n2, model, rng))


@dataclass(frozen=True)
class ThresholdCalibration:
    """eta(T) curve of an EMCCD with the analog-path base efficiency.

    Per-threshold status is "ok", "saturated" (every pixel clicked) or
    "no-signal" (click rate indistinguishable from dark clicks); entries
    that are not ok carry NaN.  base is the threshold-free estimate from the
    gain-normalized analog path.
    """

    thresholds: np.ndarray
    efficiency: np.ndarray
    standard_error: np.ndarray
    status: tuple[str, ...]
    base: EfficiencyEstimate
    collection: float
    model: EmGainModel
    meta: dict = field(default_factory=dict)

    def monotone(self, slack_se: float = 0.0) -> bool:
        """True when eta(T) never increases along the usable grid entries;
        slack_se loosens each comparison by that many summed errors."""
        idx = [i for i, s in enumerate(self.status) if s == "ok"]
        for a, b in zip(idx, idx[1:]):
            slack = slack_se * (self.standard_error[a] + self.standard_error[b])
            if self.efficiency[b] > self.efficiency[a] + slack:
                return False
        return True

    def save_csv(self, path, provenance: dict | None = None) -> None:
        prov = {"gain": repr(self.model.gain),
                "read_noise": repr(self.model.read_noise),
                "collection": repr(self.collection),
                "base_efficiency": repr(self.base.value),
                "base_se": repr(self.base.standard_error)}
        if provenance:
            prov.update(provenance)
        rows = [[repr(float(t)), repr(float(e)), repr(float(s)), st]
                for t, e, s, st in zip(self.thresholds, self.efficiency,
                                       self.standard_error, self.status)]
        write_table(path, ["threshold", "efficiency", "standard_error",
                           "status"], rows, prov)


def emccd_threshold_calibration(frames1, frames2, model: EmGainModel,
                                layout: ModeLayout, thresholds,
                                mu: float = 0.0, trim: int = 1,
                                block: int = 256) -> ThresholdCalibration:
    """Photon-counting calibration of EMCCD output frames.

    frames hold raw output electrons per pixel.  For every threshold T the
    frames become click maps (x > T) and the thresholded noise reduction
    factor inverts to eta(T).  Two corrections keep that inversion honest:
    dark clicks from pure read noise are removed as an independent OR'd
    Bernoulli field at the model-predicted rate, and the binary collapse of
    multi-photon pixels is undone to second order in the click rate (the
    factorial moment of the photon field is taken as mean squared, exact in
    the many-mode limit).  The analog path divides by the gain instead and
    corrects for multiplication excess noise and read noise, giving the
    base efficiency eta0.

    Keep mean counts per pixel well below one: residual occupancy bias is
    third order but grows fast.  Below a threshold of about two read-noise
    sigmas, signal and dark charge overlap and the curve estimates
    eta0 * (q1 - dark) / (1 - dark) rather than eta0 * q1.  Above a
    threshold of about one gain, two-photon pixels clear the cut far more
    often than independent per-photon clicks would, and the curve reads
    high by a few percent at percent-level occupancy.
    """
    collection = collection_efficiency(layout, mu)
    if collection <= 0:
        raise DomainError(f"collection factor {collection:.4g} <= 0; the "
                          "inversion is undefined for this layout")
    t_grid = np.atleast_1d(np.asarray(thresholds, dtype=float))
    if t_grid.ndim != 1 or t_grid.size == 0 or not np.all(np.isfinite(t_grid)):
        raise DomainError("thresholds must be a non-empty finite 1-D grid")
    f1, f2 = _trimmed_grids(frames1, frames2, trim)
    f1 = f1.reshape(f1.shape[0], -1)
    f2 = f2.reshape(f2.shape[0], -1)

    g, sr = model.gain, model.read_noise
    gm_analog = grid_pair_moments(f1 / g, f2 / g, block)
    read_var = (sr / g) ** 2

    def excess_noise(alpha, m1, m2):
        return m1 + alpha**2 * m2 + (1.0 + alpha**2) * read_var

    base = _nrf_alpha_efficiency(gm_analog, collection, excess_noise)
    base.meta["path"] = "analog"

    eta = np.full(t_grid.size, np.nan)
    se = np.full(t_grid.size, np.nan)
    statuses = []
    for j, t in enumerate(t_grid):
        c1 = (f1 > t).astype(float)
        c2 = (f2 > t).astype(float)
        if c1.all() or c2.all():
            statuses.append("saturated")
            continue
        p_dark = dark_click_probability(model, t)
        gm = grid_pair_moments(c1, c2, block)
        samples = gm.n_frames * gm.n_pixels
        floor = 3.0 * math.sqrt(max(p_dark * (1.0 - p_dark), 1.0 / samples)
                                / samples)
        if gm.mean1 - p_dark <= floor or gm.mean2 - p_dark <= floor:
            statuses.append("no-signal")
            continue

        def statistic(m1, m2, v1, v2, c, p=p_dark):
            q = 1.0 - p
            pi1, pi2 = (m1 - p) / q, (m2 - p) / q
            mt1 = pi1 * (1.0 + 0.5 * pi1)
            mt2 = pi2 * (1.0 + 0.5 * pi2)
            vv1 = v1 / q**2 - (1.0 - pi1) * p / q + 1.5 * pi1**2
            vv2 = v2 / q**2 - (1.0 - pi2) * p / q + 1.5 * pi2**2
            cc = c / q**2 / (1.0 - pi1 - pi2)
            alpha = mt1 / mt2
            sigma = (vv1 + alpha**2 * vv2 - 2.0 * alpha * cc) / (
                mt1 + alpha * mt2)
            return ((1.0 + alpha) / 2.0 - sigma) / collection

        eta[j], se[j] = gm.jackknife(statistic)
        statuses.append("ok")
    meta = {"frames": f1.shape[0], "pixels": f1.shape[1], "trim": trim,
            "mu": mu}
    return ThresholdCalibration(t_grid, eta, se, tuple(statuses), base,
                                collection, model, meta)
