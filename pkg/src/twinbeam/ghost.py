"""Ghost imaging with a bucket detector and covariance reconstruction.

One beam of a locally correlated pair illuminates a transmissive object and
is collected whole by a bucket detector (per-frame total ``bucket``); the
conjugate beam is recorded on a resolving grid that never sees the object.
The image is the per-pixel sample covariance between the bucket series and
each reference pixel, which is proportional to the local transmission.

Correlations are strictly pixel-local: object pixel x is paired with
reference pixel x and with nothing else, so the covariance map carries no
point-spread function in this idealized model.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .core import SourceSpec
from .errors import DataError, DomainError
from .frames import NO_CONFIG, FrameSet
from .illumination import qi_enhancement
from .rng import CHUNK_FRAMES, frame_chunks

REGION_WARN_PIXELS = 10


def gi_source(kind: str, mu: float, modes: float) -> SourceSpec:
    """Source with per-arm mean `mu` per mode for either beam pairing."""
    if kind == "twin_beam":
        return SourceSpec("twin_beam", mu, modes)
    if kind == "split_thermal":
        return SourceSpec("split_thermal", 2 * mu, modes, tau=0.5)
    raise DomainError(f"kind must be twin_beam or split_thermal, got {kind!r}")


def arm_mu(source: SourceSpec) -> float:
    """Per-arm mean photons per mode seen by each detector."""
    if source.kind == "twin_beam":
        return source.mu
    if source.kind == "split_thermal":
        if source.tau != 0.5:
            raise DomainError("ghost imaging uses a balanced split (tau = 0.5)")
        return source.mu / 2
    raise DomainError(f"unsupported source kind {source.kind!r}")


# ---------------------------------------------------------------------------
# Object
# ---------------------------------------------------------------------------

class TwoLevel(NamedTuple):
    t_low: float
    t_high: float
    r_low: int
    r_high: int


@dataclass(frozen=True)
class GiObject:
    """Transmission map T(x) in [0, 1] over the object plane."""

    transmission: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.transmission, dtype=float)
        if t.ndim != 2 or t.size == 0:
            raise DomainError("transmission must be a non-empty 2-D map")
        if not np.isfinite(t).all() or t.min() < 0 or t.max() > 1:
            raise DomainError("transmission values must be finite and in [0, 1]")
        object.__setattr__(self, "transmission", t)

    @classmethod
    def uniform(cls, shape, value: float = 1.0) -> "GiObject":
        return cls(np.full(shape, float(value)))

    @classmethod
    def two_level(cls, shape, low_mask: np.ndarray, t_high: float = 1.0,
                  t_low: float = 0.0) -> "GiObject":
        low_mask = np.asarray(low_mask, dtype=bool)
        if low_mask.shape != tuple(shape):
            raise DomainError("low_mask shape must match the object shape")
        if t_low >= t_high:
            raise DomainError("need t_low < t_high for a two-level object")
        t = np.full(shape, float(t_high))
        t[low_mask] = float(t_low)
        return cls(t)

    @property
    def shape(self):
        return self.transmission.shape

    @property
    def n_pixels(self) -> int:
        return self.transmission.size

    def levels(self) -> TwoLevel:
        """Two-level descriptor; the SNR formulas need exactly two values."""
        vals = np.unique(self.transmission)
        if vals.size != 2:
            raise DataError(f"object has {vals.size} transmission level(s), "
                            "need exactly 2 for the SNR analytics")
        lo, hi = float(vals[0]), float(vals[1])
        r_lo = int((self.transmission == vals[0]).sum())
        lv = TwoLevel(lo, hi, r_lo, self.transmission.size - r_lo)
        if min(lv.r_low, lv.r_high) < REGION_WARN_PIXELS:
            warnings.warn(
                f"region sizes {lv.r_low}/{lv.r_high}: the SNR formulas assume "
                f"many pixels per region (>= {REGION_WARN_PIXELS})", stacklevel=2)
        return lv

    def region_masks(self) -> tuple[np.ndarray, np.ndarray]:
        """(high_mask, low_mask) for a two-level object."""
        lv = self.levels()
        high = self.transmission == lv.t_high
        return high, ~high


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GiRun:
    """Recorded frames: reference grid per frame plus the bucket totals.

    The object-plane pixel counts are not retained (a bucket detector has
    no spatial resolution); `probe` is optionally kept by the simulator for
    diagnostics only.
    """

    reference: np.ndarray  # (K, H, W) counts
    bucket: np.ndarray     # (K,) totals
    source: SourceSpec
    t1: float
    transmission: np.ndarray
    probe: np.ndarray | None = None

    def __post_init__(self):
        ref = np.ascontiguousarray(self.reference)
        if ref.ndim != 3:
            raise DomainError("reference must be a (frames, H, W) array")
        bucket = np.asarray(self.bucket)
        if bucket.shape != (ref.shape[0],):
            raise DomainError("bucket length must equal the frame count")
        if not 0 <= self.t1 <= 1:
            raise DomainError(f"t1 must lie in [0, 1], got {self.t1}")
        if self.transmission.shape != ref.shape[1:]:
            raise DomainError("transmission map must match the grid shape")
        if self.probe is not None and not np.array_equal(
                self.probe.sum(axis=(1, 2)), bucket):
            raise DataError("bucket totals disagree with the probe frames")
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "bucket", bucket)

    @property
    def n_frames(self) -> int:
        return self.reference.shape[0]

    @property
    def grid(self):
        return self.reference.shape[1:]

    def save(self, grid_path, bucket_path=None, seed: int = 0,
             config_hash: bytes = NO_CONFIG) -> tuple[Path, Path]:
        """Persist as two framesets: the grid and the 1x1 bucket series."""
        grid_path = Path(grid_path)
        if bucket_path is None:
            bucket_path = grid_path.with_name(grid_path.stem + ".bucket"
                                              + grid_path.suffix)
        bucket_path = Path(bucket_path)
        FrameSet(self.reference.astype(np.uint32), seed, config_hash).save(grid_path)
        FrameSet(self.bucket.astype(np.uint32).reshape(-1, 1, 1),
                 seed, config_hash).save(bucket_path)
        return grid_path, bucket_path

    @classmethod
    def load(cls, grid_path, bucket_path, source: SourceSpec, t1: float,
             obj: GiObject) -> "GiRun":
        ref = FrameSet.load(grid_path)
        bucket = FrameSet.load(bucket_path)
        return cls(ref.channel(0), bucket.channel(0).reshape(-1).astype(np.int64),
                   source, t1, obj.transmission)


def _sample_arm_pair(source: SourceSpec, t1: float, transmission: np.ndarray,
                     k: int, rng: np.random.Generator):
    """One chunk of (reference, object-plane) frames, shape (k, H, W) each."""
    shape = (k,) + transmission.shape
    if source.kind == "twin_beam":
        parent = rng.negative_binomial(source.modes, 1 / (1 + source.mu),
                                       size=shape)
        ref = rng.binomial(parent, t1)
        probe = rng.binomial(parent, transmission[None])
        return ref, probe
    # balanced split: each parent photon routes to the reference detector
    # w.p. tau*t1, through the object w.p. (1-tau)*T(x), else lost
    arm_mu(source)  # validates tau
    parent = rng.negative_binomial(source.modes, 1 / (1 + source.mu), size=shape)
    p1 = 0.5 * t1
    ref = rng.binomial(parent, p1)
    p2 = 0.5 * transmission[None] / (1 - p1)
    probe = rng.binomial(parent - ref, p2)
    return ref, probe


def simulate_gi(source: SourceSpec, obj: GiObject, t1: float, n_frames: int,
                rng: np.random.Generator, bucket_dark: float = 0.0,
                keep_probe: bool = False, chunk: int = CHUNK_FRAMES) -> GiRun:
    """Record `n_frames` correlated frames through the object.

    bucket_dark adds Poisson dark counts to the bucket totals; being
    independent of both arms they shift the mean but not the covariance map.
    """
    if n_frames < 1:
        raise DomainError("n_frames must be >= 1")
    if not 0 <= t1 <= 1:
        raise DomainError(f"t1 must lie in [0, 1], got {t1}")
    if bucket_dark < 0:
        raise DomainError("bucket_dark must be >= 0")
    t = obj.transmission
    ref = np.empty((n_frames,) + t.shape, dtype=np.uint32)
    bucket = np.empty(n_frames, dtype=np.int64)
    probe_frames = np.empty_like(ref) if keep_probe else None
    for _, start, stop in frame_chunks(n_frames, chunk):
        r, p = _sample_arm_pair(source, t1, t, stop - start, rng)
        ref[start:stop] = r
        bucket[start:stop] = p.sum(axis=(1, 2))
        if keep_probe:
            probe_frames[start:stop] = p
    if bucket_dark > 0:
        bucket += rng.poisson(bucket_dark, n_frames)
        probe_frames = None  # totals no longer equal the probe sums
    return GiRun(ref, bucket, source, t1, t, probe=probe_frames)


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GiSummary:
    """Second-moment summary sufficient for reconstruction and SNR work."""

    s_map: np.ndarray        # Cov(bucket, reference pixel)
    n1_mean: np.ndarray
    n1_var: np.ndarray
    bucket_mean: float
    bucket_var: float
    n_frames: int
    source: SourceSpec
    t1: float
    transmission: np.ndarray
    meta: dict = field(default_factory=dict)


def _summary_from_sums(sn, snn, snb, sb, sbb, n_frames, source, t1, t):
    k = n_frames
    n1_mean = sn / k
    s_map = (snb - sb * sn / k) / (k - 1)
    n1_var = (snn - sn**2 / k) / (k - 1)
    return GiSummary(
        s_map=s_map, n1_mean=n1_mean, n1_var=n1_var,
        bucket_mean=sb / k, bucket_var=(sbb - sb**2 / k) / (k - 1),
        n_frames=k, source=source, t1=t1, transmission=t)


def summarize(run: GiRun) -> GiSummary:
    if run.n_frames < 2:
        raise DataError("need at least 2 frames to form covariances")
    ref = run.reference.astype(np.int64)
    b = run.bucket.astype(np.int64)
    return _summary_from_sums(
        ref.sum(axis=0), (ref * ref).sum(axis=0),
        np.einsum("k,khw->hw", b, ref), int(b.sum()), int(b @ b),
        run.n_frames, run.source, run.t1, run.transmission)


def simulate_gi_summary(source: SourceSpec, obj: GiObject, t1: float,
                        n_frames: int, rng: np.random.Generator,
                        chunk: int = CHUNK_FRAMES) -> GiSummary:
    """Streamed moment accumulation: frames are never stored.

    Integer accumulators keep the arithmetic exact, so at the same seed and
    chunk size this is bit-identical to summarize(simulate_gi(...)).
    """
    if n_frames < 2:
        raise DomainError("need at least 2 frames to form covariances")
    t = obj.transmission
    sn = np.zeros(t.shape, dtype=np.int64)
    snn = np.zeros(t.shape, dtype=np.int64)
    snb = np.zeros(t.shape, dtype=np.int64)
    sb = 0
    sbb = 0
    for _, start, stop in frame_chunks(n_frames, chunk):
        r, p = _sample_arm_pair(source, t1, t, stop - start, rng)
        r = r.astype(np.int64)
        b = p.sum(axis=(1, 2), dtype=np.int64)
        sn += r.sum(axis=0)
        snn += (r * r).sum(axis=0)
        snb += np.einsum("k,khw->hw", b, r)
        sb += int(b.sum())
        sbb += int(b @ b)
    return _summary_from_sums(sn, snn, snb, sb, sbb, n_frames, source, t1, t)


def reconstruct(run: GiRun | GiSummary) -> np.ndarray:
    """Covariance image S(x); expectation is proportional to T(x)."""
    if isinstance(run, GiSummary):
        return run.s_map
    return summarize(run).s_map


def normalized_image(summary: GiSummary) -> np.ndarray:
    """Invert the covariance map back to a transmission estimate."""
    mu = arm_mu(summary.source)
    scale = summary.t1 * summary.source.modes * mu**2
    if summary.source.kind == "twin_beam":
        scale = summary.t1 * summary.source.modes * mu * (1 + mu)
    if scale <= 0:
        raise DomainError("degenerate scale: zero brightness or t1")
    return summary.s_map / scale


def export_map_csv(s_map: np.ndarray, path, provenance: dict | None = None):
    from .reports import write_table
    rows = [(i, j, float(s_map[i, j]))
            for i in range(s_map.shape[0]) for j in range(s_map.shape[1])]
    write_table(path, ("row", "col", "covariance"), rows, provenance or {})


# ---------------------------------------------------------------------------
# Analytic predictions
# ---------------------------------------------------------------------------

class GiSnrPrediction(NamedTuple):
    thermal: float
    twin_beam: float


def predicted_s_mean(source: SourceSpec, t1: float, t2: float) -> float:
    """Expected covariance-map value at a pixel with transmission t2."""
    mu = arm_mu(source)
    per_mode = mu * (1 + mu) if source.kind == "twin_beam" else mu**2
    return t1 * t2 * source.modes * per_mode


def predicted_s_variance(source: SourceSpec, obj: GiObject, t1: float,
                         t2: float, kappa: int) -> float:
    """Sampling variance of one map pixel: product of arm variances over K."""
    mu = arm_mu(source)
    m = source.modes
    ref_var = m * t1 * mu * (1 + t1 * mu)
    t = obj.transmission
    bucket_var = float((m * t * mu * (1 + t * mu)).sum())
    return ref_var * bucket_var / kappa


def predicted_gi_snr(obj: GiObject, source_mu: float, t1: float,
                     kappa: int) -> GiSnrPrediction:
    """Two-level discrimination SNR after kappa frames, both source types.

    source_mu is the per-arm mean per mode; the mode count cancels.
    """
    if kappa < 1:
        raise DomainError("kappa must be >= 1")
    if not 0 < t1 <= 1:
        raise DomainError(f"t1 must lie in (0, 1], got {t1}")
    if source_mu <= 0:
        raise DomainError(f"source_mu must be > 0, got {source_mu}")
    lv = obj.levels()
    mu = source_mu
    contrast = lv.t_high - lv.t_low
    bulk = (lv.r_low * lv.t_low * (1 + lv.t_low * mu)
            + lv.r_high * lv.t_high * (1 + lv.t_high * mu))
    denom = math.sqrt(2 * (1 + t1 * mu) * bulk)
    th = math.sqrt(kappa * t1) * mu * contrast / denom
    return GiSnrPrediction(thermal=th, twin_beam=th * (1 + mu) / mu)


def snr_large_mu_limit(kappa: int, r_high: int) -> float:
    """Bright-beam limit of both SNRs for a transparent/opaque object."""
    if kappa < 1 or r_high < 1:
        raise DomainError("kappa and r_high must be >= 1")
    return math.sqrt(kappa / (2 * r_high))


def predicted_enhancement(mu: float) -> float:
    """SNR gain of twin beams over split thermal light; same ratio as QI."""
    return qi_enhancement(mu)


def enhancement_from_counts(t1: float, modes: float, n1_mean: float) -> float:
    """Enhancement re-expressed through the measured reference rate."""
    if n1_mean <= 0:
        raise DomainError("mean reference count must be > 0")
    return 1 + t1 * modes / n1_mean


# ---------------------------------------------------------------------------
# Measured SNR
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeasuredGiSnr:
    value: float
    standard_error: float
    mean_high: float
    mean_low: float
    var_high: float
    var_low: float
    variance_method: str
    n_frames: int


def measure_gi_snr(summary: GiSummary | GiRun, high_mask: np.ndarray,
                   low_mask: np.ndarray,
                   variance: str = "spatial") -> MeasuredGiSnr:
    """Region-separation SNR of the reconstructed map.

    variance="spatial" takes the pixel noise from the map's spread inside
    each region; "product" uses the measured arm variances (bucket variance
    times region-mean reference variance over the frame count). The SE
    treats map pixels as independent, a good approximation whenever the
    bucket covers many pixels.
    """
    if isinstance(summary, GiRun):
        summary = summarize(summary)
    high_mask = np.asarray(high_mask, dtype=bool)
    low_mask = np.asarray(low_mask, dtype=bool)
    if high_mask.shape != summary.s_map.shape or low_mask.shape != summary.s_map.shape:
        raise DataError("region masks must match the map shape")
    if high_mask.sum() == 0 or low_mask.sum() == 0:
        raise DataError("empty region mask")
    if (high_mask & low_mask).any():
        raise DataError("region masks overlap")
    if variance not in ("spatial", "product"):
        raise DomainError(f"variance must be 'spatial' or 'product', got {variance!r}")

    s = summary.s_map
    hi, lo = s[high_mask], s[low_mask]
    m_hi, m_lo = float(hi.mean()), float(lo.mean())
    if variance == "spatial":
        if hi.size < 2 or lo.size < 2:
            raise DataError("spatial variance needs >= 2 pixels per region")
        v_hi, v_lo = float(hi.var(ddof=1)), float(lo.var(ddof=1))
        r_eff = min(hi.size, lo.size)
    else:
        v_hi = summary.bucket_var * float(summary.n1_var[high_mask].mean()) \
            / summary.n_frames
        v_lo = summary.bucket_var * float(summary.n1_var[low_mask].mean()) \
            / summary.n_frames
        r_eff = summary.n_frames
    denom = v_hi + v_lo
    if denom <= 0:
        raise DataError("zero map variance; cannot normalize the separation")
    value = abs(m_hi - m_lo) / math.sqrt(denom)
    var_mean = v_hi / hi.size + v_lo / lo.size
    var_vsum = 2 * (v_hi**2 + v_lo**2) / max(r_eff - 1, 1)
    se = math.sqrt(var_mean / denom + value**2 / 4 * var_vsum / denom**2)
    return MeasuredGiSnr(value, se, m_hi, m_lo, v_hi, v_lo, variance,
                         summary.n_frames)
