"""Statistical estimators for photon-number correlation measurements.

Every estimator consumes one or two per-frame count series (or count grids)
and returns an `EstimateReport` carrying the point value, a frame-wise
jackknife standard error (the covariance estimator uses the direct
product-variance error instead), the sample size, and an optional analytic
prediction for side-by-side reporting.

Conventions: sample variances and covariances are unbiased (K - 1); the
Cauchy-Schwarz ratio uses plug-in normally-ordered variances Var - Mean, and
a non-positive normally-ordered variance is reported as status="undefined"
rather than raised.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DomainError, UndefinedStatisticError

ESTIMATOR_NAMES = ("Fano", "MandelQ", "NRF", "NRFalpha", "CauchySchwarz", "Covariance")


@dataclass
class EstimateReport:
    """Result of one statistical estimate."""

    name: str
    value: float
    standard_error: float
    sample_size: int
    analytic_prediction: float | None = None
    status: str = "ok"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in ESTIMATOR_NAMES:
            raise DomainError(f"unknown estimator name {self.name!r}")

    def deviation_sigma(self) -> float:
        """|value - prediction| in units of the standard error."""
        if self.analytic_prediction is None:
            raise DomainError("no analytic prediction attached")
        if self.standard_error == 0:
            raise DomainError("zero standard error")
        return abs(self.value - self.analytic_prediction) / self.standard_error


def _as_series(x, name="series") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DataError(f"{name} must be 1-D, got shape {x.shape}")
    if x.size < 3:
        raise DataError(f"{name} needs at least 3 frames, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise DataError(f"{name} contains non-finite values")
    return x


def _check_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = _as_series(x, "channel 1")
    y = _as_series(y, "channel 2")
    if x.size != y.size:
        raise DataError(f"channel lengths differ: {x.size} vs {y.size}")
    return x, y


def _jackknife_se(replicates: np.ndarray) -> float:
    k = replicates.size
    center = replicates.mean()
    return math.sqrt((k - 1) / k * np.sum((replicates - center) ** 2))


def _loo_mean_var(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Leave-one-out means and unbiased variances, vectorized over frames."""
    k = x.size
    s1, s2 = x.sum(), (x * x).sum()
    m = (s1 - x) / (k - 1)
    v = (s2 - x * x - (k - 1) * m * m) / (k - 2)
    return m, v


def _loo_cov(x: np.ndarray, y: np.ndarray, mx: np.ndarray, my: np.ndarray) -> np.ndarray:
    k = x.size
    sxy = (x * y).sum()
    return (sxy - x * y - (k - 1) * mx * my) / (k - 2)


# ---------------------------------------------------------------------------
# Scalar series estimators
# ---------------------------------------------------------------------------

def fano(x, prediction: float | None = None) -> EstimateReport:
    """Fano factor F = Var(n)/<n> of a count series."""
    x = _as_series(x)
    mean = x.mean()
    if mean == 0:
        raise UndefinedStatisticError("all-zero series: Fano factor undefined")
    value = x.var(ddof=1) / mean
    m, v = _loo_mean_var(x)
    if np.any(m == 0):
        raise UndefinedStatisticError("leave-one-out mean hits zero")
    se = _jackknife_se(v / m)
    return EstimateReport("Fano", value, se, x.size, prediction)


def mandel_q(x, prediction: float | None = None) -> EstimateReport:
    """Mandel Q = F - 1; negative values witness sub-Poissonian light."""
    rep = fano(x, None)
    return EstimateReport("MandelQ", rep.value - 1.0, rep.standard_error,
                          rep.sample_size, prediction)


def nrf(x, y, prediction: float | None = None) -> EstimateReport:
    """Noise reduction factor sigma = Var(n1 - n2) / <n1 + n2>.

    sigma < 1 certifies nonclassical arm correlations; an ideal lossless
    twin beam gives 0 and balanced detection losses give 1 - eta.
    """
    x, y = _check_pair(x, y)
    denom = x.mean() + y.mean()
    if denom == 0:
        raise UndefinedStatisticError("zero total mean: NRF undefined")
    d = x - y
    value = d.var(ddof=1) / denom
    md, vd = _loo_mean_var(d)
    ms, _ = _loo_mean_var(x + y)
    if np.any(ms == 0):
        raise UndefinedStatisticError("leave-one-out total mean hits zero")
    se = _jackknife_se(vd / ms)
    return EstimateReport("NRF", value, se, x.size, prediction)


def nrf_alpha(x, y, prediction: float | None = None) -> EstimateReport:
    """Unbalanced NRF sigma_alpha = Var(n1 - alpha n2) / <n1 + alpha n2>.

    alpha = <n1>/<n2> is plug-in estimated, including inside every jackknife
    replicate, so the reported error reflects the full procedure.
    """
    x, y = _check_pair(x, y)
    mx, my = x.mean(), y.mean()
    if my == 0 or mx == 0:
        raise UndefinedStatisticError("zero channel mean: alpha undefined")
    alpha = mx / my
    vx, vy = x.var(ddof=1), y.var(ddof=1)
    cov = float(np.cov(x, y, ddof=1)[0, 1])
    value = (vx + alpha**2 * vy - 2 * alpha * cov) / (mx + alpha * my)
    lmx, lvx = _loo_mean_var(x)
    lmy, lvy = _loo_mean_var(y)
    lcov = _loo_cov(x, y, lmx, lmy)
    if np.any(lmy == 0):
        raise UndefinedStatisticError("leave-one-out channel-2 mean hits zero")
    lalpha = lmx / lmy
    reps = (lvx + lalpha**2 * lvy - 2 * lalpha * lcov) / (lmx + lalpha * lmy)
    rep = EstimateReport("NRFalpha", value, _jackknife_se(reps), x.size, prediction)
    rep.meta["alpha"] = alpha
    return rep


def covariance(x, y, prediction: float | None = None) -> EstimateReport:
    """Unbiased sample covariance of the two channels.

    The standard error is sqrt(Var(dn1*dn2)/K), the empirical variance of
    the centered products.
    """
    x, y = _check_pair(x, y)
    dx, dy = x - x.mean(), y - y.mean()
    k = x.size
    value = float(dx @ dy) / (k - 1)
    products = dx * dy
    se = math.sqrt(products.var(ddof=1) / k)
    return EstimateReport("Covariance", value, se, k, prediction)


def cauchy_schwarz(x, y, prediction: float | None = None) -> EstimateReport:
    """Cauchy-Schwarz ratio eps = Cov / sqrt((Var1 - m1)(Var2 - m2)).

    eps <= 1 for any classical beam pair; eps = 1/mu + 1 for twin beams,
    independent of losses. When a plug-in normally-ordered variance is
    non-positive the report carries status="undefined" and NaN values
    (legitimate outcome for near-coherent arms), not an exception.
    """
    x, y = _check_pair(x, y)
    k = x.size
    mx, my = x.mean(), y.mean()
    v1 = x.var(ddof=1) - mx
    v2 = y.var(ddof=1) - my
    cov = float(np.cov(x, y, ddof=1)[0, 1])
    if v1 <= 0 or v2 <= 0:
        return EstimateReport("CauchySchwarz", math.nan, math.nan, k, prediction,
                              status="undefined",
                              meta={"normally_ordered_var": (v1, v2)})
    value = cov / math.sqrt(v1 * v2)
    lmx, lvx = _loo_mean_var(x)
    lmy, lvy = _loo_mean_var(y)
    lcov = _loo_cov(x, y, lmx, lmy)
    nv1 = lvx - lmx
    nv2 = lvy - lmy
    valid = (nv1 > 0) & (nv2 > 0)
    reps = np.full(k, math.nan)
    reps[valid] = lcov[valid] / np.sqrt(nv1[valid] * nv2[valid])
    status = "ok"
    if not np.all(valid):
        # a few unstable replicates: drop them but flag the report
        reps = reps[valid]
        status = "unstable" if valid.mean() < 0.99 else "ok"
    rep = EstimateReport("CauchySchwarz", value, _jackknife_se(reps), k, prediction,
                         status=status)
    rep.meta["normally_ordered_var"] = (v1, v2)
    return rep


# ---------------------------------------------------------------------------
# Pooled grid estimators
# ---------------------------------------------------------------------------

def _as_grid(frames, name) -> np.ndarray:
    g = np.asarray(frames, dtype=float)
    if g.ndim == 2:
        pass  # (K, P) already
    elif g.ndim == 3:
        g = g.reshape(g.shape[0], -1)
    else:
        raise DataError(f"{name} must be (K, P) or (K, H, W), got shape {g.shape}")
    if g.shape[0] < 3:
        raise DataError(f"{name} needs at least 3 frames")
    return g


def nrf_grid(frames1, frames2, prediction: float | None = None,
             block: int = 256) -> EstimateReport:
    """Pooled NRF over a pixel grid.

    Statistically homogeneous pixels are pooled: the numerator is the pixel
    average of per-pixel unbiased Var(n1 - n2) over frames, the denominator
    the pooled mean of n1 + n2. The standard error is a frame-wise jackknife
    of the pooled ratio, computed in pixel blocks to bound memory.
    """
    f1 = _as_grid(frames1, "channel 1")
    f2 = _as_grid(frames2, "channel 2")
    if f1.shape != f2.shape:
        raise DataError(f"grid shapes differ: {f1.shape} vs {f2.shape}")
    k, n_px = f1.shape
    num_tot = 0.0            # sum over pixels of unbiased Var(d)
    den_tot = 0.0            # sum over pixels of mean(n1 + n2)
    num_loo = np.zeros(k)    # per-replicate sums over pixels
    den_loo = np.zeros(k)
    for lo in range(0, n_px, block):
        d = f1[:, lo:lo + block] - f2[:, lo:lo + block]
        s = f1[:, lo:lo + block] + f2[:, lo:lo + block]
        s1 = d.sum(axis=0)
        s2 = (d * d).sum(axis=0)
        t1 = s.sum(axis=0)
        mean_d = s1 / k
        num_tot += float(np.sum((s2 - k * mean_d**2) / (k - 1)))
        den_tot += float(t1.sum()) / k
        lm = (s1[None, :] - d) / (k - 1)
        lv = (s2[None, :] - d * d - (k - 1) * lm * lm) / (k - 2)
        num_loo += lv.sum(axis=1)
        den_loo += (t1[None, :] - s).sum(axis=1) / (k - 1)
    if den_tot == 0:
        raise UndefinedStatisticError("zero total mean: NRF undefined")
    value = num_tot / den_tot
    se = _jackknife_se(num_loo / den_loo)
    rep = EstimateReport("NRF", value, se, k, prediction)
    rep.meta["pixels"] = n_px
    return rep


@dataclass(frozen=True)
class GridPairMoments:
    """Pixel-averaged second moments of a frame pair, with leave-one-frame-out
    replicates of every component for jackknife error propagation.

    var/cov are unbiased per-pixel moments over frames, then averaged over
    pixels; the loo_* arrays hold the same quantities with one frame removed.
    Any scalar statistic built from (mean1, mean2, var1, var2, cov) gets a
    consistent jackknife SE by re-evaluating it on the replicates.
    """

    n_frames: int
    n_pixels: int
    mean1: float
    mean2: float
    var1: float
    var2: float
    cov: float
    loo_mean1: np.ndarray
    loo_mean2: np.ndarray
    loo_var1: np.ndarray
    loo_var2: np.ndarray
    loo_cov: np.ndarray

    def jackknife(self, statistic) -> tuple[float, float]:
        """(value, SE) of statistic(mean1, mean2, var1, var2, cov)."""
        value = statistic(self.mean1, self.mean2, self.var1, self.var2, self.cov)
        reps = statistic(self.loo_mean1, self.loo_mean2, self.loo_var1,
                         self.loo_var2, self.loo_cov)
        return float(value), _jackknife_se(np.asarray(reps))


def grid_pair_moments(frames1, frames2, block: int = 256) -> GridPairMoments:
    """Accumulate GridPairMoments over pixel blocks to bound memory."""
    f1 = _as_grid(frames1, "channel 1")
    f2 = _as_grid(frames2, "channel 2")
    if f1.shape != f2.shape:
        raise DataError(f"grid shapes differ: {f1.shape} vs {f2.shape}")
    k, n_px = f1.shape
    sx_tot = sy_tot = 0.0
    sxx_tot = syy_tot = sxy_tot = 0.0
    qx = qy = qxy = 0.0
    rx = np.zeros(k)
    ry = np.zeros(k)
    rxx = np.zeros(k)
    ryy = np.zeros(k)
    rxy = np.zeros(k)
    cxs = np.zeros(k)   # frame j against the pixel sums of its own channel
    cys = np.zeros(k)
    cxsy = np.zeros(k)  # channel-2 frame against channel-1 pixel sums
    cysx = np.zeros(k)
    for lo in range(0, n_px, block):
        x = f1[:, lo:lo + block]
        y = f2[:, lo:lo + block]
        sx, sy = x.sum(axis=0), y.sum(axis=0)
        sx_tot += sx.sum()
        sy_tot += sy.sum()
        sxx_tot += float((x * x).sum())
        syy_tot += float((y * y).sum())
        sxy_tot += float((x * y).sum())
        qx += float(sx @ sx)
        qy += float(sy @ sy)
        qxy += float(sx @ sy)
        rx += x.sum(axis=1)
        ry += y.sum(axis=1)
        rxx += (x * x).sum(axis=1)
        ryy += (y * y).sum(axis=1)
        rxy += (x * y).sum(axis=1)
        cxs += x @ sx
        cys += y @ sy
        cxsy += y @ sx
        cysx += x @ sy
    p = n_px
    mean1 = sx_tot / (k * p)
    mean2 = sy_tot / (k * p)
    var1 = (sxx_tot - qx / k) / ((k - 1) * p)
    var2 = (syy_tot - qy / k) / ((k - 1) * p)
    cov = (sxy_tot - qxy / k) / ((k - 1) * p)
    lm1 = (sx_tot - rx) / ((k - 1) * p)
    lm2 = (sy_tot - ry) / ((k - 1) * p)
    lv1 = ((sxx_tot - rxx) - (qx - 2 * cxs + rxx) / (k - 1)) / ((k - 2) * p)
    lv2 = ((syy_tot - ryy) - (qy - 2 * cys + ryy) / (k - 1)) / ((k - 2) * p)
    lc = ((sxy_tot - rxy) - (qxy - cxsy - cysx + rxy) / (k - 1)) / ((k - 2) * p)
    return GridPairMoments(k, p, mean1, mean2, var1, var2, cov,
                           lm1, lm2, lv1, lv2, lc)


def nrf_alpha_grid(frames1, frames2, prediction: float | None = None,
                   block: int = 256) -> EstimateReport:
    """Pooled unbalanced NRF over a pixel grid.

    alpha = pooled <n1>/<n2>; the numerator is the pixel-averaged unbiased
    Var(n1 - alpha n2), re-deriving alpha inside every jackknife replicate.
    """
    gm = grid_pair_moments(frames1, frames2, block)
    if gm.mean1 == 0 or gm.mean2 == 0:
        raise UndefinedStatisticError("zero channel mean: alpha undefined")

    def stat(m1, m2, v1, v2, c):
        alpha = m1 / m2
        return (v1 + alpha**2 * v2 - 2 * alpha * c) / (m1 + alpha * m2)

    value, se = gm.jackknife(stat)
    rep = EstimateReport("NRFalpha", value, se, gm.n_frames, prediction)
    rep.meta["alpha"] = float(gm.mean1 / gm.mean2)
    rep.meta["pixels"] = gm.n_pixels
    return rep


# ---------------------------------------------------------------------------
# Population values from exact moments (oracle plumbing)
# ---------------------------------------------------------------------------

def population_value(name: str, joint) -> float:
    """Evaluate an estimator's population value on exact joint moments.

    Used by the enumeration oracle: the same functional the sample
    estimators target, computed from an exactly enumerated pmf. `joint` is a
    JointMoments or a 2-D joint pmf array.
    """
    if isinstance(joint, np.ndarray):
        from .core import moments_from_joint_pmf
        joint = moments_from_joint_pmf(joint)
    if name == "Fano":
        return joint.arm1.fano()
    if name == "MandelQ":
        return joint.arm1.fano() - 1.0
    if name == "NRF":
        return joint.nrf()
    if name == "NRFalpha":
        alpha = joint.arm1.mean / joint.arm2.mean
        num = joint.arm1.var + alpha**2 * joint.arm2.var - 2 * alpha * joint.cov
        return num / (joint.arm1.mean + alpha * joint.arm2.mean)
    if name == "CauchySchwarz":
        return joint.noiseless_cs_ratio()
    if name == "Covariance":
        return joint.cov
    raise DomainError(f"unknown estimator name {name!r}")
