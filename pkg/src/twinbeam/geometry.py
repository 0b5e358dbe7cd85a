"""Spatial mode bookkeeping for finite detection regions.

A detection region (pixel or binned super-pixel) of side ``L`` observing a
beam with transverse coherence radius ``r`` collects three mode populations:

* ``correlated``  M_c = ((L - 2r)^2 - 2 L delta) / (pi r^2) -- pairs fully
  inside both channels' regions,
* ``unilateral``  M_u = 2 L delta / (pi r^2) -- pairs split by a channel
  misalignment ``delta`` (each channel sees M_u modes whose partner lands in
  the neighbouring region),
* ``border``      M_b = 2 L / r -- pairs straddling the region edge,
  collected with average efficiency ``beta`` per photon (independent per
  twin, hence beta^2 in the covariance).

With mu mean photons per mode, the effective collection efficiency

    A = (M_c + M_b beta^2 - mu M_u) / (M_c + M_u + M_b beta)

drives the detected noise reduction factor sigma = 1 - eta A for balanced
arm efficiency eta. In dimensionless variables X = L / 2r, D = delta / 2r
this is the usual resolution/noise-reduction trade-off: A -> 1 as X grows.

Frame synthesis realizes the same counting on a pixel grid: interior
correlated blocks per pixel, border modes living on shared pixel edges
(photons split per side), and misalignment strips on the vertical edges
(channel-1 photon left of the edge, its twin right of it). Because edge and
strip modes are shared between neighbouring pixels, hardware binning
physically recombines them into correlated modes, reproducing the monotone
sigma(L) improvement. The closed-form counts are a per-scale model and are
not exactly self-consistent under binning; the residual mismatch falls off
with X and is negligible for X >= 4 (see tests). Fractional mode counts are
dithered by randomized rounding per frame and cell; the dither is shared by
both channels through the common parent draw, so balanced NRF and NRF-alpha
are exactly unbiased.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DomainError

__all__ = [
    "ModeLayout",
    "ModeCounts",
    "mode_counts",
    "collection_efficiency",
    "predicted_nrf",
    "synthesize_layout_frames",
    "bin_grid",
    "cross_correlation_map",
]


@dataclass(frozen=True)
class ModeLayout:
    """Geometry of one detection region relative to the beam coherence.

    coherence_radius : r > 0, transverse coherence radius (length units)
    region_size      : L > 2r, side of the square detection region
    misalignment     : 0 <= delta < L/4, channel-2 offset along +x
    border_efficiency: beta in [0, 1], mean collection of straddling photons
    """

    coherence_radius: float
    region_size: float
    misalignment: float = 0.0
    border_efficiency: float = 0.5

    def __post_init__(self):
        r, L, d, b = (self.coherence_radius, self.region_size,
                      self.misalignment, self.border_efficiency)
        if not (r > 0 and math.isfinite(r)):
            raise DomainError(f"coherence_radius must be > 0, got {r}")
        if not (L > 2 * r):
            raise DomainError(f"region_size must exceed 2*coherence_radius, got L={L}, r={r}")
        if not (0 <= d < L / 4):
            raise DomainError(f"misalignment must satisfy 0 <= delta < L/4, got {d}")
        if not (0 <= b <= 1):
            raise DomainError(f"border_efficiency must lie in [0, 1], got {b}")

    @classmethod
    def from_dimensionless(cls, x: float, d: float = 0.0, beta: float = 0.5,
                           coherence_radius: float = 1.0) -> "ModeLayout":
        """Build a layout from X = L/2r and D = delta/2r."""
        r = coherence_radius
        return cls(r, 2 * r * x, 2 * r * d, beta)

    @property
    def x(self) -> float:
        return self.region_size / (2 * self.coherence_radius)

    @property
    def d(self) -> float:
        return self.misalignment / (2 * self.coherence_radius)

    def rescaled(self, factor: float) -> "ModeLayout":
        """Layout of a region `factor` times larger (same beam, same offset)."""
        return ModeLayout(self.coherence_radius, self.region_size * factor,
                          self.misalignment, self.border_efficiency)


@dataclass(frozen=True)
class ModeCounts:
    correlated: float
    unilateral: float
    border: float

    @property
    def total_mean_weight(self) -> float:
        """Effective mode number entering the mean (border weighted by beta
        is applied by the caller)."""
        return self.correlated + self.unilateral + self.border


def mode_counts(layout: ModeLayout) -> ModeCounts:
    """Closed-form mode populations of one region."""
    r, L, d = layout.coherence_radius, layout.region_size, layout.misalignment
    area = math.pi * r * r
    m_u = 2 * L * d / area
    m_c = ((L - 2 * r) ** 2 - 2 * L * d) / area
    m_b = 2 * L / r
    if m_c <= 0:
        raise DomainError(
            f"no fully correlated modes: (L-2r)^2 - 2*L*delta = {m_c * area:.3g} <= 0")
    return ModeCounts(m_c, m_u, m_b)


def collection_efficiency(layout: ModeLayout, mu: float) -> float:
    """Effective collection efficiency A of the region.

    Values outside [0, 1] (strong misalignment at high mu) are returned
    as-is with a diagnostic warning; sigma predictions then exceed 1, which
    is the physically meaningful statement.
    """
    if mu < 0:
        raise DomainError(f"mu must be >= 0, got {mu}")
    m = mode_counts(layout)
    beta = layout.border_efficiency
    a = (m.correlated + m.border * beta**2 - mu * m.unilateral) / (
        m.correlated + m.unilateral + m.border * beta)
    if not (0.0 <= a <= 1.0):
        warnings.warn(
            f"collection efficiency A={a:.4f} outside [0, 1] "
            f"(X={layout.x:.3g}, D={layout.d:.3g}, mu={mu:.3g}); "
            "misalignment noise exceeds the correlated signal", stacklevel=2)
    return a


def collection_efficiency_dimensionless(x: float, d: float, beta: float,
                                        mu: float) -> float:
    """A written purely in X = L/2r and D = delta/2r.

    Algebraically identical to :func:`collection_efficiency`; kept as an
    independent cross-check of the mode-count bookkeeping.
    """
    num = x * (math.pi * beta**2 - 2 * d * (mu + 1) - 2) + x * x + 1
    den = x * x + (math.pi * beta - 2) * x + 1
    return num / den


def predicted_nrf(eta: float, a: float) -> float:
    """Detected NRF for balanced arm efficiency eta: sigma = 1 - eta * A."""
    if not (0.0 <= eta <= 1.0):
        raise DomainError(f"eta must lie in [0, 1], got {eta}")
    return 1.0 - eta * a


# ---------------------------------------------------------------------------
# Frame synthesis
# ---------------------------------------------------------------------------

def _mode_block_totals(mean_modes: float, mu: float, rng: np.random.Generator,
                       size) -> np.ndarray:
    """Parent photons of a block with `mean_modes` thermal modes per cell.

    Integer part drawn as NegativeBinomial(floor, 1/(1+mu)); the fractional
    part is randomized rounding: one extra geometric mode with probability
    frac. Shared by both channels (the parent is thinned per channel later).
    """
    if mu == 0.0 or mean_modes == 0.0:
        return np.zeros(size, dtype=np.int64)
    p = 1.0 / (1.0 + mu)
    m_int = int(math.floor(mean_modes))
    frac = mean_modes - m_int
    if m_int > 0:
        tot = rng.negative_binomial(m_int, p, size)
    else:
        tot = np.zeros(size, dtype=np.int64)
    if frac > 1e-12:
        extra = rng.negative_binomial(1, p, size)
        tot = tot + np.where(rng.random(size) < frac, extra, 0)
    return tot


def _split_two_sided(n: np.ndarray, p_a: np.ndarray, p_b: np.ndarray,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per photon: side A with prob p_a, side B with prob p_b, else lost."""
    a = rng.binomial(n, p_a)
    with np.errstate(divide="ignore", invalid="ignore"):
        p_rest = np.where(p_a < 1.0, p_b / (1.0 - p_a), 0.0)
    b = rng.binomial(n - a, np.clip(p_rest, 0.0, 1.0))
    return a, b


def _eta_map(eta, shape) -> np.ndarray:
    m = np.broadcast_to(np.asarray(eta, dtype=float), shape).copy()
    if np.any((m < 0) | (m > 1)):
        raise DomainError("per-pixel efficiencies must lie in [0, 1]")
    return m


def _shifted(eta2: np.ndarray, shift: tuple[int, int]) -> np.ndarray:
    """eta2 sampled at destination (src + shift), zero where off-grid."""
    dy, dx = shift
    h, w = eta2.shape
    out = np.zeros_like(eta2)
    ys_src = slice(max(0, -dy), min(h, h - dy))
    xs_src = slice(max(0, -dx), min(w, w - dx))
    ys_dst = slice(max(0, dy), min(h, h + dy))
    xs_dst = slice(max(0, dx), min(w, w + dx))
    out[ys_src, xs_src] = eta2[ys_dst, xs_dst]
    return out


def _deposit_shift(dst: np.ndarray, src: np.ndarray, shift: tuple[int, int]) -> None:
    """dst[:, s+shift] += src[:, s] for all source pixels s landing on-grid."""
    dy, dx = shift
    h, w = dst.shape[1:]
    ys_src = slice(max(0, -dy), min(h, h - dy))
    xs_src = slice(max(0, -dx), min(w, w - dx))
    ys_dst = slice(max(0, dy), min(h, h + dy))
    xs_dst = slice(max(0, dx), min(w, w + dx))
    dst[:, ys_dst, xs_dst] += src[:, ys_src, xs_src]


def synthesize_layout_frames(
    layout: ModeLayout,
    mu: float,
    grid: tuple[int, int],
    n_frames: int,
    rng: np.random.Generator,
    eta1=1.0,
    eta2=1.0,
    shift_pixels: tuple[int, int] = (0, 0),
    chunk: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Synthesize correlated frame pairs on a pixel grid.

    `layout.region_size` is the side of ONE pixel at this scale. eta1/eta2
    may be scalars or (H, W) per-pixel efficiency maps (channel 2 indexed on
    its own grid); `shift_pixels` displaces channel 2 by whole pixels, with
    photons shifted off-grid lost. Returns two (K, H, W) uint32 arrays.

    Per-pixel moments reproduce the closed-form mode counting exactly;
    cross-pixel correlations through shared edges make hardware binning
    behave physically.
    """
    if mu < 0:
        raise DomainError(f"mu must be >= 0, got {mu}")
    if n_frames <= 0:
        raise DomainError("n_frames must be positive")
    h, w = grid
    if h < 1 or w < 1:
        raise DomainError(f"grid must be at least 1x1, got {grid}")
    m = mode_counts(layout)
    beta = layout.border_efficiency
    if beta > 0.5:
        # on a tiled grid a border photon lands in one of two pixels, so the
        # per-pixel collection probability cannot exceed 1/2; larger beta is
        # only meaningful for an isolated region (closed-form analysis)
        raise DomainError(f"grid synthesis requires border_efficiency <= 0.5, got {beta}")
    m_edge = m.border / 4.0          # border modes per pixel edge
    m_strip = m.unilateral           # strip modes per vertical edge

    e1 = _eta_map(eta1, (h, w))
    e2s = _shifted(_eta_map(eta2, (h, w)), shift_pixels)  # ch-2 efficiency in source coords

    # edge-side efficiency maps: value of the adjacent pixel, 0 off-grid
    def side_maps(e):
        left = np.zeros((h, w + 1)); left[:, 1:] = e          # pixel left of a vertical edge
        right = np.zeros((h, w + 1)); right[:, :w] = e        # pixel right of it
        up = np.zeros((h + 1, w)); up[1:, :] = e              # pixel above a horizontal edge
        down = np.zeros((h + 1, w)); down[:h, :] = e          # pixel below it
        return left, right, up, down

    l1, r1, u1, d1 = side_maps(e1)
    l2, r2, u2, d2 = side_maps(e2s)

    out1 = np.zeros((n_frames, h, w), dtype=np.uint32)
    out2 = np.zeros((n_frames, h, w), dtype=np.uint32)

    for lo in range(0, n_frames, chunk):
        c = min(chunk, n_frames - lo)
        sl = slice(lo, lo + c)

        # fully correlated interior modes
        n_int = _mode_block_totals(m.correlated, mu, rng, (c, h, w))
        out1[sl] += rng.binomial(n_int, e1).astype(np.uint32)
        t2 = rng.binomial(n_int, e2s)
        _deposit_shift(out2[sl], t2.astype(np.uint32), shift_pixels)

        # border modes on shared edges: each photon independently lands in
        # either adjacent pixel with probability beta (1 - 2*beta lost),
        # and the two twins choose sides independently -> beta^2 covariance
        side = beta
        for edges_shape, (sa1, sb1), (sa2, sb2), axis in (
            ((c, h, w + 1), (l1, r1), (l2, r2), "v"),
            ((c, h + 1, w), (u1, d1), (u2, d2), "h"),
        ):
            n_e = _mode_block_totals(m_edge, mu, rng, edges_shape)
            a1, b1 = _split_two_sided(n_e, side * sa1, side * sb1, rng)
            a2, b2 = _split_two_sided(n_e, side * sa2, side * sb2, rng)
            tmp2 = np.zeros((c, h, w), dtype=np.int64)
            if axis == "v":
                out1[sl, :, :] += a1[:, :, 1:].astype(np.uint32)
                out1[sl, :, :] += b1[:, :, :w].astype(np.uint32)
                tmp2 += a2[:, :, 1:]
                tmp2 += b2[:, :, :w]
            else:
                out1[sl, :, :] += a1[:, 1:, :].astype(np.uint32)
                out1[sl, :, :] += b1[:, :h, :].astype(np.uint32)
                tmp2 += a2[:, 1:, :]
                tmp2 += b2[:, :h, :]
            _deposit_shift(out2[sl], tmp2.astype(np.uint32), shift_pixels)

        # misalignment strips: channel-1 photon in the pixel left of a
        # vertical edge, its twin in the pixel right of it
        if m_strip > 0:
            n_u = _mode_block_totals(m_strip, mu, rng, (c, h, w + 1))
            s1 = rng.binomial(n_u, l1)
            s2 = rng.binomial(n_u, r2)
            out1[sl, :, :] += s1[:, :, 1:].astype(np.uint32)
            tmp2 = s2[:, :, :w].astype(np.uint32)
            _deposit_shift(out2[sl], tmp2, shift_pixels)

    return out1, out2


def bin_grid(frames: np.ndarray, d: int) -> np.ndarray:
    """Hardware binning: sum counts in d x d blocks. Grid must divide evenly."""
    f = np.asarray(frames)
    if f.ndim != 3:
        raise DataError(f"frames must be (K, H, W), got shape {f.shape}")
    k, h, w = f.shape
    if d < 1 or h % d or w % d:
        raise DataError(f"binning factor {d} does not divide grid {h}x{w}")
    return f.reshape(k, h // d, d, w // d, d).sum(axis=(2, 4))


def cross_correlation_map(
    frames1: np.ndarray,
    frames2: np.ndarray,
    max_shift: int = 5,
) -> np.ndarray:
    """Pearson cross-correlation of the two channels versus relative shift.

    Entry [i, j] is the pooled Pearson coefficient between channel-1 pixels
    and channel-2 pixels displaced by (i - max_shift, j - max_shift):

        c(xi) = mean_x Cov(N1(x), N2(x + xi)) /
                sqrt(mean_x Var N1 * mean_x Var N2)

    computed over frames on the overlapping window. The peak locates the
    channel misalignment in pixels. Zero-variance pixels are excluded with a
    diagnostic warning.
    """
    f1 = np.asarray(frames1, dtype=float)
    f2 = np.asarray(frames2, dtype=float)
    if f1.shape != f2.shape or f1.ndim != 3:
        raise DataError("frames must be two equal-shape (K, H, W) stacks")
    k, h, w = f1.shape
    if k < 3:
        raise DataError("need at least 3 frames")
    if max_shift < 0 or 2 * max_shift >= min(h, w):
        raise DataError(f"max_shift {max_shift} too large for grid {h}x{w}")
    d1 = f1 - f1.mean(axis=0)
    d2 = f2 - f2.mean(axis=0)
    v1 = (d1 * d1).sum(axis=0) / (k - 1)
    v2 = (d2 * d2).sum(axis=0) / (k - 1)
    dead = (v1 == 0) | (v2 == 0)
    if dead.any():
        warnings.warn(f"{int(dead.sum())} zero-variance pixels excluded from "
                      "the correlation map", stacklevel=2)
    size = 2 * max_shift + 1
    out = np.zeros((size, size))
    for i, dy in enumerate(range(-max_shift, max_shift + 1)):
        for j, dx in enumerate(range(-max_shift, max_shift + 1)):
            ys1 = slice(max(0, -dy), min(h, h - dy))
            xs1 = slice(max(0, -dx), min(w, w - dx))
            ys2 = slice(max(0, dy), min(h, h + dy))
            xs2 = slice(max(0, dx), min(w, w + dx))
            good = ~(dead[ys1, xs1] | dead[ys2, xs2])
            if not good.any():
                out[i, j] = np.nan
                continue
            cov = (d1[:, ys1, xs1] * d2[:, ys2, xs2]).sum(axis=0) / (k - 1)
            out[i, j] = (cov[good].mean()
                         / math.sqrt(v1[ys1, xs1][good].mean() * v2[ys2, xs2][good].mean()))
    return out


def correlation_peak(corr: np.ndarray) -> tuple[int, int]:
    """(dy, dx) of the strongest entry of a correlation map."""
    if corr.ndim != 2 or corr.shape[0] != corr.shape[1] or corr.shape[0] % 2 == 0:
        raise DataError("correlation map must be square with odd side")
    s = corr.shape[0] // 2
    i, j = np.unravel_index(np.nanargmax(corr), corr.shape)
    return int(i) - s, int(j) - s
