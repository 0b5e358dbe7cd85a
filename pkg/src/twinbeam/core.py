"""Photon-number sources, loss channels, and detected-moment algebra.

Three sources cover everything downstream:

* ``twin_beam``      -- two-mode squeezed vacuum per mode pair: the two arms
  carry *identical* photon numbers, each arm marginally thermal with mean
  ``mu`` photons per mode.
* ``split_thermal``  -- a thermal mode (parent mean ``mu``) divided on a
  beam splitter with transmission ``tau`` into arm 1; the classically
  correlated benchmark.
* ``coherent``       -- two independent Poisson arms, mean ``mu`` each.

Detection and any other linear loss act as binomial thinning per photon.
Because thinning is i.i.d. per photon, the sum of M thinned modes equals a
thinned sum of M modes; the fast samplers exploit this by drawing the M-mode
total from a negative binomial and thinning once. The per-mode reference
sampler (`sample_pair`) is kept alongside and the two paths are checked
against each other in the test suite.

Moment conventions (per pixel, M modes, arm efficiencies eta1/eta2):

    twin beam:      <N_j> = M eta_j mu
                    Var_j = M (eta_j^2 mu^2 + eta_j mu)
                    Cov   = M eta1 eta2 mu (1 + mu)
    split thermal:  arm means M tau eta1 mu, M (1-tau) eta2 mu, each arm
                    thermal-closed under thinning;
                    Cov = M eta1 eta2 tau (1-tau) mu^2
    coherent:       Poisson arms, Cov = 0
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

SOURCE_KINDS = ("twin_beam", "split_thermal", "coherent")

# Truncation tail for enumeration: mass beyond the cut must stay below this.
PMF_TAIL = 1e-12


# ---------------------------------------------------------------------------
# Parameter bundles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SourceSpec:
    """Photon-pair source description.

    Parameters
    ----------
    kind : {"twin_beam", "split_thermal", "coherent"}
    mu : float
        Mean photons per mode. For ``split_thermal`` this is the *parent*
        mode mean before the splitter (each arm then carries tau*mu and
        (1-tau)*mu); for the other kinds it is the per-arm mode mean.
    modes : float
        Modes per pixel (M >= 1). Non-integer values are legal and are
        realized by randomized rounding in per-mode synthesis or exactly by
        the negative-binomial total.
    tau : float or None
        Splitter transmission into arm 1. Required for ``split_thermal``,
        must be None otherwise.
    """

    kind: str
    mu: float
    modes: float = 1.0
    tau: float | None = None

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise DomainError(f"unknown source kind {self.kind!r}")
        if not (self.mu >= 0.0) or not math.isfinite(self.mu):
            raise DomainError(f"mu must be finite and >= 0, got {self.mu}")
        if not (self.modes >= 1.0):
            raise DomainError(f"modes must be >= 1, got {self.modes}")
        if self.kind == "split_thermal":
            if self.tau is None or not (0.0 <= self.tau <= 1.0):
                raise DomainError("split_thermal requires tau in [0, 1]")
        elif self.tau is not None:
            raise DomainError(f"tau is only meaningful for split_thermal, got {self.tau}")


@dataclass(frozen=True)
class DetectorSpec:
    """Detector description: efficiency plus an optional noise model.

    role:
        "resolving" -- photon-number resolving pixel(s)
        "bucket"    -- single integrating element (ghost-imaging collector)
        "click"     -- on/off detector (coincidence counting)
    """

    eta: float
    dark_rate: float = 0.0       # mean dark counts / pixel / frame
    read_noise: float = 0.0      # Gaussian sigma, analog output units
    em_gain: float = 1.0         # electron-multiplying gain (1 = plain CCD)
    threshold: float | None = None
    role: str = "resolving"
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        if not (0.0 <= self.eta <= 1.0):
            raise DomainError(f"eta must lie in [0, 1], got {self.eta}")
        if self.dark_rate < 0 or self.read_noise < 0 or self.em_gain < 1.0:
            raise DomainError("dark_rate/read_noise must be >= 0 and em_gain >= 1")
        if self.role not in ("resolving", "bucket", "click"):
            raise DomainError(f"unknown detector role {self.role!r}")


@dataclass(frozen=True)
class MomentPair:
    """Mean and variance of a photon-number observable."""

    mean: float
    var: float

    def fano(self) -> float:
        if self.mean == 0:
            raise DomainError("Fano factor undefined for zero mean")
        return self.var / self.mean


@dataclass(frozen=True)
class JointMoments:
    """Second-order description of a correlated channel pair."""

    arm1: MomentPair
    arm2: MomentPair
    cov: float

    def nrf(self) -> float:
        """Noise reduction factor Var(n1 - n2) / <n1 + n2>."""
        denom = self.arm1.mean + self.arm2.mean
        if denom == 0:
            raise DomainError("NRF undefined for zero total mean")
        return (self.arm1.var + self.arm2.var - 2.0 * self.cov) / denom

    def noiseless_cs_ratio(self) -> float:
        """Cauchy-Schwarz ratio Cov / sqrt((Var1-m1)(Var2-m2)) from moments."""
        v1 = self.arm1.var - self.arm1.mean
        v2 = self.arm2.var - self.arm2.mean
        if v1 <= 0 or v2 <= 0:
            raise DomainError("normally-ordered variance <= 0: CS ratio undefined")
        return self.cov / math.sqrt(v1 * v2)


# ---------------------------------------------------------------------------
# Elementary distributions
# ---------------------------------------------------------------------------

def thermal_pmf(mu: float, nmax: int | None = None, tail: float = PMF_TAIL) -> np.ndarray:
    """Single-mode thermal (geometric) pmf p(n) = mu^n / (1+mu)^(n+1).

    If `nmax` is omitted the support is truncated automatically so the
    discarded tail mass is below `tail`.
    """
    if mu < 0 or not math.isfinite(mu):
        raise DomainError(f"mu must be finite and >= 0, got {mu}")
    if mu == 0.0:
        return np.array([1.0])
    q = mu / (1.0 + mu)
    if nmax is None:
        # residual mass beyond n is q^(n+1)
        nmax = max(1, math.ceil(math.log(tail) / math.log(q)))
    n = np.arange(nmax + 1)
    return np.exp(n * math.log(q) - math.log1p(mu))


def sample_thermal(mu: float, rng: np.random.Generator, size=None) -> np.ndarray:
    """Geometric photon numbers via inverse CDF on a uniform draw."""
    if mu < 0:
        raise DomainError(f"mu must be >= 0, got {mu}")
    if mu == 0.0:
        return np.zeros(size if size is not None else (), dtype=np.int64)
    u = rng.random(size)
    # P(N <= n) = 1 - q^(n+1)  =>  N = ceil(log1p(-u)/log q) - 1
    q = mu / (1.0 + mu)
    n = np.ceil(np.log1p(-u) / math.log(q)) - 1.0
    return np.maximum(n, 0.0).astype(np.int64)


def sample_pair(source: SourceSpec, rng: np.random.Generator, size=None):
    """Draw per-mode correlated photon-number pairs (n1, n2).

    Reference per-mode sampler: one entry per mode, ignoring `source.modes`.
    For twin beams n1 == n2 exactly; for split thermal n1 + n2 equals the
    parent draw; coherent arms are independent.
    """
    if source.kind == "twin_beam":
        n = sample_thermal(source.mu, rng, size)
        return n, n.copy() if isinstance(n, np.ndarray) else n
    if source.kind == "split_thermal":
        parent = sample_thermal(source.mu, rng, size)
        n1 = rng.binomial(parent, source.tau)
        return n1, parent - n1
    # coherent
    shape = size if size is not None else ()
    return rng.poisson(source.mu, shape), rng.poisson(source.mu, shape)


def apply_loss(n: np.ndarray, eta: float, rng: np.random.Generator) -> np.ndarray:
    """Binomial thinning: each photon survives independently with prob eta."""
    if not (0.0 <= eta <= 1.0):
        raise DomainError(f"eta must lie in [0, 1], got {eta}")
    if eta == 1.0:
        return np.asarray(n).copy()
    if eta == 0.0:
        return np.zeros_like(np.asarray(n))
    return rng.binomial(np.asarray(n), eta)


def loss_moments(m: MomentPair, eta: float) -> MomentPair:
    """Propagate (mean, var) through binomial loss.

    <N> = eta <n>,  Var(N) = eta^2 Var(n) + eta (1 - eta) <n>.
    """
    if not (0.0 <= eta <= 1.0):
        raise DomainError(f"eta must lie in [0, 1], got {eta}")
    return MomentPair(eta * m.mean, eta * eta * m.var + eta * (1.0 - eta) * m.mean)


def loss_covariance(cov: float, eta1: float, eta2: float) -> float:
    """Covariance under independent thinning of each arm scales as eta1*eta2."""
    for eta in (eta1, eta2):
        if not (0.0 <= eta <= 1.0):
            raise DomainError(f"eta must lie in [0, 1], got {eta}")
    return eta1 * eta2 * cov


# ---------------------------------------------------------------------------
# Closed-form detected moments
# ---------------------------------------------------------------------------

def source_mode_moments(source: SourceSpec) -> JointMoments:
    """Per-mode joint moments at the source (before any detection loss)."""
    mu = source.mu
    if source.kind == "twin_beam":
        arm = MomentPair(mu, mu * (1.0 + mu))
        return JointMoments(arm, arm, mu * (1.0 + mu))
    if source.kind == "split_thermal":
        t = source.tau
        m1, m2 = t * mu, (1.0 - t) * mu
        # thermal is closed under thinning: each arm is thermal with its mean
        return JointMoments(
            MomentPair(m1, m1 * (1.0 + m1)),
            MomentPair(m2, m2 * (1.0 + m2)),
            t * (1.0 - t) * mu * mu,
        )
    return JointMoments(MomentPair(mu, mu), MomentPair(mu, mu), 0.0)


def detected_moments(source: SourceSpec, eta1: float, eta2: float) -> JointMoments:
    """Joint per-pixel moments after arm losses, for `source.modes` modes."""
    per_mode = source_mode_moments(source)
    M = source.modes
    a1 = loss_moments(per_mode.arm1, eta1)
    a2 = loss_moments(per_mode.arm2, eta2)
    cov = loss_covariance(per_mode.cov, eta1, eta2)
    return JointMoments(
        MomentPair(M * a1.mean, M * a1.var),
        MomentPair(M * a2.mean, M * a2.var),
        M * cov,
    )


def twb_detected_moments(mu: float, modes: float, eta1: float, eta2: float) -> JointMoments:
    """Twin-beam detected moments; see module docstring for the closed forms."""
    return detected_moments(SourceSpec("twin_beam", mu, modes), eta1, eta2)


def fano_detected(mu: float, eta: float) -> float:
    """Fano factor of a detected multimode thermal arm: F = 1 + eta*mu."""
    if not (0.0 <= eta <= 1.0):
        raise DomainError(f"eta must lie in [0, 1], got {eta}")
    return 1.0 + eta * mu


def split_beam_nrf(tau: float, fano: float) -> float:
    """NRF of a single beam (Fano `fano`) divided with transmission `tau`.

    sigma = 1 + (F - 1)(2 tau - 1)^2; balanced division always gives 1,
    which is why a 50:50-split beam is the shot-noise reference.
    """
    if not (0.0 <= tau <= 1.0):
        raise DomainError(f"tau must lie in [0, 1], got {tau}")
    return 1.0 + (fano - 1.0) * (2.0 * tau - 1.0) ** 2


def balanced_twb_nrf(eta: float) -> float:
    """Twin-beam NRF with equal arm efficiencies: sigma = 1 - eta."""
    if not (0.0 <= eta <= 1.0):
        raise DomainError(f"eta must lie in [0, 1], got {eta}")
    return 1.0 - eta


def unbalanced_twb_nrf(mu: float, eta1: float, eta2: float) -> float:
    """Twin-beam NRF with unequal arm efficiencies.

    sigma = 1 - eta_bar + (eta1 - eta2)^2 (mu + 1/2) / (2 eta_bar); the
    imbalance penalty grows linearly with mu. Exact for multimode twin beams.
    """
    eta_bar = 0.5 * (eta1 + eta2)
    if eta_bar == 0:
        raise DomainError("NRF undefined when both arms have zero efficiency")
    return 1.0 - eta_bar + (eta1 - eta2) ** 2 * (mu + 0.5) / (2.0 * eta_bar)


def cs_ratio_twb(mu: float) -> float:
    """Cauchy-Schwarz ratio of a twin beam: 1/mu + 1 (loss-immune)."""
    if mu <= 0:
        raise DomainError("CS ratio diverges as mu -> 0; need mu > 0")
    return 1.0 / mu + 1.0


# ---------------------------------------------------------------------------
# Fast exact samplers (aggregate over modes)
# ---------------------------------------------------------------------------

def _nb_total(mu: float, modes: float, rng: np.random.Generator, size) -> np.ndarray:
    """Total photons of `modes` thermal modes: NegativeBinomial(modes, 1/(1+mu)).

    Valid for non-integer `modes` (Gamma-Poisson mixture), in which case all
    moment formulas hold with M = modes exactly.
    """
    if mu == 0.0:
        return np.zeros(size, dtype=np.int64)
    return rng.negative_binomial(modes, 1.0 / (1.0 + mu), size)


def sample_detected_pair(
    source: SourceSpec,
    eta1: float,
    eta2: float,
    size,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw detected per-pixel photon pairs, aggregated over `source.modes`.

    Exact: thinning each photon i.i.d. makes the mode grouping irrelevant,
    so the M-mode total can be drawn once and thinned per arm. For the twin
    beam the arms are thinned independently from the same total; for split
    thermal the (arm1, arm2, lost) partition is multinomial, realized as
    sequential binomials.
    """
    for eta in (eta1, eta2):
        if not (0.0 <= eta <= 1.0):
            raise DomainError(f"eta must lie in [0, 1], got {eta}")
    if source.kind == "twin_beam":
        total = _nb_total(source.mu, source.modes, rng, size)
        return rng.binomial(total, eta1), rng.binomial(total, eta2)
    if source.kind == "split_thermal":
        total = _nb_total(source.mu, source.modes, rng, size)
        p1 = source.tau * eta1
        p2 = (1.0 - source.tau) * eta2
        n1 = rng.binomial(total, p1) if p1 > 0 else np.zeros_like(total)
        if p2 == 0:
            return n1, np.zeros_like(total)
        n2 = rng.binomial(total - n1, p2 / (1.0 - p1) if p1 < 1 else 0.0)
        return n1, n2
    lam = source.mu * source.modes
    return rng.poisson(eta1 * lam, size), rng.poisson(eta2 * lam, size)


def simulate_pair_series(
    source: SourceSpec,
    eta1: float,
    eta2: float,
    n_frames: int,
    rng: np.random.Generator,
    per_mode: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """K frames of detected per-pixel totals for one correlated pixel pair.

    `per_mode=True` forces the reference path (explicit per-mode draws and
    per-mode thinning); it requires integer `source.modes` and is slower.
    The two paths are distributionally identical.
    """
    if n_frames <= 0:
        raise DomainError("n_frames must be positive")
    if not per_mode:
        return sample_detected_pair(source, eta1, eta2, n_frames, rng)
    M = int(source.modes)
    if M != source.modes:
        raise DomainError("per-mode path requires integer modes")
    n1, n2 = sample_pair(source, rng, size=(n_frames, M))
    n1 = apply_loss(n1, eta1, rng)
    n2 = apply_loss(n2, eta2, rng)
    return n1.sum(axis=1), n2.sum(axis=1)


# ---------------------------------------------------------------------------
# Exhaustive enumeration (oracle support)
# ---------------------------------------------------------------------------

def _binom_pmf_matrix(nmax: int, eta: float) -> np.ndarray:
    """B[n, k] = P(Binomial(n, eta) = k) for n, k in 0..nmax."""
    from scipy.stats import binom

    n = np.arange(nmax + 1)
    k = np.arange(nmax + 1)
    return binom.pmf(k[None, :], n[:, None], eta)


def joint_detected_pmf(
    source: SourceSpec,
    eta1: float,
    eta2: float,
    nmax: int = 80,
    tail: float = PMF_TAIL,
) -> np.ndarray:
    """Exact truncated joint pmf P[a, b] of one detected mode pair.

    Enumeration oracle: integrates the source pmf against the binomial loss
    kernels with no sampling involved. Truncation error is bounded by the
    source tail mass beyond `nmax`, which must be below `tail`.
    """
    mu_parent = source.mu
    if mu_parent > 0:
        q = mu_parent / (1.0 + mu_parent)
        if q ** (nmax + 1) > tail:
            raise DomainError(
                f"nmax={nmax} leaves tail mass {q ** (nmax + 1):.2e} > {tail:.0e} at mu={mu_parent}"
            )
    if source.kind == "twin_beam":
        p = thermal_pmf(source.mu, nmax)
        b1 = _binom_pmf_matrix(nmax, eta1)
        b2 = _binom_pmf_matrix(nmax, eta2)
        return np.einsum("n,na,nb->ab", p, b1, b2)
    if source.kind == "split_thermal":
        from scipy.stats import binom

        # trinomial(n; a, b) = Bin(a | n, p1) * Bin(b | n - a, p2/(1-p1))
        p = thermal_pmf(source.mu, nmax)
        p1 = source.tau * eta1
        p2 = (1.0 - source.tau) * eta2
        p2c = min(p2 / (1.0 - p1), 1.0) if p1 < 1.0 else 0.0
        out = np.zeros((nmax + 1, nmax + 1))
        k = np.arange(nmax + 1)
        for n in range(nmax + 1):
            a = k[: n + 1]
            pa = binom.pmf(a, n, p1)
            pb = binom.pmf(k[None, : n + 1], (n - a)[:, None], p2c)
            out[: n + 1, : n + 1] += p[n] * pa[:, None] * pb
        return out
    # coherent: independent Poisson arms
    from scipy.stats import poisson

    k = np.arange(nmax + 1)
    return np.outer(poisson.pmf(k, eta1 * source.mu), poisson.pmf(k, eta2 * source.mu))


def convolve_joint_pmf(p: np.ndarray, modes: int) -> np.ndarray:
    """Joint pmf of the sum of `modes` i.i.d. mode pairs (2-D self-convolution)."""
    from scipy.signal import fftconvolve

    if modes < 1 or int(modes) != modes:
        raise DomainError("modes must be a positive integer")
    out = p
    for _ in range(int(modes) - 1):
        out = fftconvolve(out, p)
    return np.clip(out, 0.0, None)


def moments_from_joint_pmf(p: np.ndarray) -> JointMoments:
    """Population moments of a joint pmf table (arms along axes 0 and 1)."""
    a = np.arange(p.shape[0], dtype=float)
    b = np.arange(p.shape[1], dtype=float)
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    m1 = float(pa @ a)
    m2 = float(pb @ b)
    v1 = float(pa @ a**2) - m1 * m1
    v2 = float(pb @ b**2) - m2 * m2
    cov = float(a @ p @ b) - m1 * m2
    return JointMoments(MomentPair(m1, v1), MomentPair(m2, v2), cov)
