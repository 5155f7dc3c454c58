"""Analytic model of the honest symmetric channel.

Photon-number distributions, yields, gains and per-phase-group bit error
rates for phase-matching QKD with Eve's beam splitter at the midpoint.
All intensities passed to the distribution functions are TOTAL intensities
(Alice's arm plus Bob's arm); each arm carries half.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy.special import gammaln

from .errors import ConfigError

SETTINGS = ("vac", "w", "s")
# tallies are int64; leave headroom for sums over groups
MAX_ROUNDS = 2**62


@dataclass(frozen=True)
class ChannelParams:
    """Honest lossy channel. ``distance_km`` is the full Alice-Bob distance."""

    distance_km: float = 0.0
    attenuation_db_per_km: float = 0.2
    detector_efficiency: float = 0.2
    dark_count_rate: float = 1e-8
    misalignment: float = 0.0

    def __post_init__(self):
        if not self.distance_km >= 0:
            raise ConfigError("distance_km", f"must be >= 0, got {self.distance_km}")
        if not self.attenuation_db_per_km > 0:
            raise ConfigError("attenuation_db_per_km", "must be > 0")
        if not 0 < self.detector_efficiency <= 1:
            raise ConfigError("detector_efficiency", "must lie in (0, 1]")
        if not 0 <= self.dark_count_rate < 0.5:
            raise ConfigError("dark_count_rate", "must lie in [0, 0.5)")
        if not 0 <= self.misalignment <= 0.5:
            raise ConfigError("misalignment", "must lie in [0, 0.5]")

    @property
    def eta(self) -> float:
        """Transmittance from one party to the midpoint, detector included."""
        half = self.distance_km / 2.0
        return self.detector_efficiency * 10.0 ** (-self.attenuation_db_per_km * half / 10.0)

    @property
    def eta_total(self) -> float:
        """End-to-end Alice-Bob transmittance, detector included."""
        return self.detector_efficiency * 10.0 ** (
            -self.attenuation_db_per_km * self.distance_km / 10.0
        )

    def at(self, distance_km: float) -> "ChannelParams":
        return ChannelParams(
            distance_km=float(distance_km),
            attenuation_db_per_km=self.attenuation_db_per_km,
            detector_efficiency=self.detector_efficiency,
            dark_count_rate=self.dark_count_rate,
            misalignment=self.misalignment,
        )


@dataclass(frozen=True)
class ProtocolParams:
    """Source and post-processing settings.

    ``mu`` and ``nu`` are total intensities (each arm sends half).
    ``intensity_probabilities`` are the per-party probabilities of choosing
    (vac, w, s); both parties pick the same setting with probability r_a**2.
    ``n_alpha=None`` lets the finite-size estimator calibrate the Chernoff
    presets against ``epsilon``.
    """

    mu: float = 0.1
    nu: float = 0.02
    phase_slices: int = 16
    ec_efficiency: float = 1.1
    rounds: int = 10**12
    epsilon: float = 1.7e-10
    intensity_probabilities: tuple[float, float, float] = (0.1, 0.2, 0.7)
    n_alpha: float | None = None

    def __post_init__(self):
        object.__setattr__(
            self, "intensity_probabilities", tuple(float(r) for r in self.intensity_probabilities)
        )
        if not self.mu > 0:
            raise ConfigError("mu", "must be > 0")
        if not 0 < self.nu < self.mu:
            raise ConfigError("nu", f"must lie in (0, mu={self.mu}), got {self.nu}")
        D = self.phase_slices
        if int(D) != D or D < 2 or D % 2:
            raise ConfigError("phase_slices", f"must be an even integer >= 2, got {D}")
        object.__setattr__(self, "phase_slices", int(D))
        if not self.ec_efficiency >= 1:
            raise ConfigError("ec_efficiency", "must be >= 1")
        if int(self.rounds) != self.rounds or not 0 < self.rounds <= MAX_ROUNDS:
            raise ConfigError("rounds", f"must be a positive integer <= 2**62, got {self.rounds}")
        object.__setattr__(self, "rounds", int(self.rounds))
        if not 0 < self.epsilon < 1:
            raise ConfigError("epsilon", "must lie in (0, 1)")
        r = self.intensity_probabilities
        if len(r) != 3 or any(x < 0 for x in r) or abs(sum(r) - 1) > 1e-9:
            raise ConfigError("intensity_probabilities", f"need three probabilities summing to 1, got {r}")
        if self.n_alpha is not None and not self.n_alpha > 0:
            raise ConfigError("n_alpha", "must be > 0")

    def intensity(self, setting: str) -> float:
        return {"vac": 0.0, "w": self.nu, "s": self.mu}[setting]

    def setting_probability(self, setting: str) -> float:
        return self.intensity_probabilities[SETTINGS.index(setting)]


def binary_entropy(p):
    """Binary Shannon entropy in bits, with H(0) = H(1) = 0."""
    arr = np.asarray(p, dtype=float)
    if np.any((arr < 0) | (arr > 1)) or np.any(np.isnan(arr)):
        raise ValueError(f"binary_entropy: probability outside [0, 1]: {p}")
    inner = (arr > 0) & (arr < 1)
    x = np.where(inner, arr, 0.5)
    h = np.where(inner, -x * np.log2(x) - (1 - x) * np.log2(1 - x), 0.0)
    return float(h) if h.ndim == 0 else h


def poisson_pmf(mu_t, k):
    """e^{-mu_t} mu_t^k / k!, evaluated in log space."""
    mu_t = np.asarray(mu_t, dtype=float)
    k = np.asarray(k)
    if np.any(k < 0) or np.any(mu_t < 0):
        raise ValueError("poisson_pmf: need mu_t >= 0 and k >= 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = k * np.log(mu_t) - mu_t - gammaln(k + 1)
    out = np.where(mu_t == 0, (k == 0).astype(float), np.exp(logp))
    return float(out) if out.ndim == 0 else out


def discrete_randomized_pmf(mu: float, D: int, k: int) -> float:
    """Weight of the k-th pseudo-Fock component after D-slice phase randomization.

    Sums mu^{lD+k} e^{-mu} / (lD+k)! over l until the next term falls below
    1e-18 of the running total.
    """
    if not 0 <= k < D:
        raise ValueError(f"discrete_randomized_pmf: need 0 <= k < D, got k={k}, D={D}")
    if mu == 0:
        return 1.0 if k == 0 else 0.0
    total = 0.0
    n = k
    while True:
        term = math.exp(n * math.log(mu) - mu - math.lgamma(n + 1))
        total += term
        if total > 0 and term < 1e-18 * total:
            break
        if total == 0 and n > mu + 50 * math.sqrt(mu) + 50:
            break
        n += D
    return total


@dataclass(frozen=True)
class PhotonDistribution:
    kind: Literal["poisson", "discrete_randomized"]
    intensity: float
    pmf: np.ndarray = field(repr=False)
    D: int | None = None

    @property
    def k_max(self) -> int:
        return len(self.pmf) - 1


def photon_distribution(kind: str, intensity: float, k_max: int = 60, D: int | None = None) -> PhotonDistribution:
    """Truncated pmf; the tail mass beyond ``k_max`` is folded into the last entry."""
    if kind == "poisson":
        pmf = np.asarray(poisson_pmf(intensity, np.arange(k_max + 1)), dtype=float)
        pmf[-1] += max(0.0, 1.0 - pmf.sum())
    elif kind == "discrete_randomized":
        if D is None:
            raise ValueError("discrete_randomized distribution needs D")
        pmf = np.array([discrete_randomized_pmf(intensity, D, k) for k in range(D)])
        pmf[-1] += max(0.0, 1.0 - pmf.sum())
    else:
        raise ValueError(f"unknown distribution kind {kind!r}")
    return PhotonDistribution(kind, float(intensity), pmf, D)


def yield_k(channel: ChannelParams, k):
    """Detection probability given k photons were emitted in total."""
    k = np.asarray(k)
    if np.any(k < 0):
        raise ValueError("yield_k: k must be >= 0")
    pd = channel.dark_count_rate
    # 1 - (1 - 2 p_d)(1 - eta)^k, arranged to keep precision when the yield is tiny
    with np.errstate(divide="ignore", invalid="ignore"):
        log_loss = np.where(k == 0, 0.0, k * np.log1p(-channel.eta))
    y = -np.expm1(log_loss) + 2.0 * pd * (1.0 - channel.eta) ** k
    return float(y) if y.ndim == 0 else y


def gain_mu(channel: ChannelParams, mu):
    """Overall gain for total intensity ``mu`` split evenly over both arms."""
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < 0):
        raise ValueError("gain_mu: mu must be >= 0")
    pd = channel.dark_count_rate
    q = -np.expm1(-channel.eta * mu) + 2.0 * pd * np.exp(-channel.eta * mu)
    return float(q) if q.ndim == 0 else q


def mismatch_error(j_s: int, D: int) -> float:
    """Intrinsic error of merged phase group ``j_s``."""
    if not 0 <= j_s <= D // 2 - 1:
        raise ValueError(f"mismatch_error: j_s={j_s} outside [0, {D // 2 - 1}]")
    if j_s <= D / 4:
        return math.sin(math.pi * j_s / D) ** 2
    return math.sin(math.pi / 2 - math.pi * j_s / D) ** 2


def bit_error_rate(channel: ChannelParams, mu: float, j_s: int, D: int) -> float:
    eta, pd = channel.eta, channel.dark_count_rate
    q = gain_mu(channel, mu)
    if q <= 0:
        return 0.5
    e = (pd + eta * mu * (mismatch_error(j_s, D) + channel.misalignment)) * math.exp(-eta * mu) / q
    return min(e, 0.5)


def group_error_rates(channel: ChannelParams, mu: float, D: int) -> np.ndarray:
    return np.array([bit_error_rate(channel, mu, j, D) for j in range(D // 2)])


def discrete_randomization_deviation(mu: float, D: int) -> float:
    """Bound on the single-photon yield deviation caused by D-slice randomization."""
    if mu < 0 or D < 2:
        raise ValueError("need mu >= 0 and D >= 2")
    if mu == 0:
        return 0.0
    log_root = 0.5 * (D * math.log(mu) - math.lgamma(D + 2))
    return discrete_randomized_pmf(mu, D, 1) * math.exp(log_root)


def setting_counts(params: ProtocolParams, settings: Sequence[str] = SETTINGS) -> dict[str, float]:
    """Expected number of rounds where both parties chose each setting."""
    return {a: params.rounds * params.setting_probability(a) ** 2 for a in settings}
