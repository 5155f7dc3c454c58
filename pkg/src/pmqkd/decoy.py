"""Decoy-state estimation of the single-photon fraction and phase-error rate.

Two routes:

* asymptotic: exact photon-number fractions from the channel model;
* finite size: observed tallies -> inverse Chernoff bounds on the expected
  click counts of each intensity setting -> two-intensity lower bound on the
  single-photon yield -> direct Chernoff bound on the single-photon clicks
  inside the kept phase groups.

Only sent/click tallies enter the finite-size route; bit errors are never
read, so privacy estimation is independent of the observed QBER.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigError, DegenerateDataError
from .model import (
    SETTINGS,
    ChannelParams,
    ProtocolParams,
    bit_error_rate,
    gain_mu,
    poisson_pmf,
    yield_k,
)

log = logging.getLogger(__name__)

K_MAX = 60
N_ALPHA_MAX = 1e4


@dataclass(frozen=True)
class TallyTable:
    """Counts per intensity setting (rows: vac, w, s) and merged phase group (columns)."""

    phase_slices: int
    sent: np.ndarray
    clicked: np.ndarray
    bit_errors: np.ndarray

    def __post_init__(self):
        shape = (len(SETTINGS), self.phase_slices // 2)
        for name in ("sent", "clicked", "bit_errors"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if (self.sent < 0).any() or (self.clicked < 0).any() or (self.bit_errors < 0).any():
            raise ValueError("tallies must be nonnegative")
        if (self.clicked > self.sent).any():
            raise ValueError("clicked exceeds sent")
        if (self.bit_errors > self.clicked).any():
            raise ValueError("bit_errors exceeds clicked")

    @classmethod
    def zeros(cls, phase_slices: int) -> "TallyTable":
        z = np.zeros((len(SETTINGS), phase_slices // 2), dtype=np.int64)
        return cls(phase_slices, z, z, z)

    def row(self, setting: str) -> int:
        return SETTINGS.index(setting)

    def N(self, setting: str) -> int:
        return int(self.sent[self.row(setting)].sum())

    def M(self, setting: str) -> int:
        return int(self.clicked[self.row(setting)].sum())

    def __add__(self, other: "TallyTable") -> "TallyTable":
        if other.phase_slices != self.phase_slices:
            raise ValueError("cannot merge tallies with different phase slicing")
        return TallyTable(
            self.phase_slices,
            self.sent + other.sent,
            self.clicked + other.clicked,
            self.bit_errors + other.bit_errors,
        )

    def scaled(self, factor: float) -> "TallyTable":
        f = lambda a: np.rint(a * factor).astype(np.int64)  # noqa: E731
        return TallyTable(self.phase_slices, f(self.sent), f(self.clicked), f(self.bit_errors))

    def group_error_rates(self, setting: str = "s") -> np.ndarray:
        r = self.row(setting)
        with np.errstate(divide="ignore", invalid="ignore"):
            e = self.bit_errors[r] / self.clicked[r]
        return np.where(self.clicked[r] > 0, e, 0.5)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setting", "j_s", "sent", "clicked", "bit_errors"])
        for setting in sorted(SETTINGS):
            r = self.row(setting)
            for j in range(self.phase_slices // 2):
                w.writerow([setting, j, self.sent[r, j], self.clicked[r, j], self.bit_errors[r, j]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TallyTable":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows or set(rows[0]) != {"setting", "j_s", "sent", "clicked", "bit_errors"}:
            raise ValueError("tally CSV must have columns setting,j_s,sent,clicked,bit_errors")
        groups = max(int(r["j_s"]) for r in rows) + 1
        arrs = {k: np.zeros((len(SETTINGS), groups), dtype=np.int64) for k in ("sent", "clicked", "bit_errors")}
        for r in rows:
            if r["setting"] not in SETTINGS:
                raise ValueError(f"unknown setting {r['setting']!r}")
            i, j = SETTINGS.index(r["setting"]), int(r["j_s"])
            for k in arrs:
                arrs[k][i, j] = int(r[k])
        return cls(2 * groups, arrs["sent"], arrs["clicked"], arrs["bit_errors"])


@dataclass(frozen=True)
class ChernoffInterval:
    value: float
    lower: float
    upper: float
    delta_L: float
    delta_U: float
    failure_probability: float
    n_alpha: float
    kind: str


@dataclass(frozen=True)
class DecoyEstimate:
    Y1_lower: float
    q1_lower: float
    eph_upper: float
    failure_probability: float
    method: str
    groups: tuple[int, ...] = ()
    details: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = list(self.groups)
        return d


def g2(x: float) -> float:
    return math.log1p(x) - x / (1 + x)


def _inverse_terms(chi: float, n_alpha: float) -> tuple[float, float, float, float, float, float]:
    root = math.sqrt(chi)
    lower = chi - n_alpha * root
    upper = chi + n_alpha * root
    if lower > 0:
        d_l = chi / lower - 1
        t_l = math.exp(-chi * g2(d_l))
    else:
        lower, d_l, t_l = 0.0, math.inf, 0.0
    d_u = 1 - chi / upper
    # the g2 form floors at exp(-chi * g2(1)) for tiny chi; the multiplicative
    # lower-tail bound on the same event has no floor, so keep the smaller
    t_u = math.exp(-max(chi * g2(d_u), d_u * d_u * upper / 2))
    return lower, upper, d_l, d_u, t_l, t_u


def chernoff_inverse(chi: float, n_alpha: float) -> ChernoffInterval:
    """Bounds on E[chi] from one observed count, with the Gaussian preset width.

    For chi = 0 only a one-sided statement is possible: P(chi = 0) <= e^{-E},
    so the upper end is n_alpha^2 / 2 with failure probability e^{-upper}.
    """
    if chi < 0:
        raise ValueError("observed count must be >= 0")
    if chi == 0:
        upper = n_alpha**2 / 2
        return ChernoffInterval(0.0, 0.0, upper, math.inf, 1.0, math.exp(-upper), n_alpha, "inverse")
    lower, upper, d_l, d_u, t_l, t_u = _inverse_terms(chi, n_alpha)
    return ChernoffInterval(float(chi), lower, upper, d_l, d_u, t_l + t_u, n_alpha, "inverse")


def chernoff_direct(expected: float, n_alpha: float) -> ChernoffInterval:
    """Bounds on a count from its expectation, delta = n_alpha / sqrt(E)."""
    if expected < 0:
        raise ValueError("expected value must be >= 0")
    if expected == 0:
        return ChernoffInterval(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, n_alpha, "direct")
    d = n_alpha / math.sqrt(expected)
    term = math.exp(-d * d * expected / (2 + d))
    # a lower end clipped at zero cannot fail
    t_l = term if d < 1 else 0.0
    return ChernoffInterval(
        float(expected), max(0.0, (1 - d) * expected), (1 + d) * expected, d, d, t_l + term, n_alpha, "direct"
    )


def calibrate_n_alpha(kind: str, value: float, target: float) -> float:
    """Smallest preset width whose Chernoff failure probability is <= target.

    Returns ``N_ALPHA_MAX`` (logged at debug level) if no width reaches the
    target; kept as a guard, the current bounds always get there.
    """
    fn = chernoff_inverse if kind == "inverse" else chernoff_direct
    if value == 0:
        if kind == "direct":
            return 1.0
        return math.sqrt(2 * math.log(1 / target))

    def excess(n):
        return math.log(max(fn(value, n).failure_probability, 1e-300)) - math.log(target)

    lo, hi = 1e-3, 8.0
    while excess(hi) > 0:
        hi *= 2
        if hi > N_ALPHA_MAX:
            log.debug("%s Chernoff bound on count %g cannot reach failure probability %g", kind, value, target)
            return N_ALPHA_MAX
    if excess(lo) <= 0:
        return lo
    n = brentq(excess, lo, hi, xtol=1e-12, rtol=1e-12)
    # the direct bound jumps where its lower end clips; step past the jump
    step = 1e-12 * n
    while excess(n) > 0:
        n += step
        step *= 2
    return n


def asymptotic_q_parity(channel: ChannelParams, mu: float, k_max: int = K_MAX) -> tuple[float, float]:
    """(q_odd, q_even): fractions of detections caused by odd/even photon numbers."""
    if not mu > 0:
        raise ConfigError("mu", "must be > 0")
    q_total = gain_mu(channel, mu)
    if q_total <= 0:
        raise DegenerateDataError("channel gain is zero; photon-number fractions undefined")
    k = np.arange(k_max + 1)
    q = poisson_pmf(mu, k) * yield_k(channel, k) / q_total
    q_odd = float(q[1::2].sum())
    return q_odd, 1.0 - q_odd


def asymptotic_estimate(channel: ChannelParams, params: ProtocolParams) -> DecoyEstimate:
    """Infinite-decoy estimate: exact single-photon yield and fraction."""
    q_total = gain_mu(channel, params.mu)
    if q_total <= 0:
        raise DegenerateDataError("channel gain is zero")
    y1 = yield_k(channel, 1)
    q1 = poisson_pmf(params.mu, 1) * y1 / q_total
    return DecoyEstimate(y1, q1, min(1.0, max(0.0, 1.0 - q1)), 0.0, "asymptotic")


def estimate_Y1_two_intensity(Q_s_bounds, Q_w_bounds, Q_vac_bounds, mu: float, nu: float) -> float:
    """Lower bound on the single-photon yield from (lower, upper) gain bounds."""
    if not 0 < nu < mu:
        raise ConfigError("nu", f"two-intensity estimator needs 0 < nu < mu (mu={mu}, nu={nu})")
    w_lower = Q_w_bounds[0]
    s_upper = Q_s_bounds[1]
    vac_upper = Q_vac_bounds[1]
    y1 = mu / (mu * nu - nu * nu) * (
        w_lower * math.exp(nu)
        - s_upper * math.exp(mu) * nu * nu / (mu * mu)
        - (mu * mu - nu * nu) / (mu * mu) * vac_upper
    )
    if not 0 <= y1 <= 1:
        log.debug("clamping single-photon yield bound %g into [0, 1]", y1)
    return min(1.0, max(0.0, y1))


@dataclass(frozen=True)
class _StepOne:
    Y1_lower: float
    M1_lower: float
    N1_inf: float
    intervals: dict
    eps1: float


def _check_settings(tallies: TallyTable):
    missing = [a for a in SETTINGS if tallies.N(a) == 0]
    if missing:
        raise ConfigError("intensity_probabilities", f"estimator needs all three settings; no rounds sent for {missing}")


def _step_one(tallies: TallyTable, params: ProtocolParams) -> _StepOne:
    _check_settings(tallies)
    share = params.epsilon / 4
    intervals = {}
    for a in SETTINGS:
        m = tallies.M(a)
        n = params.n_alpha if params.n_alpha is not None else calibrate_n_alpha("inverse", m, share)
        intervals[a] = chernoff_inverse(m, n)
    gains = {a: (iv.lower / tallies.N(a), iv.upper / tallies.N(a)) for a, iv in intervals.items()}
    y1 = estimate_Y1_two_intensity(gains["s"], gains["w"], gains["vac"], params.mu, params.nu)
    n1_inf = sum(poisson_pmf(params.intensity(a), 1) * tallies.N(a) for a in SETTINGS)
    eps1 = sum(iv.failure_probability for iv in intervals.values())
    return _StepOne(y1, y1 * n1_inf, n1_inf, intervals, eps1)


def _step_two(tallies: TallyTable, params: ProtocolParams, step: _StepOne, groups: tuple[int, ...]) -> DecoyEstimate:
    s = tallies.row("s")
    idx = list(groups)
    clicks = int(tallies.clicked[s, idx].sum())
    if clicks == 0:
        raise DegenerateDataError(f"no signal clicks in phase groups {groups}")
    sent = int(tallies.sent[s, idx].sum())
    p_sj = poisson_pmf(params.mu, 1) * sent / step.N1_inf if step.N1_inf > 0 else 0.0
    expected = p_sj * step.M1_lower
    n = params.n_alpha if params.n_alpha is not None else calibrate_n_alpha("direct", expected, params.epsilon / 4)
    iv = chernoff_direct(expected, n)
    q1 = min(1.0, max(0.0, iv.lower / clicks))
    eps = step.eps1 + iv.failure_probability
    details = dict(
        M1_lower=step.M1_lower,
        N1_inf=step.N1_inf,
        M1_sJ_lower=iv.lower,
        M_sJ=clicks,
        N_sJ=sent,
        intervals={**{a: asdict(v) for a, v in step.intervals.items()}, "s_J": asdict(iv)},
    )
    return DecoyEstimate(step.Y1_lower, q1, 1.0 - q1, eps, "finite_chernoff", tuple(groups), details)


def finite_size_estimate(tallies: TallyTable, params: ProtocolParams, groups: Iterable[int] | None = None) -> DecoyEstimate:
    """Two-step Chernoff estimate of the phase-error rate for kept groups ``groups``."""
    if tallies.phase_slices != params.phase_slices:
        raise ConfigError("phase_slices", "tallies and protocol parameters disagree on D")
    g = tuple(range(params.phase_slices // 2)) if groups is None else tuple(sorted(set(groups)))
    if not g:
        raise ConfigError("groups", "group set must be nonempty")
    if min(g) < 0 or max(g) >= params.phase_slices // 2:
        raise ConfigError("groups", f"group index outside [0, {params.phase_slices // 2 - 1}]")
    est = _step_two(tallies, params, _step_one(tallies, params), g)
    if not within_budget(est, params):
        warnings.warn(
            f"phase-error failure probability {est.failure_probability:.3g} exceeds the budget {params.epsilon:.3g}",
            stacklevel=2,
        )
    return est


def within_budget(est: DecoyEstimate, params: ProtocolParams) -> bool:
    return est.failure_probability <= params.epsilon * (1 + 1e-9)


def expected_tallies(channel: ChannelParams, params: ProtocolParams) -> TallyTable:
    """Noise-free tallies: every count set to its expectation, rounded to an integer."""
    D = params.phase_slices
    groups = D // 2
    sent = np.zeros((3, groups))
    clicked = np.zeros((3, groups))
    errors = np.zeros((3, groups))
    for i, a in enumerate(SETTINGS):
        mu_a = params.intensity(a)
        sent[i] = params.rounds * params.setting_probability(a) ** 2 * 2.0 / D
        clicked[i] = sent[i] * gain_mu(channel, mu_a)
        errors[i] = clicked[i] * np.array([bit_error_rate(channel, mu_a, j, D) for j in range(groups)])
    r = lambda x: np.rint(x).astype(np.int64)  # noqa: E731
    return TallyTable(D, r(sent), np.minimum(r(clicked), r(sent)), np.minimum(r(errors), r(clicked)))
