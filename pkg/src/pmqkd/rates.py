"""Key rates: PM asymptotic and finite size, MDI baseline, PLOB bound, scans."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .decoy import TallyTable, _step_one, _step_two, asymptotic_q_parity, expected_tallies
from .errors import ConfigError, DegenerateDataError
from .model import (
    ChannelParams,
    ProtocolParams,
    binary_entropy,
    gain_mu,
    group_error_rates,
    poisson_pmf,
    yield_k,
)

PROTOCOLS = ("pm-asym", "pm-finite", "mdi", "plob")
MU_BOUNDS = (1e-4, 2.0)


@dataclass(frozen=True)
class GroupContribution:
    j_s: int
    error_rate: float
    contribution: float
    kept: bool


@dataclass(frozen=True)
class GroupSelection:
    """``auto_positive`` keeps the groups that add key; ``explicit`` keeps ``groups``."""

    policy: str = "auto_positive"
    groups: tuple[int, ...] = ()

    def __post_init__(self):
        if self.policy not in ("auto_positive", "explicit"):
            raise ConfigError("policy", f"unknown group policy {self.policy!r}")
        object.__setattr__(self, "groups", tuple(sorted(set(int(g) for g in self.groups))))
        if self.policy == "explicit" and not self.groups:
            raise ConfigError("groups", "explicit selection needs at least one group")

    @classmethod
    def explicit(cls, groups: Iterable[int]) -> "GroupSelection":
        return cls("explicit", tuple(groups))

    def check(self, D: int):
        if self.groups and (min(self.groups) < 0 or max(self.groups) >= D // 2):
            raise ConfigError("groups", f"group index outside [0, {D // 2 - 1}]")


AUTO = GroupSelection()


@dataclass(frozen=True)
class RatePoint:
    """Key rates at one distance. Dict fields are keyed by protocol name."""

    distance_km: float
    rates: dict = field(default_factory=dict)
    per_group: dict = field(default_factory=dict)
    eph_used: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)
    method: str = ""

    @property
    def rate(self) -> float:
        if len(self.rates) != 1:
            raise ValueError("rate is ambiguous for multi-protocol points; use rates[...]")
        return next(iter(self.rates.values()))

    def merge(self, other: "RatePoint") -> "RatePoint":
        return RatePoint(
            self.distance_km,
            {**self.rates, **other.rates},
            {**self.per_group, **other.per_group},
            {**self.eph_used, **other.eph_used},
            {**self.settings, **other.settings},
            ",".join(m for m in (self.method, other.method) if m),
        )

    def groups_kept(self, protocol: str) -> tuple[int, ...]:
        return tuple(g.j_s for g in self.per_group.get(protocol, ()) if g.kept)


def _h(p: float) -> float:
    return binary_entropy(min(max(p, 0.0), 0.5))


def plob_bound(eta_total: float) -> float:
    """Repeaterless capacity -log2(1 - eta) for end-to-end transmittance eta."""
    if not 0 < eta_total < 1:
        raise ValueError(f"eta_total must lie in (0, 1), got {eta_total}")
    return -math.log1p(-eta_total) / math.log(2)


def pm_rate_asymptotic(
    channel: ChannelParams,
    params: ProtocolParams,
    selection: GroupSelection = AUTO,
    phase_error: str = "q_even",
) -> RatePoint:
    """Infinite-decoy PM rate per pulse.

    ``phase_error="one_minus_q1"`` uses 1 - q_1 in place of q_even; that is
    the quantity the finite-size estimator converges to.
    """
    D, f = params.phase_slices, params.ec_efficiency
    selection.check(D)
    q = gain_mu(channel, params.mu)
    if q <= 0:
        return RatePoint(channel.distance_km, {"pm-asym": 0.0}, {"pm-asym": ()}, {"pm-asym": 1.0}, method="asymptotic")
    if phase_error == "q_even":
        eph = asymptotic_q_parity(channel, params.mu)[1]
    elif phase_error == "one_minus_q1":
        eph = 1.0 - poisson_pmf(params.mu, 1) * yield_k(channel, 1) / q
    else:
        raise ConfigError("phase_error", f"unknown phase error mode {phase_error!r}")
    h_ph = _h(eph)
    errors = group_error_rates(channel, params.mu, D)
    groups, total = [], 0.0
    for j, e in enumerate(errors):
        term = 1.0 - h_ph - f * binary_entropy(e)
        kept = term > 0 if selection.policy == "auto_positive" else j in selection.groups
        c = 2.0 * q / D * term
        if kept:
            total += c
        groups.append(GroupContribution(j, float(e), c, bool(kept)))
    return RatePoint(
        channel.distance_km,
        {"pm-asym": max(total, 0.0)},
        {"pm-asym": tuple(groups)},
        {"pm-asym": float(eph)},
        {"pm-asym": {"mu": params.mu}},
        "asymptotic",
    )


def pm_rate_finite(
    source: TallyTable | ChannelParams,
    params: ProtocolParams,
    selection: GroupSelection = AUTO,
) -> RatePoint:
    """Finite-size PM rate N_k / N from tallies, or from noise-free tallies of a channel.

    With ``auto_positive`` the groups are added in order of increasing
    observed error rate and the prefix with the largest key length is kept;
    the phase-error bound depends on the kept set, so this search replaces
    the per-group test used asymptotically.
    """
    D, f = params.phase_slices, params.ec_efficiency
    selection.check(D)
    if isinstance(source, ChannelParams):
        tallies, distance = expected_tallies(source, params), source.distance_km
    else:
        tallies, distance = source, float("nan")
    s = tallies.row("s")
    clicked = tallies.clicked[s]
    errors = tallies.group_error_rates("s")
    n_rounds = params.rounds
    step = _step_one(tallies, params)

    def key_length(groups):
        est = _step_two(tallies, params, step, groups)
        h_ph = _h(est.eph_upper)
        terms = {j: float(clicked[j]) * (1.0 - h_ph - f * binary_entropy(errors[j])) for j in range(D // 2)}
        return sum(terms[j] for j in groups), est, terms

    if selection.policy == "explicit":
        candidates = [selection.groups]
    else:
        order = [int(j) for j in np.argsort(errors, kind="stable")]
        candidates = [tuple(sorted(order[: m + 1])) for m in range(D // 2)]
    best = None
    for groups in candidates:
        try:
            nk, est, terms = key_length(groups)
        except DegenerateDataError:
            if selection.policy == "explicit":
                raise
            continue
        if best is None or nk > best[0]:
            best = (nk, est, terms, groups)
    if best is None:
        raise DegenerateDataError("no phase group has signal clicks")
    nk, est, terms, groups = best
    keep = nk > 0
    per_group = tuple(
        GroupContribution(j, float(errors[j]), terms[j] / n_rounds, bool(keep and j in groups)) for j in range(D // 2)
    )
    return RatePoint(
        distance,
        {"pm-finite": max(nk, 0.0) / n_rounds},
        {"pm-finite": per_group},
        {"pm-finite": est.eph_upper},
        {
            "pm-finite": {
                "mu": params.mu,
                "nu": params.nu,
                "intensity_probabilities": params.intensity_probabilities,
                "failure_probability": est.failure_probability,
            }
        },
        "finite_chernoff",
    )


def bessel_i0(x: float) -> float:
    """Modified Bessel function I_0: power series below 50, asymptotic series above."""
    x = abs(float(x))
    if x < 50.0:
        term, total, k = 1.0, 1.0, 0
        y = x * x / 4.0
        while term > 1e-17 * total:
            k += 1
            term *= y / (k * k)
            total += term
        return total
    term, total = 1.0, 1.0
    for k in range(1, 30):
        new = term * (2 * k - 1) ** 2 / (8.0 * k * x)
        if new > term:
            break
        term = new
        total += term
        if term < 1e-17 * total:
            break
    return math.exp(x) / math.sqrt(2 * math.pi * x) * total


def mdi_rate(channel: ChannelParams, params: ProtocolParams, background_error: float = 0.5) -> RatePoint:
    """Symmetric MDI-QKD baseline; the channel misalignment plays the role of e_d."""
    eta = channel.eta
    pd, f, e_d, e0 = channel.dark_count_rate, params.ec_efficiency, channel.misalignment, background_error
    ma = mb = params.mu / 2
    ea = eb = eta
    y11 = (1 - pd) ** 2 * (ea * eb / 2 + (2 * ea + 2 * eb - 3 * ea * eb) * pd + 4 * (1 - ea) * (1 - eb) * pd**2)
    e11 = (e0 * y11 - (e0 - e_d) * (1 - pd**2) * ea * eb / 2) / y11 if y11 > 0 else 0.5
    e11 = min(max(e11, 0.0), 0.5)
    q11 = ma * mb * math.exp(-ma - mb) * y11
    mu_p = ea * ma + eb * mb
    x = 0.5 * math.sqrt(ea * ma * eb * mb)
    qc = 2 * (1 - pd) ** 2 * math.exp(-mu_p / 2) * (1 - (1 - pd) * math.exp(-ea * ma / 2)) * (1 - (1 - pd) * math.exp(-eb * mb / 2))
    qe = 2 * pd * (1 - pd) ** 2 * math.exp(-mu_p / 2) * (bessel_i0(2 * x) - (1 - pd) * math.exp(-mu_p / 2))
    q_rect = qc + qe
    e_rect = (e_d * qc + (1 - e_d) * qe) / q_rect if q_rect > 0 else 0.5
    r = 0.5 * (q11 * (1 - binary_entropy(e11)) - f * q_rect * _h(e_rect))
    return RatePoint(
        channel.distance_km,
        {"mdi": max(r, 0.0)},
        settings={"mdi": {"mu": params.mu, "e11": e11, "E_rect": e_rect}},
        method="mdi",
    )


def optimize_mu(rate_fn: Callable[[float], float], bounds=MU_BOUNDS, grid: int = 64) -> tuple[float, float]:
    """Maximize a one-parameter rate: log-grid seed, then bounded Brent around the best node.

    The grid step avoids stalling on the flat zero-rate region that a bare
    bounded search can land in.
    """
    lo, hi = bounds
    nodes = np.geomspace(lo, hi, grid)
    vals = np.array([rate_fn(m) for m in nodes])
    i = int(np.argmax(vals))
    if vals[i] <= 0:
        return float(nodes[i]), 0.0
    a, b = nodes[max(i - 1, 0)], nodes[min(i + 1, grid - 1)]
    res = minimize_scalar(lambda m: -rate_fn(m), bounds=(a, b), method="bounded", options={"xatol": 1e-10 * b})
    if -res.fun >= vals[i]:
        return float(res.x), float(-res.fun)
    return float(nodes[i]), float(vals[i])


def _with_mu(params: ProtocolParams, mu: float) -> ProtocolParams:
    return replace(params, mu=mu, nu=min(params.nu, mu / 2))


def optimal_pm_asymptotic(channel, params, selection=AUTO, phase_error="q_even") -> RatePoint:
    mu, _ = optimize_mu(lambda m: pm_rate_asymptotic(channel, _with_mu(params, m), selection, phase_error).rate)
    return pm_rate_asymptotic(channel, _with_mu(params, mu), selection, phase_error)


def optimal_mdi(channel, params) -> RatePoint:
    mu, _ = optimize_mu(lambda m: mdi_rate(channel, _with_mu(params, m)).rate)
    return mdi_rate(channel, _with_mu(params, mu))


def _decode(x, params: ProtocolParams) -> ProtocolParams:
    mu = min(math.exp(x[0]), MU_BOUNDS[1])
    nu = mu / (1 + math.exp(-x[1]))
    a, b = math.exp(min(x[2], 50)), math.exp(min(x[3], 50))
    rs, rw = a / (1 + a + b), b / (1 + a + b)
    return replace(params, mu=mu, nu=nu, intensity_probabilities=(1 - rs - rw, rw, rs))


def _encode(params: ProtocolParams) -> np.ndarray:
    rv, rw, rs = params.intensity_probabilities
    t = params.nu / params.mu
    return np.array([math.log(params.mu), math.log(t / (1 - t)), math.log(rs / rv), math.log(rw / rv)])


def optimize_finite(channel: ChannelParams, params: ProtocolParams, x0: Sequence[float] | None = None):
    """Maximize the finite rate over (mu, nu/mu, r_s, r_w) by multi-start Nelder-Mead.

    Returns (RatePoint, best ProtocolParams, best raw vector for warm starts).
    """

    def objective(x):
        try:
            p = _decode(x, params)
            point = pm_rate_finite(channel, p)
            if point.settings["pm-finite"]["failure_probability"] > params.epsilon * (1 + 1e-9):
                return 1e3
            r = point.rate
        except (ConfigError, DegenerateDataError, ValueError, OverflowError):
            return 1e3
        return -math.log(r) if r > 0 else 1e3

    starts = [
        _encode(replace(params, mu=0.05, nu=0.015, intensity_probabilities=(0.2, 0.2, 0.6))),
        _encode(replace(params, mu=0.1, nu=0.012, intensity_probabilities=(0.25, 0.25, 0.5))),
        _encode(replace(params, mu=0.03, nu=0.01, intensity_probabilities=(0.15, 0.15, 0.7))),
    ]
    if x0 is not None:
        starts.insert(0, np.asarray(x0, dtype=float))
    best = None
    for s in starts:
        res = minimize(objective, s, method="Nelder-Mead", options={"xatol": 1e-4, "fatol": 1e-7, "maxiter": 2000})
        if best is None or res.fun < best.fun:
            best = res
        if x0 is not None and best.fun < 1e3:
            break
    p = _decode(best.x, params)
    if best.fun >= 1e3:
        zero = RatePoint(channel.distance_km, {"pm-finite": 0.0}, {"pm-finite": ()}, {"pm-finite": 1.0}, method="finite_chernoff")
        return zero, p, best.x
    point = pm_rate_finite(channel, p)
    return replace(point, distance_km=channel.distance_km), p, best.x


@dataclass(frozen=True)
class ScanResult:
    points: list
    crossings: dict

    def series(self, protocol: str) -> np.ndarray:
        return np.array([p.rates[protocol] for p in self.points])

    @property
    def distances(self) -> np.ndarray:
        return np.array([p.distance_km for p in self.points])


def _evaluate(channel: ChannelParams, params: ProtocolParams, protocols, optimize: bool, warm=None):
    point = RatePoint(channel.distance_km)
    for proto in protocols:
        if proto == "plob":
            p = RatePoint(channel.distance_km, {"plob": plob_bound(channel.eta_total)}, method="plob")
        elif proto == "pm-asym":
            p = optimal_pm_asymptotic(channel, params) if optimize else pm_rate_asymptotic(channel, params)
        elif proto == "mdi":
            p = optimal_mdi(channel, params) if optimize else mdi_rate(channel, params)
        elif proto == "pm-finite":
            if optimize:
                p, _, warm = optimize_finite(channel, params, warm)
            else:
                p = pm_rate_finite(channel, params)
                p = replace(p, distance_km=channel.distance_km)
        else:
            raise ConfigError("protocols", f"unknown protocol {proto!r}; choose from {PROTOCOLS}")
        point = point.merge(p)
    return point, warm


def _evaluate_star(args):
    return _evaluate(*args)[0]


def find_plob_crossing(rate_fn: Callable[[float], float], channel: ChannelParams, lo: float, hi: float, tol: float = 0.05) -> float:
    """Bisect for the distance where ``rate_fn`` overtakes the PLOB bound in [lo, hi]."""
    def gap(d):
        return rate_fn(d) - plob_bound(channel.at(d).eta_total)

    if gap(hi) <= 0:
        raise ValueError("rate does not exceed the bound at the upper end")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if gap(mid) > 0:
            hi = mid
        else:
            lo = mid
    return hi


def scan_distance(
    channel: ChannelParams,
    params: ProtocolParams,
    protocols: Sequence[str],
    distances: Sequence[float],
    optimize: bool = True,
    refine: bool = True,
    workers: int | None = None,
) -> ScanResult:
    """Rates over a distance grid plus the first PLOB crossing of each PM curve.

    Crossings are bracketed on the grid and then refined by bisection, so
    they do not depend on grid spacing beyond the bisection tolerance.
    """
    distances = [float(d) for d in distances]
    if any(b < a for a, b in zip(distances, distances[1:])):
        raise ConfigError("distances", "must be sorted ascending")
    protocols = list(protocols)
    for p in protocols:
        if p not in PROTOCOLS:
            raise ConfigError("protocols", f"unknown protocol {p!r}; choose from {PROTOCOLS}")
    if workers and workers > 1:
        jobs = [(channel.at(d), params, protocols, optimize) for d in distances]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(_evaluate_star, jobs))
    else:
        points, warm = [], None
        for d in distances:
            pt, warm = _evaluate(channel.at(d), params, protocols, optimize, warm)
            points.append(pt)
    crossings = {}
    for proto in (p for p in protocols if p.startswith("pm")):
        crossings[proto] = None
        prev = None
        for pt in points:
            above = pt.rates[proto] > plob_bound(channel.at(pt.distance_km).eta_total)
            if above:
                d = pt.distance_km
                if refine and prev is not None:
                    fn = lambda x, proto=proto: _evaluate(channel.at(x), params, [proto], optimize)[0].rates[proto]  # noqa: E731
                    d = find_plob_crossing(fn, channel, prev, pt.distance_km)
                crossings[proto] = d
                break
            prev = pt.distance_km
    return ScanResult(points, crossings)


def _fmt(x) -> str:
    return "%.12g" % x


def scan_to_csv(result: ScanResult, channel: ChannelParams) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["distance_km", "protocol", "rate", "eph", "groups_kept", "crossing_flag"])
    for pt in result.points:
        plob = plob_bound(channel.at(pt.distance_km).eta_total)
        for proto, r in pt.rates.items():
            eph = pt.eph_used.get(proto)
            kept = ";".join(str(j) for j in pt.groups_kept(proto))
            flag = int(proto.startswith("pm") and r > plob)
            w.writerow([_fmt(pt.distance_km), proto, _fmt(r), "" if eph is None else _fmt(eph), kept, flag])
    return buf.getvalue()
