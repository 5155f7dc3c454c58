import math
from dataclasses import replace

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmqkd.decoy import (
    TallyTable,
    asymptotic_estimate,
    asymptotic_q_parity,
    calibrate_n_alpha,
    chernoff_direct,
    chernoff_inverse,
    estimate_Y1_two_intensity,
    expected_tallies,
    finite_size_estimate,
    g2,
)
from pmqkd.errors import ConfigError, DegenerateDataError
from pmqkd.model import SETTINGS, ChannelParams, ProtocolParams, gain_mu, poisson_pmf, yield_k

mp.mp.dps = 40


def mp_g2(x):
    x = mp.mpf(x)
    return mp.log(1 + x) - x / (1 + x)


def eps_inverse_oracle(chi, n):
    chi, n = mp.mpf(chi), mp.mpf(n)
    lo, hi = chi - n * mp.sqrt(chi), chi + n * mp.sqrt(chi)
    d_l, d_u = chi / lo - 1, 1 - chi / hi
    return mp.e ** (-chi * mp_g2(d_l)) + mp.e ** (-max(chi * mp_g2(d_u), d_u**2 * hi / 2))


class TestChernoff:
    def test_g2_zero(self):
        assert g2(0) == 0

    def test_inverse_value(self):
        iv = chernoff_inverse(1e6, 6.2)
        assert iv.lower == pytest.approx(1e6 - 6200)
        assert iv.upper == pytest.approx(1e6 + 6200)
        assert iv.failure_probability == pytest.approx(float(eps_inverse_oracle(10**6, "6.2")), rel=1e-8)
        # a 6.2-sigma preset sits two orders above the 1.7e-10 budget
        assert 1e-9 < iv.failure_probability < 1e-7

    def test_direct_value(self):
        iv = chernoff_direct(1e6, 6)
        assert iv.upper - iv.value == pytest.approx(6e3)
        assert iv.value - iv.lower == pytest.approx(6e3)
        assert iv.failure_probability == pytest.approx(2 * math.exp(-36 * 1e6 / (2e6 + 6e3)), rel=1e-12)

    def test_degenerate(self):
        iv = chernoff_direct(0, 6)
        assert (iv.lower, iv.upper, iv.failure_probability) == (0, 0, 0)
        iv = chernoff_inverse(0, 6)
        assert iv.lower == 0 and iv.upper == 18
        assert iv.failure_probability == pytest.approx(math.exp(-18))

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            chernoff_inverse(-1, 3)
        with pytest.raises(ValueError):
            chernoff_direct(-1, 3)

    @given(st.floats(1, 1e12), st.floats(0.1, 20))
    def test_inverse_invariants(self, chi, n):
        iv = chernoff_inverse(chi, n)
        assert iv.lower <= iv.value <= iv.upper
        t_u = math.exp(-max(chi * g2(iv.delta_U), iv.delta_U**2 * iv.upper / 2))
        t_l = math.exp(-chi * g2(iv.delta_L)) if math.isfinite(iv.delta_L) else 0.0
        assert iv.failure_probability == pytest.approx(t_l + t_u, rel=1e-12)

    @given(st.floats(1e-3, 1e12), st.floats(0.1, 20))
    def test_direct_invariants(self, e, n):
        iv = chernoff_direct(e, n)
        assert 0 <= iv.lower <= iv.value <= iv.upper

    @pytest.mark.parametrize("kind,value", [("inverse", 1e6), ("inverse", 300), ("direct", 1e6), ("direct", 5)])
    def test_calibration(self, kind, value):
        target = 1e-11
        n = calibrate_n_alpha(kind, value, target)
        fn = chernoff_inverse if kind == "inverse" else chernoff_direct
        assert fn(value, n).failure_probability <= target
        assert fn(value, n * 0.99).failure_probability > target

    @pytest.mark.parametrize("chi", [1, 2, 5])
    def test_small_counts_reach_target(self, chi):
        # the g2 form alone floors at exp(-chi * g2(1)), about 0.82 for one click
        assert math.exp(-chi * g2(1.0)) > 0.3
        iv = chernoff_inverse(chi, calibrate_n_alpha("inverse", chi, 4.25e-11))
        assert iv.failure_probability <= 4.25e-11
        assert iv.upper < 100

    @pytest.mark.parametrize("N,p", [(10**6, 0.3), (10**4, 0.05), (10**8, 1e-4)])
    def test_coverage(self, N, p):
        rng = np.random.default_rng(7)
        eps = 1e-3
        draws = rng.binomial(N, p, size=10_000)
        mean = N * p
        n_dir = calibrate_n_alpha("direct", mean, eps)
        d = chernoff_direct(mean, n_dir)
        inv_miss = 0
        for chi in draws:
            iv = chernoff_inverse(chi, calibrate_n_alpha("inverse", chi, eps)) if chi < 50 else chernoff_inverse(chi, 3.9)
            inv_miss += not (iv.lower <= mean <= iv.upper)
        dir_miss = int(np.sum((draws < d.lower) | (draws > d.upper)))
        assert inv_miss <= eps * len(draws)
        assert dir_miss <= eps * len(draws)


class TestTallyTable:
    def make(self):
        sent = np.array([[10, 20], [30, 40], [50, 60]])
        clicked = np.array([[1, 2], [3, 4], [5, 6]])
        errors = np.array([[0, 1], [1, 2], [2, 3]])
        return TallyTable(4, sent, clicked, errors)

    def test_csv_round_trip(self):
        t = self.make()
        text = t.to_csv()
        lines = text.strip().split("\n")
        assert lines[0] == "setting,j_s,sent,clicked,bit_errors"
        assert [ln.split(",")[0] for ln in lines[1:]] == ["s", "s", "vac", "vac", "w", "w"]
        back = TallyTable.from_csv(text)
        for name in ("sent", "clicked", "bit_errors"):
            assert np.array_equal(getattr(back, name), getattr(t, name))
        assert back.phase_slices == 4

    def test_aggregates(self):
        t = self.make()
        assert t.N("s") == 110 and t.M("w") == 7

    def test_validation(self):
        with pytest.raises(ValueError):
            TallyTable(4, np.ones((3, 2)), 2 * np.ones((3, 2)), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            TallyTable(4, np.ones((3, 3)), np.ones((3, 3)), np.zeros((3, 3)))

    def test_merge(self):
        t = self.make()
        assert (t + t).N("vac") == 2 * t.N("vac")

    def test_bad_csv(self):
        with pytest.raises(ValueError):
            TallyTable.from_csv("a,b\n1,2\n")


class TestAsymptotic:
    def test_small_mu_single_photon_dominates(self):
        ch = ChannelParams(distance_km=10, dark_count_rate=0.0)
        assert asymptotic_q_parity(ch, 1e-6)[1] < 1e-6

    def test_series_oracle(self):
        ch = ChannelParams(distance_km=0, detector_efficiency=1.0, dark_count_rate=0.0)
        mu = mp.mpf("0.5")
        q = 1 - mp.e ** (-mu)
        odd = sum(mp.e ** (-mu) * mu**k / mp.factorial(k) for k in range(1, 80, 2)) / q
        q_odd, q_even = asymptotic_q_parity(ch, 0.5)
        assert q_odd == pytest.approx(float(odd), rel=1e-12)
        assert q_even == pytest.approx(float(1 - odd), rel=1e-10)

    @given(st.floats(0, 500), st.floats(1e-3, 2))
    def test_normalized(self, d, mu):
        ch = ChannelParams(distance_km=d)
        k = np.arange(61)
        q = poisson_pmf(mu, k) * yield_k(ch, k) / gain_mu(ch, mu)
        assert abs(q.sum() - 1) < 1e-9

    def test_degenerate(self):
        ch = ChannelParams(dark_count_rate=0.0)
        with pytest.raises(ConfigError):
            asymptotic_q_parity(ch, 0.0)

    def test_estimate(self):
        ch, p = ChannelParams(distance_km=100), ProtocolParams()
        est = asymptotic_estimate(ch, p)
        assert est.eph_upper == pytest.approx(1 - est.q1_lower)
        assert est.Y1_lower == yield_k(ch, 1)


def exact_bounds(ch, mu, nu):
    return ((gain_mu(ch, x),) * 2 for x in (mu, nu, 0.0))


class TestTwoIntensity:
    @pytest.mark.parametrize("eta", [0.01, 0.1, 0.5])
    @pytest.mark.parametrize("mu", [0.1, 0.5])
    def test_lower_bounds_true_yield(self, eta, mu):
        ch = ChannelParams(detector_efficiency=eta, dark_count_rate=0.0)
        gaps = []
        for nu in (mu / 2, mu / 10, mu / 100):
            s, w, v = exact_bounds(ch, mu, nu)
            y1 = estimate_Y1_two_intensity(s, w, v, mu, nu)
            assert y1 <= eta + 1e-12
            gaps.append(eta - y1)
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] < 0.01 * eta

    def test_closed_form(self):
        mu, nu, eta = mp.mpf("0.5"), mp.mpf("0.1"), mp.mpf("0.1")
        qs, qw = 1 - mp.e ** (-eta * mu), 1 - mp.e ** (-eta * nu)
        oracle = mu / (mu * nu - nu**2) * (qw * mp.e**nu - qs * mp.e**mu * nu**2 / mu**2)
        ch = ChannelParams(detector_efficiency=0.1, dark_count_rate=0.0)
        s, w, v = exact_bounds(ch, 0.5, 0.1)
        assert estimate_Y1_two_intensity(s, w, v, 0.5, 0.1) == pytest.approx(float(oracle), rel=1e-12)

    def test_zero_bounds(self):
        z = (0.0, 0.0)
        assert estimate_Y1_two_intensity(z, z, z, 0.5, 0.1) == 0.0

    def test_order(self):
        z = (0.0, 0.0)
        with pytest.raises(ConfigError):
            estimate_Y1_two_intensity(z, z, z, 0.1, 0.1)


class TestFiniteSize:
    def test_close_to_asymptotic(self):
        ch = ChannelParams(distance_km=100, misalignment=0.03)
        p = ProtocolParams(rounds=10**12)
        est = finite_size_estimate(expected_tallies(ch, p), p)
        assert abs(est.eph_upper - asymptotic_q_parity(ch, p.mu)[1]) < 0.03
        assert est.failure_probability <= p.epsilon * (1 + 1e-9)
        assert est.method == "finite_chernoff"

    @pytest.mark.filterwarnings("ignore:phase-error failure probability")
    def test_no_single_photon_evidence(self):
        # at 1500 km almost every click is a dark count; the bounds lose all information
        ch = ChannelParams(distance_km=1500)
        p = ProtocolParams(rounds=10**9, n_alpha=5.0)
        est = finite_size_estimate(expected_tallies(ch, p), p)
        assert est.q1_lower == 0.0
        assert est.eph_upper == 1.0

    @pytest.mark.filterwarnings("ignore:phase-error failure probability")
    def test_exact_data_floor(self):
        # with exact tallies at vanishing eta the bound only reaches 1 - mu e^{-mu}
        ch = ChannelParams(distance_km=1500)
        p = ProtocolParams(rounds=10**18, n_alpha=1e-3)
        est = finite_size_estimate(expected_tallies(ch, p), p)
        assert est.eph_upper < 1

    def test_requires_all_settings(self):
        t = expected_tallies(ChannelParams(distance_km=50), ProtocolParams())
        sent, clicked = t.sent.copy(), t.clicked.copy()
        for a in ("vac", "w"):
            sent[SETTINGS.index(a)] = 0
            clicked[SETTINGS.index(a)] = 0
        bad = TallyTable(16, sent, clicked, np.zeros_like(sent))
        with pytest.raises(ConfigError):
            finite_size_estimate(bad, ProtocolParams())

    def test_no_signal_clicks(self):
        t = expected_tallies(ChannelParams(distance_km=50), ProtocolParams())
        clicked = t.clicked.copy()
        clicked[SETTINGS.index("s"), 0] = 0
        t = TallyTable(16, t.sent, clicked, np.zeros_like(clicked))
        with pytest.raises(DegenerateDataError):
            finite_size_estimate(t, ProtocolParams(), [0])

    def test_group_domain(self):
        p = ProtocolParams()
        t = expected_tallies(ChannelParams(distance_km=50), p)
        with pytest.raises(ConfigError):
            finite_size_estimate(t, p, [8])
        with pytest.raises(ConfigError):
            finite_size_estimate(t, p, [])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10**6))
    def test_ignores_bit_errors(self, seed):
        p = ProtocolParams(rounds=10**12)
        t = expected_tallies(ChannelParams(distance_km=80, misalignment=0.02), p)
        rng = np.random.default_rng(seed)
        scrambled = TallyTable(16, t.sent, t.clicked, rng.integers(0, t.clicked + 1))
        a = finite_size_estimate(t, p)
        b = finite_size_estimate(scrambled, p)
        assert (a.Y1_lower, a.q1_lower, a.eph_upper, a.failure_probability) == (
            b.Y1_lower,
            b.q1_lower,
            b.eph_upper,
            b.failure_probability,
        )

    @settings(max_examples=15, deadline=None)
    @given(st.floats(1.0, 1e3), st.floats(1.0, 1e3))
    def test_more_data_never_hurts(self, f1, f2):
        p = ProtocolParams(rounds=10**9)
        base = expected_tallies(ChannelParams(distance_km=60), p)
        lo, hi = sorted((f1, f2))
        q_lo = finite_size_estimate(base.scaled(lo), replace(p, rounds=int(p.rounds * lo))).q1_lower
        q_hi = finite_size_estimate(base.scaled(hi), replace(p, rounds=int(p.rounds * hi))).q1_lower
        assert q_hi >= q_lo - 1e-12

    def test_converges_to_asymptotic(self):
        ch = ChannelParams(distance_km=50, misalignment=0.03)
        p = ProtocolParams(mu=0.1, nu=0.01, intensity_probabilities=(0.2, 0.3, 0.5), rounds=10**14)
        gap = finite_size_estimate(expected_tallies(ch, p), p).eph_upper - asymptotic_estimate(ch, p).eph_upper
        assert 0 <= gap < 1e-3

    def test_budget_warning_with_explicit_preset(self):
        p = ProtocolParams(rounds=10**10, n_alpha=3.0)
        t = expected_tallies(ChannelParams(distance_km=50), p)
        with pytest.warns(UserWarning, match="exceeds the budget"):
            finite_size_estimate(t, p)


class TestExpectedTallies:
    def test_counts(self):
        ch, p = ChannelParams(distance_km=100, misalignment=0.05), ProtocolParams(rounds=10**12)
        t = expected_tallies(ch, p)
        assert t.N("s") == pytest.approx(10**12 * 0.49, rel=1e-12)
        assert abs(t.M("w") - 10**12 * 0.04 * gain_mu(ch, p.nu)) <= 8 * 0.5
        vac = t.row("vac")
        assert np.allclose(t.bit_errors[vac], np.rint(t.clicked[vac] * 0.5), atol=1)
