import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmqkd.decoy import asymptotic_q_parity, expected_tallies
from pmqkd.errors import ConfigError
from pmqkd.model import ChannelParams, ProtocolParams
from pmqkd.montecarlo import (
    PhaseDrift,
    RoundRecord,
    SimConfig,
    class_outcome_probs,
    detector_click_probs,
    sift_round,
    simulate,
    simulate_run,
    simulate_with_truth,
)

TABLE = dict(dark_count_rate=1e-8, detector_efficiency=0.2)


def zscores(obs, exp):
    exp = np.asarray(exp, dtype=float)
    return (np.asarray(obs) - exp) / np.sqrt(np.maximum(exp, 1.0))


def cfg(L=50.0, e0=0.03, rounds=10**6, **kw):
    ch = ChannelParams(distance_km=L, misalignment=e0, **TABLE) if "channel" not in kw else kw.pop("channel")
    return SimConfig(channel=ch, protocol=ProtocolParams(rounds=rounds), **kw)


class TestPrimitives:
    def test_click_probs_sum(self):
        out = detector_click_probs(0.3 + 0.1j, -0.2j, 1e-3)
        assert sum(out) == pytest.approx(1.0, abs=1e-15)

    def test_identical_amplitudes_leave_r_dark(self):
        a = math.sqrt(0.05)
        l_only, r_only, double, none = detector_click_probs(a, a, 0.0)
        assert r_only == 0.0 and double == 0.0
        assert l_only == pytest.approx(-math.expm1(-2 * 0.05), rel=1e-12)

    def test_opposite_amplitudes_leave_l_dark(self):
        l_only, r_only, _, _ = detector_click_probs(0.2, -0.2, 0.0)
        assert l_only == 0.0 and r_only > 0

    def test_sift_examples(self):
        D = 16
        same = sift_round(RoundRecord(0, 0, 1, 1, "s", "s", "L"), D)
        half = sift_round(RoundRecord(0, 0, 1, 9, "s", "s", "L"), D)
        assert same == (0, False)
        assert half == (0, True)
        assert sift_round(RoundRecord(0, 0, 1, 9, "s", "s", "R"), D) == (0, False)
        assert sift_round(RoundRecord(0, 1, 3, 0, "w", "w", "L"), D) == (3, False)
        assert sift_round(RoundRecord(0, 1, 0, 3, "w", "w", "L"), D) == (5, False)

    @pytest.mark.parametrize("click", ["none", "double"])
    def test_sift_drops_non_single(self, click):
        assert sift_round(RoundRecord(0, 0, 0, 0, "s", "s", click), 16) is None

    def test_sift_compensation(self):
        r = RoundRecord(0, 0, 5, 0, "s", "s", "L", j_delta=5)
        assert sift_round(r, 16) == (0, False)

    def test_record_validation(self):
        with pytest.raises(ValueError):
            RoundRecord(0, 0, 0, 0, "s", "s", "both")
        with pytest.raises(ValueError):
            RoundRecord(0, 0, 0, 0, "x", "s", "L")

    @settings(max_examples=50)
    @given(st.floats(1e-3, 2), st.floats(0, 1), st.floats(1e-6, 1), st.floats(0, 1e-3))
    def test_class_probs_normalized(self, mu, w, eta, pd):
        p = class_outcome_probs(mu, w, eta, pd)
        assert p.shape == (2, 4)
        assert (p >= 0).all()
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert p[0].sum() == pytest.approx(math.exp(-mu) * math.cosh(mu), rel=1e-9)

    @settings(max_examples=30)
    @given(st.floats(1e-3, 1), st.floats(0, 2 * math.pi), st.floats(1e-4, 1), st.floats(0, 1e-3))
    def test_class_probs_match_click_probs(self, mu, theta, eta, pd):
        w = 0.5 * (1 + math.cos(theta))
        p = class_outcome_probs(mu, w, eta, pd).sum(axis=0)
        a = math.sqrt(eta * mu / 2)
        ref = detector_click_probs(a, a * complex(math.cos(theta), math.sin(theta)), pd)
        assert p[1] == pytest.approx(ref[0], rel=1e-9, abs=1e-15)
        assert p[2] == pytest.approx(ref[1], rel=1e-9, abs=1e-15)
        assert p[3] == pytest.approx(ref[2], rel=1e-9, abs=1e-15)


class TestConfig:
    def test_aggregate_rejects_walk(self):
        with pytest.raises(ConfigError) as e:
            cfg(engine="aggregate", drift=PhaseDrift.random_walk())
        assert e.value.field == "engine"

    @pytest.mark.parametrize("kw,field", [({"engine": "gpu"}, "engine"), ({"seed": -1}, "seed"), ({"batch_size": 0}, "batch_size")])
    def test_bad_fields(self, kw, field):
        with pytest.raises(ConfigError) as e:
            cfg(**kw)
        assert e.value.field == field

    def test_bad_drift(self):
        with pytest.raises(ConfigError):
            PhaseDrift("sine", 1.0)
        with pytest.raises(ConfigError):
            PhaseDrift.random_walk(-1.0)

    def test_compensation_rounds_offset(self):
        assert cfg(drift=PhaseDrift.fixed_offset(2 * math.pi * 3 / 16)).compensation == 3
        assert cfg(drift=PhaseDrift.fixed_offset(-2 * math.pi / 16)).compensation == 15
        assert cfg(drift=PhaseDrift.fixed_offset(1.0), j_delta=0).compensation == 0

    def test_to_dict(self):
        d = cfg(seed=4).to_dict()
        assert d["seed"] == 4 and d["j_delta"] == 0 and d["channel"]["misalignment"] == 0.03


class TestDeterminism:
    @pytest.mark.parametrize("engine", ["rounds", "aggregate"])
    def test_same_seed_same_tallies(self, engine):
        a = simulate(cfg(seed=11, engine=engine, rounds=300_000))
        b = simulate(cfg(seed=11, engine=engine, rounds=300_000))
        c = simulate(cfg(seed=12, engine=engine, rounds=300_000))
        for name in ("sent", "clicked", "bit_errors"):
            assert np.array_equal(getattr(a, name), getattr(b, name))
        assert not np.array_equal(a.clicked, c.clicked)

    def test_batch_size_changes_stream_not_validity(self):
        a = simulate(cfg(seed=1, batch_size=1000, rounds=100_000))
        assert a.sent.sum() <= 100_000
        assert (a.clicked <= a.sent).all() and (a.bit_errors <= a.clicked).all()

    def test_tally_shapes(self):
        t = simulate(cfg(rounds=50_000))
        assert t.sent.shape == (3, 8)
        assert t.sent.dtype == np.int64


class TestPhysics:
    def test_group_zero_error_free_without_noise(self):
        ch = ChannelParams(distance_km=0, misalignment=0.0, dark_count_rate=0.0, detector_efficiency=1.0)
        for engine in ("rounds", "aggregate"):
            t = simulate(cfg(channel=ch, engine=engine, rounds=200_000))
            assert t.clicked[:, 0].sum() > 1000
            assert t.bit_errors[:, 0].sum() == 0

    @pytest.mark.parametrize("engine", ["rounds", "aggregate"])
    def test_agrees_with_model(self, engine):
        c = cfg(L=50.0, e0=0.05, rounds=3 * 10**6, engine=engine, seed=5)
        t = simulate(c)
        exp = expected_tallies(c.channel, c.protocol)
        assert np.abs(zscores(t.sent, exp.sent)).max() < 5
        assert np.abs(zscores(t.clicked, exp.clicked)).max() < 5
        assert np.abs(zscores(t.bit_errors, exp.bit_errors)).max() < 5

    def test_error_rate_cap(self):
        t = simulate(cfg(L=0.0, e0=0.5, rounds=2 * 10**6, engine="aggregate"))
        rates = t.group_error_rates("s")
        sigma = 0.5 / np.sqrt(t.clicked[2])
        assert np.all(np.abs(rates - 0.5) < 5 * sigma)

    def test_compensated_drift_chi2(self):
        phi = 2 * math.pi * 5 / 16
        c0 = cfg(rounds=2 * 10**6, seed=3, e0=0.03)
        c1 = cfg(rounds=2 * 10**6, seed=4, e0=0.03, drift=PhaseDrift.fixed_offset(phi))
        exp = expected_tallies(c0.channel, c0.protocol)
        for c in (c0, c1):
            t = simulate(c)
            z = zscores(t.bit_errors[2], exp.bit_errors[2])
            # 8 groups, chi-square 99.99% point is about 29
            assert float((z**2).sum()) < 29

    def test_residual_offset_raises_qber(self):
        base = cfg(rounds=2 * 10**6, engine="aggregate", seed=2)
        off = cfg(rounds=2 * 10**6, engine="aggregate", seed=2, drift=PhaseDrift.fixed_offset(0.3), j_delta=0)
        e_base = simulate(base).group_error_rates("s")[0]
        e_off = simulate(off).group_error_rates("s")[0]
        assert e_off > e_base + 0.01

    def test_random_walk_degrades_gracefully(self):
        still = simulate(cfg(rounds=10**6, seed=8, drift=PhaseDrift.random_walk(0.0))).group_error_rates("s")[0]
        moving = simulate(cfg(rounds=10**6, seed=8, drift=PhaseDrift.random_walk(1e-2))).group_error_rates("s")[0]
        assert moving > still + 0.05

    def test_doubles_reported(self):
        run = simulate_run(cfg(L=0.0, rounds=200_000, engine="aggregate"))
        assert run.double_clicks > 0
        assert run.runtime_s > 0


class TestGroundTruth:
    @pytest.mark.parametrize("engine", ["rounds", "aggregate"])
    def test_even_fraction_matches_model(self, engine):
        c = cfg(L=20.0, rounds=4 * 10**6, engine=engine, seed=9)
        t, truth = simulate_with_truth(c)
        _, q_even = asymptotic_q_parity(c.channel, c.protocol.mu)
        n = t.clicked[2].sum()
        sigma = math.sqrt(q_even * (1 - q_even) / n)
        assert abs(truth.even_fraction("s") - q_even) < 5 * sigma

    def test_truth_sums_to_clicks(self):
        t, truth = simulate_with_truth(cfg(rounds=300_000))
        assert np.array_equal(truth.even_clicks + truth.odd_clicks, t.clicked)

    def test_even_fraction_subset(self):
        _, truth = simulate_with_truth(cfg(rounds=300_000))
        assert 0 <= truth.even_fraction("w", groups=[0, 1]) <= 1
