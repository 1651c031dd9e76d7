"""Secure-rate bound computations against independent oracles."""

import dataclasses
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uplinkqkd.errors import ConfigurationError, DomainError
from uplinkqkd.fixtures import FIXTURE_NAMES, load_fixture
from uplinkqkd.keyrate import (
    ChannelStatistics,
    SecurityParams,
    SourceConfig,
    asymptotic_rate,
    binary_entropy,
    finite_size_rate,
    project_statistics,
    single_photon_gain_lb,
    single_photon_qber_ub,
    worst_case_statistics,
)


def entropy_oracle(p: float) -> float:
    """High-precision binary entropy via mpmath."""
    if p in (0.0, 1.0):
        return 0.0
    with mpmath.workdps(50):
        x = mpmath.mpf(p)
        h = -x * mpmath.log(x, 2) - (1 - x) * mpmath.log(1 - x, 2)
        return float(h)


class TestBinaryEntropy:
    def test_edge_values(self):
        assert binary_entropy(0.0) == 0.0
        assert binary_entropy(1.0) == 0.0
        assert binary_entropy(0.5) == 1.0

    @pytest.mark.parametrize("p", [1e-12, 1e-6, 0.01, 0.11, 0.25, 0.4999, 0.73])
    def test_against_high_precision_oracle(self, p):
        assert binary_entropy(p) == pytest.approx(entropy_oracle(p), abs=1e-12)

    def test_rejects_out_of_domain(self):
        with pytest.raises(DomainError):
            binary_entropy(-0.1)
        with pytest.raises(DomainError):
            binary_entropy(1.1)

    @given(st.floats(min_value=1e-9, max_value=0.5 - 1e-9))
    @settings(max_examples=200, deadline=None)
    def test_symmetry_and_bounds(self, p):
        h = binary_entropy(p)
        assert 0.0 < h <= 1.0
        assert h == pytest.approx(binary_entropy(1.0 - p), rel=1e-12)


def _gain_oracle(cfg, stats):
    """Independent transcription of the decoy lower bound formula."""
    mu, nu = mpmath.mpf(cfg.mu), mpmath.mpf(cfg.nu)
    with mpmath.workdps(50):
        q_mu = mpmath.mpf(stats.q_mu) * mpmath.e**mu
        q_nu = mpmath.mpf(stats.q_nu) * mpmath.e**nu
        y0 = mpmath.mpf(stats.y0)
        y1 = (mu / (mu * nu - nu**2)) * (
            q_nu - q_mu * (nu**2 / mu**2) - y0 * (mu**2 - nu**2) / mu**2)
        q1 = y1 * mu * mpmath.e**-mu
        return float(max(q1, 0))


class TestSinglePhotonBounds:
    @pytest.mark.parametrize("name", FIXTURE_NAMES)
    def test_gain_matches_independent_formula(self, name):
        cfg, stats, _sec = load_fixture(name)
        assert single_photon_gain_lb(cfg, stats) == pytest.approx(
            _gain_oracle(cfg, stats), rel=1e-9)

    def test_negative_raw_value_clamps_to_zero(self):
        cfg = SourceConfig(mu=0.5, nu=0.05)
        stats = ChannelStatistics(q_mu=1e-6, q_nu=1e-9, e_mu=0.03,
                                  e_nu=0.2, y0=5e-7)
        assert single_photon_gain_lb(cfg, stats) == 0.0

    def test_qber_bound_decreases_with_gain(self):
        cfg, stats, _sec = load_fixture("loss_34.9dB")
        q1 = single_photon_gain_lb(cfg, stats)
        e_at_q1 = single_photon_qber_ub(cfg, stats, q1)
        e_smaller = single_photon_qber_ub(cfg, stats, q1 * 0.5)
        assert e_smaller >= e_at_q1

    @given(st.floats(min_value=0.1, max_value=0.7),
           st.floats(min_value=0.01, max_value=0.09))
    @settings(max_examples=100, deadline=None)
    def test_bounds_stay_in_unit_interval(self, mu, nu):
        cfg = SourceConfig(mu=mu, nu=nu)
        stats = ChannelStatistics(q_mu=1e-5, q_nu=1.5e-6, e_mu=0.03,
                                  e_nu=0.1, y0=1e-7)
        q1 = single_photon_gain_lb(cfg, stats)
        assert 0.0 <= q1 <= 1.0
        if q1 > 0:
            assert 0.0 <= single_photon_qber_ub(cfg, stats, q1) <= 1.0


class TestAsymptoticRate:
    def test_zero_when_noise_dominates(self):
        cfg = SourceConfig(mu=0.5, nu=0.05)
        stats = ChannelStatistics(q_mu=1e-6, q_nu=1e-7, e_mu=0.25,
                                  e_nu=0.3, y0=1e-7)
        assert asymptotic_rate(cfg, stats, SecurityParams()) == 0.0

    def test_scales_with_sifting_ratio(self):
        cfg, stats, sec = load_fixture("loss_34.9dB")
        r1 = asymptotic_rate(cfg, stats, sec)
        r2 = asymptotic_rate(dataclasses.replace(cfg, q=cfg.q / 2), stats, sec)
        assert r2 == pytest.approx(r1 / 2, rel=1e-12)


class TestWorstCase:
    def test_never_better_than_measured(self):
        cfg, stats, sec = load_fixture("loss_40.1dB")
        wc = worst_case_statistics(stats, sec, cfg)
        q1_meas = single_photon_gain_lb(cfg, stats)
        q1_wc = single_photon_gain_lb(cfg, wc)
        assert q1_wc <= q1_meas + 1e-15

    def test_shifts_bounded_by_ten_sigma(self):
        cfg, stats, sec = load_fixture("loss_40.1dB")
        wc = worst_case_statistics(stats, sec, cfg)
        for field, sigma_field in [("q_nu", "sigma_q_nu"), ("e_mu", "sigma_e_mu"),
                                   ("e_nu", "sigma_e_nu"), ("y0", "sigma_y0")]:
            shift = abs(getattr(wc, field) - getattr(stats, field))
            assert shift <= sec.ten_sigma * getattr(stats, sigma_field) + 1e-15


class TestFiniteSizeRate:
    def test_requires_counts(self):
        cfg, stats, sec = load_fixture("loss_34.9dB")
        with pytest.raises(ConfigurationError):
            finite_size_rate(cfg, dataclasses.replace(stats, n_mu=0), sec)

    def test_never_exceeds_asymptotic(self):
        for name in FIXTURE_NAMES:
            cfg, stats, sec = load_fixture(name)
            result = finite_size_rate(cfg, stats, sec)
            assert result.r_finite <= result.r_inf + 1e-18

    def test_rate_grows_with_sample_size(self):
        cfg, stats, sec = load_fixture("loss_40.1dB")
        small = finite_size_rate(cfg, stats, sec).r_finite
        grown, gcfg = project_statistics(stats, cfg, cfg.pulse_rate * 10,
                                         (cfg.k_mu, cfg.k_nu, cfg.k_vac))
        large = finite_size_rate(gcfg, grown, sec).r_finite
        assert large >= small

    def test_epsilon_ordering_enforced(self):
        with pytest.raises(ConfigurationError):
            SecurityParams(epsilon=1e-10, epsilon_ec=1e-9)


class TestProjection:
    def test_rates_preserved_counts_scaled(self):
        cfg, stats, _sec = load_fixture("pass_upper_quartile")
        new_stats, new_cfg = project_statistics(
            stats, cfg, 300e6, (cfg.k_mu, cfg.k_nu, cfg.k_vac))
        assert new_stats.q_mu == stats.q_mu
        assert new_stats.e_mu == stats.e_mu
        ratio = 300e6 / cfg.pulse_rate
        assert new_stats.pulses_sent == pytest.approx(
            stats.duration_s * 300e6, rel=1e-9)
        assert new_stats.n_mu == pytest.approx(stats.n_mu * ratio, rel=0.05)

    def test_fraction_validation(self):
        cfg, stats, _sec = load_fixture("pass_upper_quartile")
        with pytest.raises(ConfigurationError):
            project_statistics(stats, cfg, 300e6, (0.5, 0.2, 0.2))
