"""Clock-offset recovery, temporal filtering, QBER estimation, sifting."""

import numpy as np
import pytest
from scipy import stats as scipy_stats

from uplinkqkd.channel import TICKS_PER_SECOND
from uplinkqkd.errors import ConfigurationError, DomainError, SynchronizationError
from uplinkqkd.timesync import (
    PulseGrid,
    coincidence_search,
    estimate_qber,
    sift,
    temporal_filter,
)

PERIOD = TICKS_PER_SECOND / 76e6  # non-integer tick period


class TestPulseGrid:
    def test_times_are_rounded_multiples(self):
        grid = PulseGrid(period_ticks=PERIOD, count=1000)
        idx = np.array([0, 1, 2, 999])
        expected = np.rint(idx * PERIOD).astype(np.int64)
        assert np.array_equal(grid.times(idx), expected)

    def test_start_tick_shifts_everything(self):
        grid = PulseGrid(period_ticks=PERIOD, count=10, start_tick=12345)
        assert grid.times(np.array([0]))[0] == 12345

    def test_nearest_index_inverts_times(self):
        grid = PulseGrid(period_ticks=PERIOD, count=50_000)
        idx = np.array([0, 7, 49_999])
        assert np.array_equal(grid.nearest_index(grid.times(idx)), idx)

    def test_nearest_index_clipped_to_range(self):
        grid = PulseGrid(period_ticks=PERIOD, count=100)
        assert grid.nearest_index(np.array([10**12]))[0] == 99
        assert grid.nearest_index(np.array([-10**6]))[0] == 0

    def test_validation(self):
        with pytest.raises(ConfigurationError):
            PulseGrid(period_ticks=0.0, count=10)
        with pytest.raises(ConfigurationError):
            PulseGrid(period_ticks=PERIOD, count=0)


def _make_tags(offset, n_signal=3000, n_background=1500, jitter=0, seed=0,
               count=1_000_000):
    rng = np.random.default_rng(seed)
    grid = PulseGrid(period_ticks=PERIOD, count=count)
    idx = np.sort(rng.choice(count, n_signal, replace=False))
    tags = grid.times(idx) + offset
    if jitter:
        tags = tags + np.rint(rng.normal(0.0, jitter, n_signal)).astype(np.int64)
    if n_background:
        span = int(count * PERIOD)
        bg = rng.integers(0, span, n_background)
        tags = np.concatenate([tags, bg])
    return grid, np.sort(tags)


class TestCoincidenceSearch:
    @pytest.mark.parametrize("offset", [0, 17, -250, 300, 511])
    def test_recovers_constant_offset(self, offset):
        grid, tags = _make_tags(offset)
        result = coincidence_search(grid, tags)
        assert abs(result.offset_ticks - offset) <= 1

    def test_recovers_offset_beyond_one_period(self):
        # the absolute offset, not just offset mod period, must come back
        big = int(4 * PERIOD)  # ≈ four pulse periods
        grid, tags = _make_tags(big)
        result = coincidence_search(grid, tags)
        assert abs(result.offset_ticks - big) <= 1

    def test_jittered_tags_still_recovered(self):
        # sub-tick detector jitter (50 ps at 6.4 GHz is sigma ~ 0.32 ticks)
        grid, tags = _make_tags(-40, jitter=0.5, seed=3)
        result = coincidence_search(grid, tags)
        assert abs(result.offset_ticks - (-40)) <= 2

    def test_matching_is_one_tag_per_pulse(self):
        grid, tags = _make_tags(25, seed=5)
        result = coincidence_search(grid, tags)
        assert np.unique(result.pulse_indices).size == result.pulse_indices.size
        assert result.pulse_indices.size == result.tag_indices.size

    def test_signal_residuals_are_small(self):
        grid, tags = _make_tags(64, n_background=0, seed=7)
        result = coincidence_search(grid, tags)
        assert np.abs(result.residuals).max() <= 1

    def test_flat_background_fails(self):
        rng = np.random.default_rng(11)
        grid = PulseGrid(period_ticks=PERIOD, count=1_000_000)
        tags = np.sort(rng.integers(0, int(1_000_000 * PERIOD), 5000))
        with pytest.raises(SynchronizationError):
            coincidence_search(grid, tags)

    def test_empty_stream_fails(self):
        grid = PulseGrid(period_ticks=PERIOD, count=100)
        with pytest.raises(SynchronizationError):
            coincidence_search(grid, np.array([], dtype=np.int64))

    def test_explicit_pulse_array_matches_grid(self):
        grid, tags = _make_tags(33, n_signal=1500, n_background=500,
                                seed=13, count=100_000)
        arr = grid.times(np.arange(100_000))
        r_grid = coincidence_search(grid, tags)
        r_arr = coincidence_search(arr, tags)
        assert r_arr.offset_ticks == r_grid.offset_ticks


class TestTemporalFilter:
    def test_keep_mask_by_window(self):
        residuals = np.array([0, 2, -2, 5, -7])
        keep, _ = temporal_filter(residuals, window_ns=1.0, period_ticks=PERIOD,
                                  n_pulses=1000)
        # 1 ns window = 6.4 ticks, half-width 3.2
        assert keep.tolist() == [True, True, True, False, False]

    def test_background_yield_formula(self):
        residuals = np.concatenate([np.zeros(90), np.full(10, 30.0)])
        window_ticks = 1.0 * 6.4
        n_pulses = 10_000
        _, y0 = temporal_filter(residuals, 1.0, PERIOD, n_pulses)
        expected = 10 * window_ticks / (n_pulses * (PERIOD - window_ticks))
        assert y0 == pytest.approx(expected, rel=1e-12)

    def test_no_background_gives_zero(self):
        _, y0 = temporal_filter(np.zeros(50), 1.0, PERIOD, 1000)
        assert y0 == 0.0

    def test_degenerate_window_rejected(self):
        with pytest.raises(DomainError):
            temporal_filter(np.zeros(5), window_ns=20.0, period_ticks=PERIOD,
                            n_pulses=100)


class TestEstimateQber:
    def _pairs(self, n, error_rate, seed):
        rng = np.random.default_rng(seed)
        pulse_idx = np.arange(n, dtype=np.int64)
        a_bases = rng.integers(0, 2, n).astype(np.uint8)
        b_bases = rng.integers(0, 2, n).astype(np.uint8)
        a_bits = rng.integers(0, 2, n).astype(np.uint8)
        flips = (rng.random(n) < error_rate).astype(np.uint8)
        return pulse_idx, a_bases, a_bits, b_bases, a_bits ^ flips

    def test_estimate_near_truth(self):
        args = self._pairs(200_000, 0.05, seed=1)
        rec = estimate_qber(*args, reveal_fraction=0.1, seed=2)
        assert rec.qber_estimate == pytest.approx(0.05, abs=0.01)
        assert rec.ci_low <= rec.qber_estimate <= rec.ci_high
        assert not rec.low_confidence

    def test_kept_and_revealed_partition_matched(self):
        pulse_idx, a_bases, a_bits, b_bases, b_bits = self._pairs(5000, 0.03, 3)
        rec = estimate_qber(pulse_idx, a_bases, a_bits, b_bases, b_bits,
                            reveal_fraction=0.2, seed=4)
        matched = pulse_idx[a_bases == b_bases]
        union = np.sort(np.concatenate([rec.kept_indices, rec.revealed_indices]))
        assert np.array_equal(union, matched)
        assert np.intersect1d(rec.kept_indices, rec.revealed_indices).size == 0

    def test_low_confidence_flag(self):
        args = self._pairs(100, 0.0, seed=5)
        rec = estimate_qber(*args, reveal_fraction=0.05, seed=6)
        assert rec.low_confidence

    def test_interval_matches_closed_form_at_zero_errors(self):
        # for zero observed errors the exact upper bound is 1 - (a/2)^(1/n)
        pulse_idx = np.arange(2000, dtype=np.int64)
        bases = np.zeros(2000, dtype=np.uint8)
        bits = np.zeros(2000, dtype=np.uint8)
        rec = estimate_qber(pulse_idx, bases, bits, bases, bits,
                            reveal_fraction=0.5, seed=7)
        n = rec.revealed_indices.size
        assert rec.ci_low == 0.0
        assert rec.ci_high == pytest.approx(1.0 - 0.025 ** (1.0 / n), rel=1e-9)

    def test_interval_matches_beta_quantiles(self):
        args = self._pairs(50_000, 0.08, seed=8)
        rec = estimate_qber(*args, reveal_fraction=0.1, seed=9)
        n = rec.revealed_indices.size
        k = int(round(rec.qber_estimate * n))
        assert rec.ci_low == pytest.approx(
            scipy_stats.beta.ppf(0.025, k, n - k + 1), rel=1e-9)
        assert rec.ci_high == pytest.approx(
            scipy_stats.beta.ppf(0.975, k + 1, n - k), rel=1e-9)

    def test_reveal_fraction_validation(self):
        args = self._pairs(100, 0.0, seed=10)
        with pytest.raises(DomainError):
            estimate_qber(*args, reveal_fraction=0.0)
        with pytest.raises(DomainError):
            estimate_qber(*args, reveal_fraction=1.0)


class TestSift:
    def test_identical_bits_give_equal_keys(self):
        rng = np.random.default_rng(20)
        n = 10_000
        pulse_idx = np.arange(n, dtype=np.int64)
        a_bases = rng.integers(0, 2, n).astype(np.uint8)
        b_bases = rng.integers(0, 2, n).astype(np.uint8)
        bits = rng.integers(0, 2, n).astype(np.uint8)
        record, a_key, b_key = sift(pulse_idx, a_bases, bits, b_bases, bits)
        assert np.array_equal(a_key, b_key)
        assert a_key.size == int((a_bases == b_bases).sum())
        assert np.array_equal(record.kept_indices,
                              pulse_idx[a_bases == b_bases])

    def test_revealed_indices_excluded(self):
        pulse_idx = np.arange(10, dtype=np.int64)
        bases = np.zeros(10, dtype=np.uint8)
        bits = np.arange(10, dtype=np.uint8) % 2
        revealed = np.array([2, 5, 7], dtype=np.int64)
        record, a_key, _ = sift(pulse_idx, bases, bits, bases, bits,
                                revealed_indices=revealed)
        assert a_key.size == 7
        assert np.intersect1d(record.kept_indices, revealed).size == 0
        assert np.array_equal(record.revealed_indices, revealed)

    def test_mismatched_bases_dropped(self):
        pulse_idx = np.arange(4, dtype=np.int64)
        a_bases = np.array([0, 0, 1, 1], dtype=np.uint8)
        b_bases = np.array([0, 1, 1, 0], dtype=np.uint8)
        bits = np.array([1, 0, 1, 0], dtype=np.uint8)
        _, a_key, b_key = sift(pulse_idx, a_bases, bits, b_bases, bits)
        assert a_key.tolist() == [1, 1]
        assert b_key.tolist() == [1, 1]
