"""Time-tag alignment, temporal filtering, QBER estimation and sifting.

The receiver's tags are aligned to the transmitter's pulse train by a
histogram coincidence search: tag-minus-pulse differences within a
predefined span (default ±100 ns) are binned at tag resolution and the
dominant bin gives the constant clock offset.  Because the pulse period
is a non-integer number of ticks, alias peaks one period away smear over
two bins while the true peak stays sharp, so the search resolves the
absolute offset and not just the offset modulo the period.

Pulse emission times are arithmetic (index times period, rounded), so
they are represented by a lightweight grid object instead of a
materialized array; a run of 10^10 pulses needs no pulse-time storage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as _scipy_stats

from .errors import ConfigurationError, DomainError, SynchronizationError
from .channel import TICKS_PER_SECOND

__all__ = [
    "PulseGrid",
    "CoincidenceResult",
    "SiftRecord",
    "coincidence_search",
    "temporal_filter",
    "estimate_qber",
    "sift",
]

_TICKS_PER_NS = TICKS_PER_SECOND / 1e9  # 6.4


@dataclass(frozen=True)
class PulseGrid:
    """Arithmetic pulse-emission timeline: tick(i) = round(i * period)."""

    period_ticks: float
    count: int
    start_tick: int = 0

    def __post_init__(self):
        if self.period_ticks <= 0 or self.count <= 0:
            raise ConfigurationError("period_ticks and count must be positive")

    def times(self, indices: np.ndarray) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        return self.start_tick + np.rint(idx * self.period_ticks).astype(np.int64)

    def nearest_index(self, ticks: np.ndarray) -> np.ndarray:
        t = np.asarray(ticks, dtype=np.int64) - self.start_tick
        idx = np.rint(t / self.period_ticks).astype(np.int64)
        return np.clip(idx, 0, self.count - 1)


@dataclass
class CoincidenceResult:
    """Outcome of the offset search and tag-to-pulse matching."""

    offset_ticks: int
    pulse_indices: np.ndarray
    tag_indices: np.ndarray
    residuals: np.ndarray
    histogram: np.ndarray
    histogram_offsets: np.ndarray
    signal_to_background: float


@dataclass
class SiftRecord:
    """Kept and revealed pulse indices plus the disclosed-subset QBER.

    ``ci_low``/``ci_high`` bound the estimate with a Clopper-Pearson
    95% interval; ``low_confidence`` marks estimates from fewer than 30
    revealed pairs.
    """

    kept_indices: np.ndarray
    revealed_indices: np.ndarray
    qber_estimate: float
    ci_low: float
    ci_high: float
    low_confidence: bool = False


def _as_grid(pulse_times) -> tuple[PulseGrid | None, np.ndarray | None]:
    if isinstance(pulse_times, PulseGrid):
        return pulse_times, None
    arr = np.asarray(pulse_times, dtype=np.int64)
    return None, arr


def coincidence_search(pulse_times, tags: np.ndarray, span_ns: float = 100.0,
                       bin_ticks: int = 1, min_peak_ratio: float = 3.0,
                       ) -> CoincidenceResult:
    """Recover the constant clock offset and match tags to pulses.

    ``pulse_times`` is either a :class:`PulseGrid` or a sorted array of
    emission ticks.  Differences tag - pulse over all pulses within
    ±``span_ns`` of each tag are histogrammed; the peak bin must exceed
    ``min_peak_ratio`` times the mean occupancy or the search fails.
    The returned matching assigns each tag to its nearest pulse after
    offset correction, one tag per pulse (earliest wins).
    """
    grid, arr = _as_grid(pulse_times)
    tags = np.asarray(tags, dtype=np.int64)
    if tags.size == 0 or (arr is not None and arr.size == 0):
        raise SynchronizationError("empty tag or pulse stream")
    span = max(int(round(span_ns * _TICKS_PER_NS)), 1)
    period = grid.period_ticks if grid is not None else \
        max(float(np.median(np.diff(arr))), 1.0) if arr.size > 1 else float(2 * span)
    n_side = int(span / period) + 2

    n_bins = 2 * span // bin_ticks + 1
    hist = np.zeros(n_bins, dtype=np.int64)
    chunk = 1 << 18
    for lo in range(0, tags.size, chunk):
        t = tags[lo:lo + chunk]
        if grid is not None:
            i0 = np.rint((t - grid.start_tick) / period).astype(np.int64)
            neighbors = i0[:, None] + np.arange(-n_side, n_side + 1)
            np.clip(neighbors, 0, grid.count - 1, out=neighbors)
            p = grid.start_tick + np.rint(neighbors * period).astype(np.int64)
        else:
            i0 = np.searchsorted(arr, t)
            neighbors = i0[:, None] + np.arange(-n_side, n_side + 1)
            np.clip(neighbors, 0, arr.size - 1, out=neighbors)
            p = arr[neighbors]
        d = t[:, None] - p
        d = d[np.abs(d) <= span]
        hist += np.bincount((d + span) // bin_ticks, minlength=n_bins)

    offsets = np.arange(n_bins) * bin_ticks - span
    mean_occ = hist.mean() if hist.size else 0.0
    peak = int(hist.argmax())
    ratio = hist[peak] / mean_occ if mean_occ > 0 else 0.0
    # the Poisson floor guards against spurious peaks in sparse flat input
    floor = mean_occ + 6.0 * math.sqrt(max(mean_occ, 1.0))
    if ratio < min_peak_ratio or hist[peak] < floor:
        raise SynchronizationError(
            f"no confident coincidence peak (peak/mean {ratio:.2f} < {min_peak_ratio})")

    # refine inside the peak's neighborhood with the residual median
    coarse = int(offsets[peak])
    win = max(2, 2 * bin_ticks)
    if grid is not None:
        i_match = grid.nearest_index(tags - coarse)
        p_match = grid.times(i_match)
    else:
        i_right = np.clip(np.searchsorted(arr, tags - coarse), 0, arr.size - 1)
        i_left = np.clip(i_right - 1, 0, arr.size - 1)
        pick_left = np.abs(tags - coarse - arr[i_left]) <= np.abs(tags - coarse - arr[i_right])
        i_match = np.where(pick_left, i_left, i_right)
        p_match = arr[i_match]
    d_all = tags - p_match
    near = np.abs(d_all - coarse) <= win
    offset = int(round(float(np.median(d_all[near])))) if near.any() else coarse

    # final matching at the refined offset
    if grid is not None:
        i_match = grid.nearest_index(tags - offset)
        p_match = grid.times(i_match)
    else:
        i_right = np.clip(np.searchsorted(arr, tags - offset), 0, arr.size - 1)
        i_left = np.clip(i_right - 1, 0, arr.size - 1)
        pick_left = np.abs(tags - offset - arr[i_left]) <= np.abs(tags - offset - arr[i_right])
        i_match = np.where(pick_left, i_left, i_right)
        p_match = arr[i_match]
    residuals = tags - offset - p_match
    _, first = np.unique(i_match, return_index=True)
    tag_idx = np.sort(first)
    return CoincidenceResult(
        offset_ticks=offset,
        pulse_indices=i_match[tag_idx],
        tag_indices=tag_idx.astype(np.int64),
        residuals=residuals[tag_idx],
        histogram=hist,
        histogram_offsets=offsets,
        signal_to_background=float(ratio),
    )


def temporal_filter(residuals: np.ndarray, window_ns: float, period_ticks: float,
                    n_pulses: int) -> tuple[np.ndarray, float]:
    """Keep matches inside the window; estimate the background yield.

    Returns a boolean keep-mask over the matched pairs and the vacuum
    yield estimate: out-of-window counts are converted to a rate over
    the between-pulse observation time and normalized to one window per
    pulse, matching how the background yield enters the gain bounds.
    """
    window_ticks = window_ns * _TICKS_PER_NS
    if window_ticks >= period_ticks:
        raise DomainError("degenerate window: wider than the pulse period, "
                          "no between-pulse region to estimate background from")
    residuals = np.asarray(residuals)
    keep = np.abs(residuals) <= window_ticks / 2.0
    n_out = int((~keep).sum())
    out_time = n_pulses * (period_ticks - window_ticks)
    y0_estimate = n_out * window_ticks / out_time if out_time > 0 else 0.0
    return keep, float(y0_estimate)


def _clopper_pearson(k: int, n: int, alpha: float = 0.05) -> tuple[float, float]:
    lo = 0.0 if k == 0 else float(_scipy_stats.beta.ppf(alpha / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(_scipy_stats.beta.ppf(1 - alpha / 2, k + 1, n - k))
    return lo, hi


def estimate_qber(pulse_indices: np.ndarray, alice_bases: np.ndarray,
                  alice_bits: np.ndarray, bob_bases: np.ndarray,
                  bob_bits: np.ndarray, reveal_fraction: float = 0.05,
                  seed: int = 0) -> SiftRecord:
    """Estimate the QBER from a deterministically sampled revealed subset.

    Arrays are aligned per matched pair.  Only basis-matched pairs are
    eligible; a seeded draw selects ``reveal_fraction`` of them.  The
    revealed pairs are excluded from the kept set returned in the
    record.
    """
    if reveal_fraction <= 0.0:
        raise DomainError("reveal_fraction must be positive to estimate the QBER")
    if reveal_fraction >= 1.0:
        raise DomainError("reveal_fraction must be below 1")
    pulse_indices = np.asarray(pulse_indices, dtype=np.int64)
    matched = np.asarray(alice_bases) == np.asarray(bob_bases)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x0BE4)))
    reveal = matched & (rng.random(pulse_indices.size) < reveal_fraction)
    n = int(reveal.sum())
    k = int((np.asarray(alice_bits)[reveal] != np.asarray(bob_bits)[reveal]).sum())
    estimate = k / n if n else 0.5
    lo, hi = _clopper_pearson(k, n) if n else (0.0, 1.0)
    return SiftRecord(
        kept_indices=pulse_indices[matched & ~reveal],
        revealed_indices=pulse_indices[reveal],
        qber_estimate=float(estimate),
        ci_low=lo,
        ci_high=hi,
        low_confidence=n < 30,
    )


def sift(pulse_indices: np.ndarray, alice_bases: np.ndarray, alice_bits: np.ndarray,
         bob_bases: np.ndarray, bob_bits: np.ndarray,
         revealed_indices: np.ndarray | None = None,
         ) -> tuple[SiftRecord, np.ndarray, np.ndarray]:
    """Basis-sift the matched pairs into aligned key bit strings.

    Pairs whose bases differ are discarded; pairs whose pulse index
    appears in ``revealed_indices`` are excluded from the key.  Returns
    the sift record and the (alice, bob) key bits in pulse order.
    """
    pulse_indices = np.asarray(pulse_indices, dtype=np.int64)
    alice_bases = np.asarray(alice_bases)
    bob_bases = np.asarray(bob_bases)
    matched = alice_bases == bob_bases
    if revealed_indices is not None and len(revealed_indices):
        revealed = np.isin(pulse_indices, np.asarray(revealed_indices, dtype=np.int64))
    else:
        revealed = np.zeros(pulse_indices.size, dtype=bool)
    keep = matched & ~revealed
    a_key = np.asarray(alice_bits, dtype=np.uint8)[keep]
    b_key = np.asarray(bob_bits, dtype=np.uint8)[keep]
    record = SiftRecord(
        kept_indices=pulse_indices[keep],
        revealed_indices=pulse_indices[matched & revealed],
        qber_estimate=float("nan"),
        ci_low=0.0, ci_high=1.0,
    )
    return record, a_key, b_key
