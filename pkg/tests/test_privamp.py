"""Toeplitz-hash privacy amplification against a dense reference."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uplinkqkd.errors import ConfigurationError, DomainError
from uplinkqkd.keyrate import KeyRateResult
from uplinkqkd.privamp import (
    MIN_RECOMMENDED_BLOCK,
    HashSeed,
    dense_oracle,
    final_key_length,
    generate_seed,
    hash_apply,
    key_to_bytes,
)


def _apply(key, seed):
    with pytest.warns(UserWarning):
        return hash_apply(key, seed)


class TestHashSeed:
    def test_length_bounds(self):
        with pytest.raises(ConfigurationError):
            HashSeed(bits=np.zeros(9, dtype=np.uint8), n=10, l=0)
        with pytest.raises(ConfigurationError):
            HashSeed(bits=np.zeros(9, dtype=np.uint8), n=10, l=10)

    def test_bits_shape_checked(self):
        with pytest.raises(ConfigurationError):
            HashSeed(bits=np.zeros(5, dtype=np.uint8), n=10, l=3)

    def test_generate_requires_exactly_one_source(self):
        with pytest.raises(ConfigurationError):
            generate_seed(10, 3)
        with pytest.raises(ConfigurationError):
            generate_seed(10, 3, rng=np.random.default_rng(0),
                          bits=np.zeros(9, dtype=np.uint8))

    def test_generate_deterministic_from_rng(self):
        a = generate_seed(64, 20, rng=np.random.default_rng(5))
        b = generate_seed(64, 20, rng=np.random.default_rng(5))
        assert np.array_equal(a.bits, b.bits)

    def test_generate_wraps_external_bits(self):
        bits = (np.arange(15) % 2).astype(np.uint8)
        seed = generate_seed(16, 4, bits=bits)
        assert np.array_equal(seed.bits, bits)


class TestHashApply:
    @pytest.mark.parametrize("n,l,case", [
        (8, 3, 0), (8, 7, 1), (8, 1, 2), (12, 5, 3), (33, 16, 4),
        (64, 20, 5), (100, 63, 6), (257, 100, 7), (1024, 700, 8),
    ])
    def test_matches_dense_oracle(self, n, l, case):
        rng = np.random.default_rng(case)
        seed = generate_seed(n, l, rng=rng)
        key = rng.integers(0, 2, n).astype(np.uint8)
        assert np.array_equal(_apply(key, seed), dense_oracle(key, seed))

    def test_exhaustive_tiny_block(self):
        # all 2^6 keys under several seeds on a 6-bit block
        for s in range(10):
            rng = np.random.default_rng(s)
            seed = generate_seed(6, 3, rng=rng)
            for k in range(64):
                key = np.array([(k >> b) & 1 for b in range(6)], dtype=np.uint8)
                assert np.array_equal(_apply(key, seed),
                                      dense_oracle(key, seed))

    def test_linearity(self):
        rng = np.random.default_rng(7)
        seed = generate_seed(128, 40, rng=rng)
        k1 = rng.integers(0, 2, 128).astype(np.uint8)
        k2 = rng.integers(0, 2, 128).astype(np.uint8)
        assert np.array_equal(_apply(k1 ^ k2, seed),
                              _apply(k1, seed) ^ _apply(k2, seed))

    def test_zero_key_maps_to_zero(self):
        seed = generate_seed(64, 16, rng=np.random.default_rng(1))
        assert _apply(np.zeros(64, dtype=np.uint8), seed).max() == 0

    def test_zero_seed_is_identity_prefix(self):
        # with all-zero seed bits the Toeplitz part vanishes and the
        # output equals the first l key bits
        seed = generate_seed(32, 10, bits=np.zeros(31, dtype=np.uint8))
        key = np.random.default_rng(2).integers(0, 2, 32).astype(np.uint8)
        assert np.array_equal(_apply(key, seed), key[:10])

    def test_length_mismatch_rejected(self):
        seed = generate_seed(32, 10, rng=np.random.default_rng(3))
        with pytest.raises(DomainError):
            hash_apply(np.zeros(31, dtype=np.uint8), seed)

    def test_large_block_no_warning(self):
        n = MIN_RECOMMENDED_BLOCK
        rng = np.random.default_rng(4)
        seed = generate_seed(n, 1000, rng=rng)
        key = rng.integers(0, 2, n).astype(np.uint8)
        import warnings as _w
        with _w.catch_warnings():
            _w.simplefilter("error")
            out = hash_apply(key, seed)
        assert out.size == 1000

    @given(st.integers(min_value=2, max_value=40), st.data())
    @settings(max_examples=60, deadline=None)
    def test_random_shapes_match_oracle(self, n, data):
        l = data.draw(st.integers(min_value=1, max_value=n - 1))
        s = data.draw(st.integers(min_value=0, max_value=2**32 - 1))
        rng = np.random.default_rng(s)
        seed = generate_seed(n, l, rng=rng)
        key = rng.integers(0, 2, n).astype(np.uint8)
        assert np.array_equal(_apply(key, seed), dense_oracle(key, seed))


class TestUniversality:
    def test_collision_rate_matches_two_universal_bound(self):
        # distinct inputs collide with probability 2^-l over random seeds
        rng = np.random.default_rng(9)
        n, l, trials = 24, 8, 20_000
        x = rng.integers(0, 2, n).astype(np.uint8)
        y = x.copy()
        y[n - 1] ^= 1  # differ in the Toeplitz-processed tail
        collisions = 0
        for _ in range(trials):
            seed = generate_seed(n, l, rng=rng)
            if np.array_equal(_apply(x, seed), _apply(y, seed)):
                collisions += 1
        expected = trials * 2.0 ** -l
        assert abs(collisions - expected) <= 5.0 * np.sqrt(expected)


class TestFinalKeyLength:
    def _result(self, r_finite):
        return KeyRateResult(q1_lb=1e-6, e1_ub=0.03, r_inf=2 * max(r_finite, 0.0),
                             r_finite=r_finite, delta=0.1, eps_bar=1e-10,
                             eps_bar_prime=1e-10, final_length_bits=0)

    def test_positive_rate(self):
        assert final_key_length(self._result(1e-7), 10**10) == 1000

    def test_zero_and_negative_rates(self):
        assert final_key_length(self._result(0.0), 10**10) == 0
        assert final_key_length(self._result(-1e-9), 10**10) == 0

    def test_negative_pulses_rejected(self):
        with pytest.raises(DomainError):
            final_key_length(self._result(1e-7), -1)


class TestKeyToBytes:
    def test_exact_multiple_of_eight(self):
        payload, pad = key_to_bytes(np.ones(16, dtype=np.uint8))
        assert payload == b"\xff\xff"
        assert pad == 0

    def test_padding_in_low_bits(self):
        payload, pad = key_to_bytes(np.array([1, 0, 1], dtype=np.uint8))
        assert pad == 5
        assert payload == bytes([0b10100000])

    def test_empty(self):
        payload, pad = key_to_bytes(np.array([], dtype=np.uint8))
        assert payload == b""
        assert pad == 0
