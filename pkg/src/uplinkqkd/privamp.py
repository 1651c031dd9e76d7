"""Privacy amplification with a structured two-universal hash.

The compression matrix is U = (I | T): an identity block followed by an
L x (N - L) Toeplitz block, fully defined by an (N - 1)-bit seed.  The
identity part passes the first L corrected-key bits straight through;
the Toeplitz part is evaluated row by row with a logical shift register
partitioned into 32-bit words, so no matrix is ever materialized and
memory stays linear in N.

``dense_oracle`` builds the same matrix explicitly; it is quadratic in
memory and exists to cross-check the shift-register path in tests.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError
from .keyrate import KeyRateResult

__all__ = [
    "HashSeed",
    "generate_seed",
    "final_key_length",
    "hash_apply",
    "dense_oracle",
    "key_to_bytes",
    "MIN_RECOMMENDED_BLOCK",
]

_WORD = 32
# below this block length the finite-size penalty makes the extractor
# output statistically fragile; callers are warned but not stopped
MIN_RECOMMENDED_BLOCK = 100_000

# byte -> number of set bits, for word-parallel parity accumulation
_POPCOUNT8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


@dataclass(frozen=True)
class HashSeed:
    """Seed bits defining the (I | T) compression matrix.

    ``bits`` has n - 1 entries; bit k (0-based) is seed element
    r_{k+1} in 1-based convention.  Row 0 of the Toeplitz block reads
    (r_L, ..., r_{n-1}); each later row shifts right by one and inserts
    the next lower seed bit on the left.
    """

    bits: np.ndarray
    n: int
    l: int

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        object.__setattr__(self, "bits", bits)
        if not 0 < self.l < self.n:
            raise ConfigurationError(f"need 0 < output length < block length, "
                                     f"got l={self.l}, n={self.n}")
        if bits.shape != (self.n - 1,):
            raise ConfigurationError(f"seed needs exactly n-1 = {self.n - 1} bits, "
                                     f"got {bits.shape}")
        if bits.size and bits.max() > 1:
            raise ConfigurationError("seed bits must be 0 or 1")


def generate_seed(n: int, l: int, rng: np.random.Generator | None = None,
                  bits: np.ndarray | None = None) -> HashSeed:
    """Draw (or wrap externally supplied) seed bits for an (n, l) hash.

    Exactly one of ``rng`` and ``bits`` must be given: simulation draws
    from the session PRNG, hardware integrations pass their own bits.
    """
    if (rng is None) == (bits is None):
        raise ConfigurationError("provide exactly one of rng and bits")
    if bits is None:
        bits = rng.integers(0, 2, size=n - 1, dtype=np.uint8)
    return HashSeed(bits=np.asarray(bits, dtype=np.uint8), n=n, l=l)


def final_key_length(rate_result: KeyRateResult, pulses_sent: int) -> int:
    """Secure output length: floor of the finite rate times pulses sent."""
    if pulses_sent < 0:
        raise DomainError("pulses_sent must be nonnegative")
    if rate_result.r_finite <= 0.0:
        return 0
    return int(rate_result.r_finite * pulses_sent)


def _pack_words(bits: np.ndarray) -> np.ndarray:
    """Pack a bit array into uint32 words, MSB-first, zero-padded."""
    padded = np.zeros(-(-bits.size // _WORD) * _WORD, dtype=np.uint8)
    padded[:bits.size] = bits
    as_bytes = np.packbits(padded)
    return as_bytes.view(">u4").astype(np.uint32)


def hash_apply(key_ec: np.ndarray, seed: HashSeed) -> np.ndarray:
    """Compress the corrected key to ``seed.l`` secure bits.

    Output bit i is key_ec[i] XOR the GF(2) inner product of Toeplitz
    row i with the key tail key_ec[l:].  Rows are generated in place by
    a logical shift register over 32-bit words; runtime is O(l * n / 32)
    and memory O(n).
    """
    key_ec = np.asarray(key_ec, dtype=np.uint8)
    if key_ec.shape != (seed.n,):
        raise DomainError(f"key length {key_ec.shape} does not match block length {seed.n}")
    if seed.n < MIN_RECOMMENDED_BLOCK:
        warnings.warn(
            f"privacy amplification block of {seed.n} bits is below the "
            f"recommended minimum of {MIN_RECOMMENDED_BLOCK}; finite-size "
            "penalties dominate at this size", stacklevel=2)
    l = seed.l

    tail = _pack_words(key_ec[l:])          # fixed operand of every row product
    state = _pack_words(seed.bits[l - 1:])  # row 0: (r_l, ..., r_{n-1})

    out = np.empty(l, dtype=np.uint8)
    msb = np.uint32(1 << (_WORD - 1))
    one = np.uint32(1)
    for i in range(l):
        masked = state & tail
        ones = int(_POPCOUNT8[masked.view(np.uint8)].sum())
        out[i] = key_ec[i] ^ (ones & 1)
        if i == l - 1:
            break
        # shift right one bit across word boundaries, inserting the next
        # lower seed bit (r_{l-1-i}) at the register's MSB
        carry_in = np.empty_like(state)
        carry_in[1:] = (state[:-1] & one) << np.uint32(_WORD - 1)
        carry_in[0] = msb if seed.bits[l - 2 - i] else np.uint32(0)
        # bits shifted past the logical register width are harmless: the
        # packed tail is zero-padded there, so they never reach a parity
        state = (state >> one) | carry_in
    return out


def dense_oracle(key_ec: np.ndarray, seed: HashSeed) -> np.ndarray:
    """Reference implementation materializing the full (I | T) matrix.

    T[i][j] = r_{l-i+j} in 1-based seed convention.  Quadratic in time
    and memory; use only for verification and small blocks.
    """
    key_ec = np.asarray(key_ec, dtype=np.uint8)
    if key_ec.shape != (seed.n,):
        raise DomainError(f"key length {key_ec.shape} does not match block length {seed.n}")
    n, l = seed.n, seed.l
    # 0-based: T[i][j] = bits[l - 1 - i + j]
    idx = (l - 1) + np.add.outer(-np.arange(l), np.arange(n - l))
    toeplitz = seed.bits[idx]
    tail_product = (toeplitz @ key_ec[l:].astype(np.int64)) & 1
    return (key_ec[:l] ^ tail_product).astype(np.uint8)


def key_to_bytes(bits: np.ndarray) -> tuple[bytes, int]:
    """Emit final key bits as bytes, MSB-first, zero-padded.

    Returns (payload, pad_bits); pad bits occupy the low positions of
    the final byte and must be ignored by consumers.
    """
    bits = np.asarray(bits, dtype=np.uint8)
    pad = (-bits.size) % 8
    return np.packbits(bits).tobytes(), pad
