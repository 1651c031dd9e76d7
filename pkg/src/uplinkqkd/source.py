"""Weak-coherent-pulse transmitter simulation.

Generates the predefined randomized sequence of polarization states the
transmitter would emit: each pulse carries a basis, a bit and an
intensity class (signal, weak decoy or vacuum).  Generation is
deterministic under a 64-bit seed and uses independent named sub-streams
for the class, basis and bit draws, so changing the class fractions
never perturbs the basis/bit values at unchanged positions.

Pulses are addressable by index: any slice of the sequence can be
regenerated without materializing the prefix, which also makes chunked
parallel generation safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import IO, Iterator

import numpy as np

from .errors import ConfigurationError
from .keyrate import SourceConfig

__all__ = [
    "Basis",
    "IntensityClass",
    "PulseState",
    "PulseSequence",
    "generate_sequence",
    "sample_photon_number",
    "sample_photon_numbers",
]


class Basis(IntEnum):
    RECTILINEAR = 0
    DIAGONAL = 1


class IntensityClass(IntEnum):
    SIGNAL = 0
    DECOY = 1
    VACUUM = 2


@dataclass(frozen=True)
class PulseState:
    """One emitted pulse.

    Vacuum pulses still carry basis/bit values (the modulators are
    driven identically); downstream they are ignored since no photons
    are emitted.
    """

    basis: Basis
    bit: int
    intensity_class: IntensityClass

    @property
    def polarization(self) -> str:
        """H/V for the rectilinear basis, D/A for the diagonal one.

        H and D encode bit 0, V and A encode bit 1.
        """
        return "HVDA"[2 * self.basis + self.bit]


# Counter-based generation: the draw at a given index is a pure hash of
# (seed, stream name, index), so any subset of positions can be
# regenerated in O(1) each without touching the rest of the sequence.
_GAMMA = np.uint64(0x9E3779B97F4A7C15)


def _mix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer, vectorized over uint64 (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        z = (x + _GAMMA).astype(np.uint64)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _stream_key(seed: int, stream: str) -> np.uint64:
    tag = int.from_bytes(stream.encode().ljust(8, b"\0")[:8], "big")
    base = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ np.uint64(tag)
    return _mix64(np.asarray(base, dtype=np.uint64)[()])


def _uniform_at(seed: int, stream: str, indices: np.ndarray) -> np.ndarray:
    """Uniform [0, 1) draws for the given absolute indices."""
    idx = np.asarray(indices, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _mix64(_stream_key(seed, stream) ^ (idx * _GAMMA))
    return (z >> np.uint64(11)) * 2.0 ** -53


@dataclass(frozen=True)
class PulseSequence:
    """Deterministic indexed sequence of pulse states.

    ``fractions`` is the (signal, decoy, vacuum) class mix.  If
    ``repeat_period`` is set, the sequence repeats with that period,
    modeling a transmitter limited to a fixed-length stored pattern
    (insecure; off by default).
    """

    seed: int
    length: int
    fractions: tuple[float, float, float] = (0.92, 0.04, 0.04)
    intrinsic_qber: float = 0.0
    repeat_period: int | None = field(default=None)

    def __post_init__(self):
        if self.length <= 0:
            raise ConfigurationError("sequence length must be positive")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigurationError("class fractions must sum to 1")
        if any(f < 0 for f in self.fractions):
            raise ConfigurationError("class fractions must be nonnegative")
        if not 0.0 <= self.intrinsic_qber <= 1.0:
            raise ConfigurationError("intrinsic_qber must lie in [0, 1]")
        if self.repeat_period is not None and self.repeat_period <= 0:
            raise ConfigurationError("repeat_period must be positive")

    def _stream_at(self, name: str, indices: np.ndarray) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.length):
            raise ConfigurationError(f"pulse index outside sequence of length {self.length}")
        if self.repeat_period is not None:
            idx = idx % self.repeat_period
        return _uniform_at(self.seed, name, idx)

    def _stream(self, name: str, start: int, stop: int) -> np.ndarray:
        if not 0 <= start <= stop <= self.length:
            raise ConfigurationError(f"slice [{start}, {stop}) outside sequence of length {self.length}")
        return self._stream_at(name, np.arange(start, stop, dtype=np.int64))

    def classes_at(self, indices: np.ndarray) -> np.ndarray:
        """Intensity classes (uint8 codes) at arbitrary pulse indices."""
        u = self._stream_at("class", indices)
        k_mu, k_nu, _ = self.fractions
        out = np.full(u.shape, IntensityClass.VACUUM, dtype=np.uint8)
        out[u < k_mu + k_nu] = IntensityClass.DECOY
        out[u < k_mu] = IntensityClass.SIGNAL
        return out

    def classes(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Intensity classes for indices [start, stop), as uint8 codes."""
        stop = self.length if stop is None else stop
        return self.classes_at(np.arange(start, stop, dtype=np.int64))

    def bases_at(self, indices: np.ndarray) -> np.ndarray:
        return (self._stream_at("basis", indices) < 0.5).astype(np.uint8)

    def bases(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        stop = self.length if stop is None else stop
        return (self._stream("basis", start, stop) < 0.5).astype(np.uint8)

    def bits_at(self, indices: np.ndarray) -> np.ndarray:
        return (self._stream_at("bit", indices) < 0.5).astype(np.uint8)

    def bits(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        stop = self.length if stop is None else stop
        return (self._stream("bit", start, stop) < 0.5).astype(np.uint8)

    def error_draws_at(self, indices: np.ndarray) -> np.ndarray:
        """Uniform draws reserved for polarization-error sampling.

        A draw below ``intrinsic_qber`` flips the detected bit; kept as
        a dedicated stream so receivers observe reproducible errors.
        """
        return self._stream_at("error", indices)

    def error_draws(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        stop = self.length if stop is None else stop
        return self._stream("error", start, stop)

    def states(self, start: int = 0, stop: int | None = None) -> Iterator[PulseState]:
        stop = self.length if stop is None else stop
        cls = self.classes(start, stop)
        bas = self.bases(start, stop)
        bit = self.bits(start, stop)
        for c, ba, bi in zip(cls, bas, bit):
            yield PulseState(Basis(int(ba)), int(bi), IntensityClass(int(c)))

    def __len__(self) -> int:
        return self.length

    def __getitem__(self, index: int) -> PulseState:
        if index < 0:
            index += self.length
        return next(self.states(index, index + 1))

    def export_text(self, stream: IO[str], start: int = 0, stop: int | None = None) -> None:
        """Debug dump, one pulse per line: ``index class basis bit``."""
        stop = self.length if stop is None else stop
        cls = self.classes(start, stop)
        bas = self.bases(start, stop)
        bit = self.bits(start, stop)
        class_names = {0: "signal", 1: "decoy", 2: "vacuum"}
        basis_names = {0: "rectilinear", 1: "diagonal"}
        for i in range(start, stop):
            j = i - start
            stream.write(f"{i} {class_names[int(cls[j])]} {basis_names[int(bas[j])]} {int(bit[j])}\n")


def generate_sequence(seed: int, length: int,
                      fractions: tuple[float, float, float] = (0.92, 0.04, 0.04),
                      intrinsic_qber: float = 0.0,
                      repeat_period: int | None = None) -> PulseSequence:
    """Build a deterministic pulse sequence with the given class mix."""
    return PulseSequence(seed=seed, length=length, fractions=tuple(fractions),
                         intrinsic_qber=intrinsic_qber, repeat_period=repeat_period)


_CLASS_MEANS = {
    IntensityClass.SIGNAL: "mu",
    IntensityClass.DECOY: "nu",
}


def sample_photon_number(intensity_class: IntensityClass, cfg: SourceConfig,
                         rng: np.random.Generator) -> int:
    """Poissonian photon number for one pulse of the given class."""
    if intensity_class == IntensityClass.VACUUM:
        return 0
    return int(rng.poisson(getattr(cfg, _CLASS_MEANS[IntensityClass(intensity_class)])))


def sample_photon_numbers(classes: np.ndarray, cfg: SourceConfig,
                          rng: np.random.Generator) -> np.ndarray:
    """Vectorized photon-number sampling for an array of class codes."""
    means = np.zeros(classes.shape, dtype=np.float64)
    means[classes == IntensityClass.SIGNAL] = cfg.mu
    means[classes == IntensityClass.DECOY] = cfg.nu
    return rng.poisson(means)
