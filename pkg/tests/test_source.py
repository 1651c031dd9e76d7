"""Deterministic pulse-sequence generation."""

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uplinkqkd.errors import ConfigurationError
from uplinkqkd.keyrate import SourceConfig
from uplinkqkd.source import (
    Basis,
    IntensityClass,
    PulseSequence,
    PulseState,
    generate_sequence,
    sample_photon_numbers,
)


class TestPulseState:
    @pytest.mark.parametrize("basis,bit,pol", [
        (Basis.RECTILINEAR, 0, "H"),
        (Basis.RECTILINEAR, 1, "V"),
        (Basis.DIAGONAL, 0, "D"),
        (Basis.DIAGONAL, 1, "A"),
    ])
    def test_polarization_labels(self, basis, bit, pol):
        state = PulseState(basis=basis, bit=bit,
                           intensity_class=IntensityClass.SIGNAL)
        assert state.polarization == pol


class TestPulseSequence:
    def test_deterministic_under_seed(self):
        a = generate_sequence(7, 10_000)
        b = generate_sequence(7, 10_000)
        assert np.array_equal(a.classes(), b.classes())
        assert np.array_equal(a.bases(), b.bases())
        assert np.array_equal(a.bits(), b.bits())

    def test_different_seeds_differ(self):
        a = generate_sequence(1, 10_000)
        b = generate_sequence(2, 10_000)
        assert not np.array_equal(a.bits(), b.bits())

    def test_point_access_matches_slices(self):
        seq = generate_sequence(3, 50_000)
        idx = np.array([0, 17, 499, 49_999])
        assert np.array_equal(seq.classes_at(idx), seq.classes()[idx])
        assert np.array_equal(seq.bases_at(idx), seq.bases()[idx])
        assert np.array_equal(seq.bits_at(idx), seq.bits()[idx])

    def test_class_fractions_converge(self):
        seq = generate_sequence(11, 200_000, fractions=(0.92, 0.04, 0.04))
        cls = seq.classes()
        assert (cls == IntensityClass.SIGNAL).mean() == pytest.approx(0.92, abs=0.01)
        assert (cls == IntensityClass.DECOY).mean() == pytest.approx(0.04, abs=0.005)
        assert (cls == IntensityClass.VACUUM).mean() == pytest.approx(0.04, abs=0.005)

    def test_changing_fractions_keeps_bits(self):
        a = generate_sequence(5, 20_000, fractions=(0.92, 0.04, 0.04))
        b = generate_sequence(5, 20_000, fractions=(0.5, 0.25, 0.25))
        assert np.array_equal(a.bits(), b.bits())
        assert np.array_equal(a.bases(), b.bases())

    def test_bases_and_bits_balanced(self):
        seq = generate_sequence(13, 100_000)
        assert seq.bases().mean() == pytest.approx(0.5, abs=0.01)
        assert seq.bits().mean() == pytest.approx(0.5, abs=0.01)

    def test_repeat_period(self):
        seq = generate_sequence(1, 3000, repeat_period=1000)
        assert np.array_equal(seq.bits(0, 1000), seq.bits(1000, 2000))
        assert np.array_equal(seq.bits(0, 1000), seq.bits(2000, 3000))

    def test_validation(self):
        with pytest.raises(ConfigurationError):
            PulseSequence(seed=0, length=0)
        with pytest.raises(ConfigurationError):
            PulseSequence(seed=0, length=10, fractions=(0.5, 0.4, 0.2))
        with pytest.raises(ConfigurationError):
            generate_sequence(0, 100).bits(50, 200)

    def test_getitem_and_len(self):
        seq = generate_sequence(9, 100)
        assert len(seq) == 100
        state = seq[3]
        assert state.basis == Basis(int(seq.bases()[3]))
        assert state.bit == int(seq.bits()[3])
        assert seq[-1].bit == int(seq.bits()[99])

    def test_export_text(self):
        seq = generate_sequence(21, 10)
        buf = io.StringIO()
        seq.export_text(buf)
        lines = buf.getvalue().strip().split("\n")
        assert len(lines) == 10
        first = lines[0].split()
        assert first[0] == "0"
        assert first[1] in ("signal", "decoy", "vacuum")

    @given(st.integers(min_value=0, max_value=2**63 - 1))
    @settings(max_examples=50, deadline=None)
    def test_any_seed_is_valid(self, seed):
        seq = generate_sequence(seed, 64)
        bits = seq.bits()
        assert bits.shape == (64,)
        assert set(np.unique(bits)) <= {0, 1}


class TestPhotonSampling:
    def test_vacuum_is_empty(self):
        cfg = SourceConfig(mu=0.5, nu=0.05)
        rng = np.random.default_rng(0)
        classes = np.full(1000, IntensityClass.VACUUM, dtype=np.uint8)
        assert sample_photon_numbers(classes, cfg, rng).max() == 0

    def test_poisson_means(self):
        cfg = SourceConfig(mu=0.5, nu=0.05)
        rng = np.random.default_rng(1)
        sig = np.full(200_000, IntensityClass.SIGNAL, dtype=np.uint8)
        dec = np.full(200_000, IntensityClass.DECOY, dtype=np.uint8)
        assert sample_photon_numbers(sig, cfg, rng).mean() == pytest.approx(0.5, abs=0.01)
        assert sample_photon_numbers(dec, cfg, rng).mean() == pytest.approx(0.05, abs=0.005)
