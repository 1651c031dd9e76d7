"""Two-party post-processing session over a framed classical channel.

The computational split is deliberately asymmetric: Alice (the ground
side, rich in compute) performs coincidence search, sifting, parity
matrix construction and belief-propagation decoding, while Bob (the
payload side) only encodes his time-tags, answers index queries,
computes syndromes — all linear-time — and runs the final hashing step.

Wire format: little-endian frames {msg_type: u8, length: u32, payload,
crc32: u32 over type+length+payload} on any reliable ordered byte
stream.  Time-tags travel in a compact per-second layout (40 bits per
detection) defined by :func:`encode_tags`.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import time
import zlib
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy import optimize as _scipy_optimize

from . import ldpc, privamp
from .channel import TICKS_PER_SECOND, RunRecord
from .errors import (DomainError, ParseError, ProtocolError,
                     SynchronizationError, UplinkQkdError)
from .keyrate import (ChannelStatistics, SecurityParams, SourceConfig,
                      binary_entropy, finite_size_rate)
from .source import PulseSequence
from .timesync import PulseGrid, coincidence_search, temporal_filter

__all__ = [
    "MsgType",
    "Frame",
    "FrameChannel",
    "SessionConfig",
    "BobDetections",
    "ResourceReport",
    "encode_tags",
    "decode_tags",
    "store_detections",
    "load_detections",
    "qber_abort_threshold",
    "run_alice",
    "run_bob",
    "run_session_pair",
    "fit_polynomial",
]

TAG_MAGIC = b"QTAG1"

_OFFSET_BITS = 36
_OFFSET_MASK = (1 << _OFFSET_BITS) - 1
_FLAG_CONTINUE = 0x1  # flags bit 0: another record follows in this second
_RECORD_BYTES = 5
_HEADER_BYTES = 8


class MsgType(IntEnum):
    HELLO = 1
    TIMETAGS = 2
    BASES_SIFT_INDICES = 3
    QBER_ESTIMATE = 4
    LDPC_MATRIX = 5
    SYNDROME = 6
    EC_VERDICT = 7
    PA_SEED = 8
    FINAL_LENGTH = 9
    ABORT = 10


@dataclass
class Frame:
    msg_type: MsgType
    payload: bytes

    def encode(self) -> bytes:
        head = struct.pack("<BI", int(self.msg_type), len(self.payload))
        crc = zlib.crc32(head + self.payload)
        return head + self.payload + struct.pack("<I", crc)


class FrameChannel:
    """Framed messaging over a connected socket-like object.

    Tracks per-message-type byte counts in both directions for the
    resource report.  A CRC mismatch or unknown message type raises
    :class:`ProtocolError`; the caller is expected to abort.
    """

    def __init__(self, sock):
        self._sock = sock
        self.bytes_sent: dict[str, int] = {}
        self.bytes_received: dict[str, int] = {}

    def send(self, msg_type: MsgType, payload: bytes = b"") -> None:
        raw = Frame(msg_type, payload).encode()
        self._sock.sendall(raw)
        key = MsgType(msg_type).name
        self.bytes_sent[key] = self.bytes_sent.get(key, 0) + len(raw)

    def _read_exact(self, count: int) -> bytes:
        buf = bytearray()
        while len(buf) < count:
            chunk = self._sock.recv(count - len(buf))
            if not chunk:
                raise ProtocolError("peer closed the channel mid-frame", "transport")
            buf.extend(chunk)
        return bytes(buf)

    def recv(self) -> Frame:
        head = self._read_exact(5)
        type_code, length = struct.unpack("<BI", head)
        payload = self._read_exact(length)
        (crc,) = struct.unpack("<I", self._read_exact(4))
        if crc != zlib.crc32(head + payload):
            raise ProtocolError("frame integrity check failed", "transport")
        try:
            msg_type = MsgType(type_code)
        except ValueError:
            raise ProtocolError(f"unknown message type {type_code}", "transport") from None
        key = msg_type.name
        self.bytes_received[key] = self.bytes_received.get(key, 0) + length + 9
        return Frame(msg_type, payload)

    def expect(self, msg_type: MsgType, state: str) -> Frame:
        frame = self.recv()
        if frame.msg_type == MsgType.ABORT:
            raise ProtocolError(
                f"peer aborted: {frame.payload.decode('utf-8', 'replace')}", state)
        if frame.msg_type != msg_type:
            raise ProtocolError(
                f"expected {msg_type.name}, got {frame.msg_type.name}", state)
        return frame


def encode_tags(tags: np.ndarray, detectors: np.ndarray) -> bytes:
    """Pack detections into the compact per-second layout.

    Each second containing at least one detection contributes an 8-byte
    header (the full tick value at its boundary) followed by 5-byte
    records {offset: 36 bits since the header, detector: 2 bits, flags:
    2 bits}.  Flags bit 0 marks that another record follows within the
    same second, making the stream self-delimiting; bit 1 is reserved
    zero.  Tags must be sorted, nonnegative and tick-valued.
    """
    tags = np.asarray(tags, dtype=np.int64)
    detectors = np.asarray(detectors, dtype=np.uint8)
    if tags.shape != detectors.shape:
        raise DomainError("tags and detectors must have equal length")
    if tags.size and tags.min() < 0:
        raise DomainError("compact tag format requires nonnegative tick values")
    if np.any(np.diff(tags) < 0):
        raise DomainError("tags must be sorted before encoding")
    if detectors.size and detectors.max() > 3:
        raise DomainError("detector indices must fit in 2 bits")

    out = [TAG_MAGIC]
    seconds = tags // TICKS_PER_SECOND
    boundaries = np.flatnonzero(np.diff(seconds)) + 1
    starts = np.concatenate([[0], boundaries, [tags.size]])
    for a, b in zip(starts[:-1], starts[1:]):
        if a == b:
            continue
        header_tick = int(seconds[a]) * TICKS_PER_SECOND
        vals = (tags[a:b] - header_tick).astype(np.uint64)
        vals |= detectors[a:b].astype(np.uint64) << np.uint64(_OFFSET_BITS)
        cont = np.full(b - a, _FLAG_CONTINUE, dtype=np.uint64)
        cont[-1] = 0
        vals |= cont << np.uint64(_OFFSET_BITS + 2)
        shifts = np.arange(_RECORD_BYTES, dtype=np.uint64) * np.uint64(8)
        raw = ((vals[:, None] >> shifts) & np.uint64(0xFF)).astype(np.uint8)
        out.append(struct.pack("<Q", header_tick))
        out.append(raw.tobytes())
    return b"".join(out)


def decode_tags(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Invert :func:`encode_tags`; raises :class:`ParseError` with the
    byte offset of the first malformed element."""
    if data[:len(TAG_MAGIC)] != TAG_MAGIC:
        raise ParseError("bad magic in compact tag stream", 0)
    buf = np.frombuffer(data, dtype=np.uint8)
    pos = len(TAG_MAGIC)
    tags_out: list[np.ndarray] = []
    det_out: list[np.ndarray] = []
    while pos < buf.size:
        if pos + _HEADER_BYTES > buf.size:
            raise ParseError("truncated second header", pos)
        (header_tick,) = struct.unpack_from("<Q", data, pos)
        if header_tick % TICKS_PER_SECOND:
            raise ParseError("header tick not on a second boundary", pos)
        pos += _HEADER_BYTES
        # records run until the first one with a clear continuation flag;
        # the flag lives in bit 6 of each record's final byte
        flag_bytes = buf[pos + _RECORD_BYTES - 1::_RECORD_BYTES]
        ends = np.flatnonzero((flag_bytes & (_FLAG_CONTINUE << 6)) == 0)
        if ends.size == 0:
            raise ParseError("unterminated record run", pos)
        count = int(ends[0]) + 1
        end = pos + count * _RECORD_BYTES
        if end > buf.size:
            raise ParseError("truncated record", pos)
        raw = buf[pos:end].reshape(count, _RECORD_BYTES).astype(np.uint64)
        shifts = np.arange(_RECORD_BYTES, dtype=np.uint64) * np.uint64(8)
        vals = (raw << shifts).sum(axis=1)
        if np.any((vals >> np.uint64(_OFFSET_BITS + 3)) & np.uint64(1)):
            raise ParseError("reserved flag bit set", pos)
        offsets = (vals & np.uint64(_OFFSET_MASK)).astype(np.int64)
        if np.any(np.diff(offsets) < 0):
            raise ParseError("record offsets not monotone within a second", pos)
        tags_out.append(header_tick + offsets)
        det_out.append(((vals >> np.uint64(_OFFSET_BITS)) & np.uint64(3)).astype(np.uint8))
        pos = end
    if tags_out:
        return np.concatenate(tags_out), np.concatenate(det_out)
    return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.uint8)


@dataclass
class BobDetections:
    """Receiver-side session input: what the detectors actually saw.

    ``detectors`` encodes the firing channel 0..3 as 2*basis + bit
    (H, V, D, A).  Construct from a simulated :class:`RunRecord` with
    :meth:`from_run`.
    """

    tags: np.ndarray
    detectors: np.ndarray
    duration_s: float

    @classmethod
    def from_run(cls, run: RunRecord) -> "BobDetections":
        keep = run.tags >= 0
        return cls(tags=run.tags[keep], detectors=run.detectors[keep],
                   duration_s=run.duration_s)


def store_detections(path, detections: BobDetections) -> None:
    """Persist a detection set for deferred (store-and-forward) runs."""
    with open(path, "wb") as fh:
        fh.write(encode_tags(detections.tags, detections.detectors))
    with open(str(path) + ".json", "w") as fh:
        json.dump({"duration_s": detections.duration_s,
                   "count": int(detections.tags.size)}, fh)


def load_detections(path) -> BobDetections:
    with open(path, "rb") as fh:
        tags, detectors = decode_tags(fh.read())
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    return BobDetections(tags=tags, detectors=detectors,
                         duration_s=float(meta["duration_s"]))


@dataclass
class ResourceReport:
    """Per-role accounting of bandwidth, wall time and buffer memory."""

    role: str
    bytes_sent: dict[str, int] = field(default_factory=dict)
    bytes_received: dict[str, int] = field(default_factory=dict)
    processing_time_s: dict[str, float] = field(default_factory=dict)
    peak_memory_estimate: int = 0

    @property
    def total_bytes_sent(self) -> int:
        return sum(self.bytes_sent.values())

    @property
    def total_bytes_received(self) -> int:
        return sum(self.bytes_received.values())

    @property
    def total_time_s(self) -> float:
        return sum(self.processing_time_s.values())


@dataclass(frozen=True)
class SessionConfig:
    """Knobs shared by both roles of a post-processing session."""

    source: SourceConfig
    security: SecurityParams = SecurityParams()
    window_ns: float = 1.0
    block_size: int = 2048
    max_augment: int = 3
    max_decode_iters: int = 150
    pa_length_policy: str = "finite"  # or "asymptotic"
    seed: int = 0

    def __post_init__(self):
        if self.pa_length_policy not in ("finite", "asymptotic"):
            raise DomainError(f"unknown pa_length_policy {self.pa_length_policy!r}")
        if self.block_size < 2:
            raise DomainError("block_size must be at least 2")


def qber_abort_threshold(f_ec: float) -> float:
    """QBER above which no positive asymptotic rate is possible.

    Even a perfectly single-photon source cannot beat the combined
    error-correction and privacy-amplification entropy cost, so the
    cap solves 1 - (1 + f_ec) * H2(e) = 0 for e.
    """
    if f_ec < 1.0:
        raise DomainError("f_ec below the Shannon limit")
    target = 1.0 / (1.0 + f_ec)
    return float(_scipy_optimize.brentq(
        lambda e: binary_entropy(e) - target, 1e-12, 0.5 - 1e-12))


class _Timer:
    def __init__(self, report: ResourceReport):
        self._report = report

    def measure(self, phase: str):
        return _Phase(self._report, phase)


class _Phase:
    def __init__(self, report, phase):
        self._report, self._phase = report, phase

    def __enter__(self):
        # per-thread CPU time: excludes waiting on the peer and is not
        # inflated by whatever else the host is running
        self._t0 = time.thread_time()

    def __exit__(self, *exc):
        dt = time.thread_time() - self._t0
        times = self._report.processing_time_s
        times[self._phase] = times.get(self._phase, 0.0) + dt
        return False


def _pack_bits(bits: np.ndarray) -> bytes:
    bits = np.asarray(bits, dtype=np.uint8)
    return struct.pack("<I", bits.size) + np.packbits(bits).tobytes()


def _unpack_bits(payload: bytes) -> np.ndarray:
    (count,) = struct.unpack_from("<I", payload, 0)
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8, offset=4),
                         count=count)
    return bits.astype(np.uint8)


def _pack_u32(values: np.ndarray) -> bytes:
    arr = np.asarray(values, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
        raise DomainError("index outside u32 range")
    return struct.pack("<I", arr.size) + arr.astype("<u4").tobytes()


def _unpack_u32(payload: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    (count,) = struct.unpack_from("<I", payload, offset)
    start = offset + 4
    end = start + 4 * count
    arr = np.frombuffer(payload[start:end], dtype="<u4").astype(np.int64)
    return arr, end


def _abort(chan: FrameChannel, reason: str, state: str):
    try:
        chan.send(MsgType.ABORT, reason.encode())
    except Exception:
        pass
    return ProtocolError(reason, state)


def run_alice(sock, sequence: PulseSequence, config: SessionConfig,
              ) -> tuple[bytes, ResourceReport]:
    """Ground-side protocol role; returns (final key bytes, report).

    Raises :class:`ProtocolError` on abort (QBER cap, frame corruption,
    synchronization failure); returns an empty key when the session
    completes but the secure length is zero.
    """
    chan = FrameChannel(sock)
    report = ResourceReport(role="alice")
    timer = _Timer(report)
    cfg = config.source
    sec = config.security
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xA11CE)))
    try:
        return _alice_flow(chan, sequence, config, cfg, sec, rng, report, timer)
    except ProtocolError:
        raise
    except UplinkQkdError as exc:
        raise _abort(chan, str(exc), "processing") from exc
    finally:
        report.bytes_sent = chan.bytes_sent
        report.bytes_received = chan.bytes_received


def _alice_flow(chan, sequence, config, cfg, sec, rng, report, timer):
    hello = {"pulses": sequence.length, "pulse_rate": cfg.pulse_rate,
             "block_size": config.block_size,
             "reveal_fraction": sec.reveal_fraction}
    chan.send(MsgType.HELLO, json.dumps(hello).encode())
    meta = json.loads(chan.expect(MsgType.HELLO, "hello").payload)
    duration_s = float(meta["duration_s"])

    frame = chan.expect(MsgType.TIMETAGS, "timetags")
    with timer.measure("coincidence_search"):
        tags, wire_det = decode_tags(frame.payload)
        period = TICKS_PER_SECOND / cfg.pulse_rate
        grid = PulseGrid(period_ticks=period, count=sequence.length)
        match = coincidence_search(grid, tags)
        keep, y0_bg = temporal_filter(match.residuals, config.window_ns,
                                      period, sequence.length)
    pulse_idx = match.pulse_indices[keep]
    tag_idx = match.tag_indices[keep]
    report.peak_memory_estimate = max(report.peak_memory_estimate,
                                      tags.nbytes + match.residuals.nbytes)

    with timer.measure("sifting"):
        a_bases = sequence.bases_at(pulse_idx)
        a_bits = sequence.bits_at(pulse_idx)
        classes = sequence.classes_at(pulse_idx)
        b_bases = (wire_det[tag_idx] >> 1).astype(np.uint8)
        basis_ok = a_bases == b_bases
        signal = classes == 0
        # disclose everything that never becomes key: all matched decoy
        # and vacuum outcomes, plus a sampled fraction of the signals
        sampled = rng.random(pulse_idx.size) < sec.reveal_fraction
        reveal = basis_ok & (~signal | sampled)
        kept = basis_ok & signal & ~sampled
    chan.send(MsgType.BASES_SIFT_INDICES,
              _pack_u32(tag_idx[kept]) + _pack_u32(tag_idx[reveal]))

    frame = chan.expect(MsgType.QBER_ESTIMATE, "qber")
    revealed_bits = _unpack_bits(frame.payload)
    if revealed_bits.size != int(reveal.sum()):
        raise _abort(chan, "revealed outcome count mismatch", "qber")

    with timer.measure("statistics"):
        stats, qber_mu = _alice_statistics(
            cfg, sec, sequence, classes, basis_ok, signal, reveal,
            a_bits, revealed_bits, y0_bg, duration_s)
    cap = qber_abort_threshold(sec.f_ec)
    if qber_mu >= cap:
        raise _abort(chan, f"estimated QBER {qber_mu:.4f} exceeds cap {cap:.4f}",
                     "qber")

    alice_key = a_bits[kept]
    corrected, parity_bits, verdicts = _alice_reconcile(
        chan, timer, config, alice_key, qber_mu)
    report.peak_memory_estimate = max(report.peak_memory_estimate,
                                      alice_key.nbytes + parity_bits * 8)

    with timer.measure("key_rate"):
        final_len = _final_length(cfg, sec, stats, config, corrected.size)
    chan.send(MsgType.FINAL_LENGTH, struct.pack("<Q", final_len))
    if final_len == 0:
        return b"", report

    with timer.measure("privacy_amplification"):
        seed = privamp.generate_seed(corrected.size, final_len, rng=rng)
        chan.send(MsgType.PA_SEED, _pack_bits(seed.bits))
        final_bits = privamp.hash_apply(corrected, seed)
    payload, _pad = privamp.key_to_bytes(final_bits)
    return payload, report


def _alice_statistics(cfg, sec, sequence, classes, basis_ok, signal, reveal,
                      a_bits, revealed_bits, y0_bg, duration_s):
    """Measured channel statistics from the matched-pair bookkeeping."""
    n_pulses = sequence.length
    k_mu, k_nu, k_vac = sequence.fractions
    sent_mu = k_mu * n_pulses
    sent_nu = k_nu * n_pulses
    sent_vac = k_vac * n_pulses

    n_mu = int((classes == 0).sum())
    n_nu = int((classes == 1).sum())
    n_vac = int((classes == 2).sum())
    q_mu = n_mu / max(sent_mu, 1.0)
    q_nu = n_nu / max(sent_nu, 1.0)
    y0 = n_vac / sent_vac if sent_vac > 0 else y0_bg

    rev_cls = classes[reveal]
    errors = a_bits[reveal] ^ revealed_bits
    def _rate(mask, default):
        total = int(mask.sum())
        return (int(errors[mask].sum()) / total if total else default), total

    e_mu, m_mu = _rate(rev_cls == 0, 0.5)
    e_nu, m_nu = _rate(rev_cls == 1, 0.5)
    e0, m_vac = _rate(rev_cls == 2, 0.5)

    sift_ratio = int((basis_ok & signal).sum()) / max(n_mu, 1)
    q_eff = sift_ratio * (1.0 - sec.reveal_fraction)
    cfg = dataclasses.replace(cfg, q=max(min(q_eff, 1.0), 1e-12),
                              k_mu=k_mu, k_nu=k_nu, k_vac=k_vac)
    stats = ChannelStatistics(
        q_mu=q_mu, q_nu=q_nu, e_mu=e_mu, e_nu=e_nu, y0=y0,
        e0_mu=e0, e0_nu=e0,
        n_mu=n_mu, n_nu=n_nu, n_vac=n_vac,
        sigma_q_mu=np.sqrt(max(n_mu, 1)) / max(sent_mu, 1.0),
        sigma_q_nu=np.sqrt(max(n_nu, 1)) / max(sent_nu, 1.0),
        sigma_e_mu=float(np.sqrt(e_mu * (1 - e_mu) / max(m_mu, 1))),
        sigma_e_nu=float(np.sqrt(e_nu * (1 - e_nu) / max(m_nu, 1))),
        sigma_y0=np.sqrt(max(n_vac, 1)) / max(sent_vac, 1.0),
        pulses_sent=n_pulses, duration_s=duration_s,
    )
    return (cfg, stats), e_mu


def _alice_reconcile(chan, timer, config, alice_key, qber):
    """Blockwise one-way reconciliation driving Bob's syndrome responses.

    Returns (concatenated corrected bits, total parity bits disclosed,
    per-block verdicts).  Failed blocks are discarded, not fatal.
    """
    qber = min(max(qber, 1e-4), 0.25)
    f_target = ldpc.default_efficiency(qber)
    blocks = ldpc.split_blocks(alice_key, config.block_size)
    chan.send(MsgType.LDPC_MATRIX,
              struct.pack("<I", len(blocks)) +
              (struct.pack("<I", blocks[0][0].size) if blocks else b""))

    corrected_parts = []
    verdicts = []
    parity_total = 0
    base_cache: dict[tuple[int, int], ldpc.ParityCheckMatrix] = {}
    for b_idx, (block, pad) in enumerate(blocks):
        n = block.size
        m0 = ldpc.choose_matrix_size(n, qber, f_target)
        if (n, m0) not in base_cache:
            with timer.measure("matrix_construction"):
                base_cache[n, m0] = ldpc.build_matrix(n, m0, seed=config.seed)
        mat = base_cache[n, m0]
        chan.send(MsgType.LDPC_MATRIX,
                  struct.pack("<BI", 0, b_idx) + ldpc.serialize_matrix(mat))
        syndrome = _unpack_bits(chan.expect(MsgType.SYNDROME, "syndrome").payload)
        result = None
        for attempt in range(config.max_augment + 1):
            if syndrome.size != mat.m:
                raise _abort(chan, "syndrome length mismatch", "syndrome")
            with timer.measure("decoding"):
                result = ldpc.sum_product_decode(mat, block, syndrome, qber,
                                                 config.max_decode_iters)
            if result.status == ldpc.DecodeStatus.SUCCESS or attempt == config.max_augment:
                break
            extra = max(int(round(0.1 * m0)), 1)
            with timer.measure("matrix_construction"):
                grown = ldpc.augment_matrix(mat, extra,
                                            seed=config.seed + 7919 * (attempt + 1))
            tail = ldpc.ParityCheckMatrix(n=grown.n, m=extra,
                                          rows=grown.rows[mat.m:])
            chan.send(MsgType.LDPC_MATRIX,
                      struct.pack("<BI", 1, b_idx) + ldpc.serialize_matrix(tail))
            extra_syn = _unpack_bits(chan.expect(MsgType.SYNDROME, "syndrome").payload)
            syndrome = np.concatenate([syndrome, extra_syn])
            mat = grown
        ok = result is not None and result.status == ldpc.DecodeStatus.SUCCESS
        verdicts.append(ok)
        if ok:
            parity_total += mat.m
            bits = result.corrected
            corrected_parts.append(bits[:n - pad] if pad else bits)
    chan.send(MsgType.EC_VERDICT,
              np.asarray(verdicts, dtype=np.uint8).tobytes())
    corrected = (np.concatenate(corrected_parts) if corrected_parts
                 else np.empty(0, dtype=np.uint8))
    return corrected, parity_total, verdicts


def _final_length(cfg, sec, cfg_stats, config, key_bits):
    full_cfg, stats = cfg_stats
    if key_bits < 2 or stats.n_mu <= 0:
        return 0
    result = finite_size_rate(full_cfg, stats, sec)
    if config.pa_length_policy == "asymptotic":
        length = int(result.r_inf * stats.pulses_sent)
    else:
        length = result.final_length_bits
    return max(min(length, key_bits - 1), 0)


def run_bob(sock, detections: BobDetections, config: SessionConfig,
            ) -> tuple[bytes, ResourceReport]:
    """Payload-side protocol role; returns (final key bytes, report).

    Every phase except the final hashing is linear in the number of
    detections plus the matrix edge count.
    """
    chan = FrameChannel(sock)
    report = ResourceReport(role="bob")
    timer = _Timer(report)
    try:
        return _bob_flow(chan, detections, config, report, timer)
    except ProtocolError:
        raise
    except UplinkQkdError as exc:
        raise _abort(chan, str(exc), "processing") from exc
    finally:
        report.bytes_sent = chan.bytes_sent
        report.bytes_received = chan.bytes_received


def _bob_flow(chan, detections, config, report, timer):
    chan.expect(MsgType.HELLO, "hello")
    chan.send(MsgType.HELLO, json.dumps(
        {"duration_s": detections.duration_s,
         "count": int(detections.tags.size)}).encode())

    with timer.measure("tag_encoding"):
        order = np.argsort(detections.tags, kind="stable")
        tags = detections.tags[order]
        dets = detections.detectors[order]
        keep = tags >= 0
        tags, dets = tags[keep], dets[keep]
        # outcome bits stay local: only the measurement basis crosses
        # the channel at this stage
        masked = dets & 0b10
        payload = encode_tags(tags, masked)
    report.peak_memory_estimate = max(report.peak_memory_estimate,
                                      tags.nbytes + dets.nbytes + len(payload))
    chan.send(MsgType.TIMETAGS, payload)

    frame = chan.expect(MsgType.BASES_SIFT_INDICES, "sift")
    kept_idx, pos = _unpack_u32(frame.payload)
    reveal_idx, _ = _unpack_u32(frame.payload, pos)
    bits = (dets & 1).astype(np.uint8)
    if (kept_idx.size and kept_idx.max() >= bits.size) or \
       (reveal_idx.size and reveal_idx.max() >= bits.size):
        raise _abort(chan, "sift index out of range", "sift")
    chan.send(MsgType.QBER_ESTIMATE, _pack_bits(bits[reveal_idx]))

    key = bits[kept_idx]
    head = chan.expect(MsgType.LDPC_MATRIX, "reconcile").payload
    (n_blocks,) = struct.unpack_from("<I", head, 0)
    block_len = struct.unpack_from("<I", head, 4)[0] if n_blocks else 0
    blocks = ldpc.split_blocks(key, block_len) if n_blocks else []
    if len(blocks) != n_blocks:
        raise _abort(chan, "block count mismatch", "reconcile")

    pending: list[Frame] = []

    def _next_frame() -> Frame:
        frame = pending.pop() if pending else chan.recv()
        if frame.msg_type == MsgType.ABORT:
            raise ProtocolError(
                f"peer aborted: {frame.payload.decode('utf-8', 'replace')}",
                "reconcile")
        return frame

    for b_idx, (block, pad) in enumerate(blocks):
        frame = _next_frame()
        if frame.msg_type != MsgType.LDPC_MATRIX or len(frame.payload) < 5:
            raise _abort(chan, "unexpected frame during reconciliation", "reconcile")
        kind, got_idx = struct.unpack_from("<BI", frame.payload, 0)
        if kind != 0 or got_idx != b_idx:
            raise _abort(chan, "unexpected matrix frame ordering", "reconcile")
        mat = ldpc.deserialize_matrix(frame.payload[5:])
        if mat.n != block.size:
            raise _abort(chan, "matrix size does not match block", "reconcile")
        with timer.measure("syndrome"):
            syn = ldpc.compute_syndrome(mat, block)
        chan.send(MsgType.SYNDROME, _pack_bits(syn))
        # augmentation tails for this block arrive zero or more times
        # before the next block's base matrix (or the verdict)
        while True:
            frame = _next_frame()
            if frame.msg_type == MsgType.LDPC_MATRIX and len(frame.payload) >= 5:
                kind, got_idx = struct.unpack_from("<BI", frame.payload, 0)
                if kind == 1 and got_idx == b_idx:
                    tail = ldpc.deserialize_matrix(frame.payload[5:])
                    with timer.measure("syndrome"):
                        syn = ldpc.compute_syndrome(tail, block)
                    chan.send(MsgType.SYNDROME, _pack_bits(syn))
                    continue
            pending.append(frame)
            break
    verdict_frame = _next_frame()
    if verdict_frame.msg_type != MsgType.EC_VERDICT:
        raise _abort(chan, "expected reconciliation verdict", "verdict")
    per_block_bits = blocks

    verdicts = np.frombuffer(verdict_frame.payload, dtype=np.uint8)
    if verdicts.size != len(blocks):
        raise _abort(chan, "verdict count mismatch", "verdict")
    kept_parts = [blk[:blk.size - pad] if pad else blk
                  for ok, (blk, pad) in zip(verdicts, per_block_bits) if ok]
    ec_key = (np.concatenate(kept_parts) if kept_parts
              else np.empty(0, dtype=np.uint8))

    (final_len,) = struct.unpack(
        "<Q", chan.expect(MsgType.FINAL_LENGTH, "final").payload)
    if final_len == 0:
        return b"", report
    seed_bits = _unpack_bits(chan.expect(MsgType.PA_SEED, "pa").payload)
    with timer.measure("privacy_amplification"):
        seed = privamp.generate_seed(ec_key.size, int(final_len), bits=seed_bits)
        final_bits = privamp.hash_apply(ec_key, seed)
    payload, _pad = privamp.key_to_bytes(final_bits)
    return payload, report


def run_session_pair(sequence: PulseSequence, detections: BobDetections,
                     config: SessionConfig):
    """Run both roles over a local socket pair in two threads.

    Returns (alice_key, bob_key, alice_report, bob_report); protocol
    errors from either side propagate to the caller.
    """
    import socket
    import threading

    a_sock, b_sock = socket.socketpair()
    results: dict[str, object] = {}
    errors: dict[str, BaseException] = {}

    def _run(name, fn, *args):
        try:
            results[name] = fn(*args)
        except BaseException as exc:  # re-raised in the caller
            errors[name] = exc

    t_bob = threading.Thread(target=_run, args=("bob", run_bob, b_sock,
                                                detections, config))
    t_bob.start()
    _run("alice", run_alice, a_sock, sequence, config)
    # close Alice's endpoint before joining: if her role died without
    # managing to send an abort frame, the EOF unblocks Bob's read
    a_sock.close()
    t_bob.join()
    b_sock.close()
    if "alice" in errors:
        raise errors["alice"]
    if "bob" in errors:
        raise errors["bob"]
    alice_key, alice_report = results["alice"]
    bob_key, bob_report = results["bob"]
    return alice_key, bob_key, alice_report, bob_report


def fit_polynomial(x, y, degree: int) -> tuple[np.ndarray, float]:
    """Least-squares polynomial fit returning (coefficients, R^2)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size <= degree:
        raise DomainError("not enough points for the requested degree")
    coeffs = np.polyfit(x, y, degree)
    pred = np.polyval(coeffs, x)
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return coeffs, r2
