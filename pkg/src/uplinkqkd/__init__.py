"""Decoy-state BB84 post-processing stack and high-loss channel simulator."""

from .keyrate import (
    ChannelStatistics,
    KeyRateResult,
    SecurityParams,
    SourceConfig,
    asymptotic_rate,
    binary_entropy,
    finite_size_rate,
    single_photon_gain_lb,
    single_photon_qber_ub,
)
from .source import (
    Basis,
    IntensityClass,
    PulseSequence,
    PulseState,
    generate_sequence,
)
from .channel import (
    LossProfile,
    ReceiverModel,
    RunRecord,
    combine_passes,
    select_pass_blocks,
    simulate_run,
)
from .timesync import (
    CoincidenceResult,
    PulseGrid,
    SiftRecord,
    coincidence_search,
    estimate_qber,
    sift,
    temporal_filter,
)
from .ldpc import (
    DecodeResult,
    DecodeStatus,
    ParityCheckMatrix,
    build_matrix,
    compute_syndrome,
    sum_product_decode,
)
from .privamp import (
    HashSeed,
    dense_oracle,
    final_key_length,
    generate_seed,
    hash_apply,
)
from .session import (
    BobDetections,
    FrameChannel,
    MsgType,
    ResourceReport,
    SessionConfig,
    decode_tags,
    encode_tags,
    run_alice,
    run_bob,
    run_session_pair,
)

__version__ = "0.1.0"

__all__ = [
    "ChannelStatistics",
    "KeyRateResult",
    "SecurityParams",
    "SourceConfig",
    "asymptotic_rate",
    "binary_entropy",
    "finite_size_rate",
    "single_photon_gain_lb",
    "single_photon_qber_ub",
    "Basis",
    "IntensityClass",
    "PulseSequence",
    "PulseState",
    "generate_sequence",
    "LossProfile",
    "ReceiverModel",
    "RunRecord",
    "combine_passes",
    "select_pass_blocks",
    "simulate_run",
    "CoincidenceResult",
    "PulseGrid",
    "SiftRecord",
    "coincidence_search",
    "estimate_qber",
    "sift",
    "temporal_filter",
    "DecodeResult",
    "DecodeStatus",
    "ParityCheckMatrix",
    "build_matrix",
    "compute_syndrome",
    "sum_product_decode",
    "HashSeed",
    "dense_oracle",
    "final_key_length",
    "generate_seed",
    "hash_apply",
    "BobDetections",
    "FrameChannel",
    "MsgType",
    "ResourceReport",
    "SessionConfig",
    "decode_tags",
    "encode_tags",
    "run_alice",
    "run_bob",
    "run_session_pair",
    "__version__",
]
