"""Confidence-gated diffusion decoding engine with exactly solvable oracles."""

from ccd.core import (
    Distribution,
    SequenceState,
    Vocabulary,
    apply_temperature,
    confidence,
    entropy,
    top_v_positions,
)
from ccd.sampler import (
    DecodeResult,
    DecodeStep,
    OraclePredictor,
    SamplerConfig,
    block_decode,
    decode,
    read_trace,
    validate_trace_legality,
    write_trace,
)

__all__ = [
    "DecodeResult",
    "DecodeStep",
    "Distribution",
    "OraclePredictor",
    "SamplerConfig",
    "SequenceState",
    "Vocabulary",
    "apply_temperature",
    "block_decode",
    "confidence",
    "decode",
    "entropy",
    "read_trace",
    "top_v_positions",
    "validate_trace_legality",
    "write_trace",
]

__version__ = "0.1.0"
