"""Streaming adaptation of frozen-embedding classifier heads.

Only the logit-level parameters adapt: class prototypes anchored to their
initial directions, a KL-capped class prior, and decoupled prediction and
calibration temperatures, all updated in closed form from gated samples in
a single pass over the stream.
"""

from .engine import (
    Ablations,
    EngineConfig,
    RunResult,
    Session,
    load_session,
    load_state,
    run_stream,
    run_zero_shot,
    save_session,
    save_state,
)
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    HeadstreamError,
    InvariantError,
    StateError,
)
from .gate import GateConfig, GateWindow, accept
from .head import (
    Anchors,
    HeadState,
    ScoredSample,
    calibrated_probs,
    init_state,
    score,
)
from .metrics import MetricsAccumulator, MetricsReport
from .stream_io import SampleRecord, StreamReader, StreamWriter, open_stream, read_stream, write_stream
from .synth import SynthConfig, SynthTruth, generate, oracle_accuracy, read_truth, write_synth
from .temperature import TempConfig, ema_clamp, entropy_objective, minimize_tau, update_tau_cal
from .updates import (
    BatchBuffer,
    UpdateConfig,
    accumulate,
    kl,
    kl_guard,
    prior_update,
    prototype_update,
    responsibilities,
    sync_accumulators,
)

__version__ = "0.1.0"

__all__ = [
    "Ablations", "Anchors", "BatchBuffer", "ConfigError", "DataError",
    "EngineConfig", "FormatError", "GateConfig", "GateWindow", "HeadState",
    "HeadstreamError", "InvariantError", "MetricsAccumulator", "MetricsReport",
    "RunResult", "SampleRecord", "ScoredSample", "Session", "StateError",
    "StreamReader", "StreamWriter", "SynthConfig", "SynthTruth", "TempConfig",
    "UpdateConfig", "accept", "accumulate", "calibrated_probs", "ema_clamp",
    "entropy_objective", "generate", "init_state", "kl", "kl_guard",
    "load_session", "load_state", "minimize_tau", "open_stream",
    "oracle_accuracy", "prior_update", "prototype_update", "read_stream",
    "read_truth", "responsibilities", "run_stream", "run_zero_shot",
    "save_session", "save_state", "score", "sync_accumulators",
    "update_tau_cal", "write_stream", "write_synth",
]
