"""End-to-end streaming loop: score, gate, accumulate, periodic closed-form
updates with guards, prequential metrics, and session persistence.

The loop is strictly single-pass and predict-then-update: every labeled
sample is evaluated with the state as it stood before that sample could
contribute evidence. State mutation happens only inside the update block,
every ``batch_size`` accepted samples.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import ConfigError, FormatError, InvariantError
from .gate import GateConfig, GateWindow, accept
from .head import (
    Anchors,
    HeadState,
    calibrated_probs_from_cosines,
    init_state,
    score,
    validate_state,
)
from .metrics import MetricsAccumulator, MetricsReport
from .stream_io import SampleRecord
from .temperature import TempConfig, ema_clamp, minimize_tau, update_tau_cal
from .updates import (
    BatchBuffer,
    UpdateConfig,
    accumulate,
    kl,
    prior_update,
    prototype_update,
    responsibilities,
    sync_accumulators,
)

STATE_MAGIC = b"ULH1"
STATE_VERSION = 1
_STATE_HEADER = struct.Struct("<4sIIIIddQQ")

ABLATION_NAMES = (
    "gate_off",
    "freeze_prototypes",
    "freeze_prior",
    "single_tau",
    "single_tau_fixed",
    "guards_off",
)


@dataclass(frozen=True)
class Ablations:
    """Independent switches mirroring the ablation grid.

    ``single_tau`` couples the calibration temperature to the prediction
    temperature (one adaptive temperature for both roles); adding
    ``single_tau_fixed`` instead pins both at their initial value, which is
    the reading under which a fully frozen run reproduces the zero-shot head
    exactly.
    """

    gate_off: bool = False
    freeze_prototypes: bool = False
    freeze_prior: bool = False
    single_tau: bool = False
    single_tau_fixed: bool = False
    guards_off: bool = False

    def __post_init__(self):
        if self.single_tau_fixed and not self.single_tau:
            raise ConfigError("single_tau_fixed requires single_tau")


@dataclass(frozen=True)
class EngineConfig:
    gate: GateConfig = field(default_factory=GateConfig)
    update: UpdateConfig = field(default_factory=UpdateConfig)
    temp: TempConfig = field(default_factory=TempConfig)
    ablations: Ablations = field(default_factory=Ablations)
    prior0: Optional[np.ndarray] = None
    metrics_probs: str = "cal"  # which probabilities feed the calibration metrics
    validate_each_update: bool = True
    trace: bool = False  # collect per-sample records into RunResult.trace
    persist_path: Optional[str] = None  # save the session here after the run

    def __post_init__(self):
        if self.metrics_probs not in ("cal", "pred"):
            raise ConfigError(f"metrics_probs must be 'cal' or 'pred', got {self.metrics_probs!r}")


@dataclass
class Session:
    """Mutable engine state that survives across runs (resume support)."""

    state: HeadState
    window: GateWindow
    buffer: BatchBuffer


@dataclass
class RunResult:
    report: MetricsReport
    state: HeadState
    summary: dict
    session: Session
    trace: Optional[list] = None  # populated when EngineConfig.trace is set


def _new_session(anchors: Anchors, config: EngineConfig) -> Session:
    state = init_state(anchors, config)
    return Session(
        state=state,
        window=GateWindow(config.gate.window_len),
        buffer=BatchBuffer(config.update.batch_size, anchors.dim, anchors.n_classes),
    )


def _check_invariants(
    state: HeadState,
    anchors: Anchors,
    config: EngineConfig,
    *,
    prior_kl: Optional[float] = None,
    anchor_dist: Optional[float] = None,
) -> None:
    guards_on = not config.ablations.guards_off
    validate_state(
        state,
        alpha=config.update.alpha,
        tau_min=config.temp.tau_min if guards_on else None,
        tau_max=config.temp.tau_max if guards_on else None,
    )
    if guards_on:
        if prior_kl is None:
            prior_kl = kl(state.pi, state.pi0)
        if prior_kl > config.update.kappa + 1e-6:
            raise InvariantError(f"prior KL {prior_kl:.6g} exceeds the cap")
        if anchor_dist is None:
            anchor_dist = float(np.linalg.norm(state.prototypes - anchors.mu, axis=1).max())
        if anchor_dist > config.update.rho + 1e-6:
            raise InvariantError(f"prototype left the anchor ball: {anchor_dist:.6g}")


def _update_block(
    state: HeadState,
    buf: BatchBuffer,
    anchors: Anchors,
    config: EngineConfig,
) -> tuple[float, float, float]:
    """One M-step block. Returns (prior_kl, max_proto_step, max_anchor_dist)."""
    ab = config.ablations
    u64 = sync_accumulators(state, buf)
    t_before = state.prototypes
    if not ab.freeze_prototypes:
        prototype_update(state, config.update, anchors, clip=not ab.guards_off, u64=u64)
    if not ab.freeze_prior:
        prior_update(state, buf, config.update, apply_guard=not ab.guards_off)
    if not (ab.single_tau and ab.single_tau_fixed):
        cos = buf.Z[: buf.count] @ state.prototypes.T
        tau_hat = minimize_tau(cos, state.log_pi, config.temp)
        if ab.guards_off:
            state.tau_pred = max(tau_hat, 1e-3)  # floor avoids division blow-ups
        else:
            state.tau_pred = ema_clamp(state.tau_pred, tau_hat, config.temp)
        if ab.single_tau:
            state.tau_cal = state.tau_pred
        else:
            state.tau_cal = update_tau_cal(state, config.temp)
    state.update_count += 1
    prior_kl = kl(state.pi, state.pi0)
    if state.prototypes is t_before:  # frozen prototypes: nothing moved
        proto_step = 0.0
        anchor_dist = float(np.linalg.norm(state.prototypes - anchors.mu, axis=1).max())
    else:
        diff = state.prototypes - t_before
        proto_step = float(np.sqrt(np.einsum("ij,ij->i", diff, diff).max()))
        np.subtract(state.prototypes, anchors.mu, out=diff)
        anchor_dist = float(np.sqrt(np.einsum("ij,ij->i", diff, diff).max()))
    buf.clear()
    if config.validate_each_update:
        _check_invariants(state, anchors, config, prior_kl=prior_kl, anchor_dist=anchor_dist)
    return prior_kl, proto_step, anchor_dist


def run_stream(
    anchors: Anchors,
    records: Iterable[SampleRecord],
    config: Optional[EngineConfig] = None,
    *,
    session: Optional[Session] = None,
    trace_sink: Optional[Callable[[dict], None]] = None,
) -> RunResult:
    """Consume a record stream once, adapting the head as configured.

    ``session`` resumes a previous run (state, gate window, and batch buffer
    carry over); ``trace_sink`` receives one dict per sample.
    """
    config = config or EngineConfig()
    if session is None:
        session = _new_session(anchors, config)
    state, window, buf = session.state, session.window, session.buffer
    if state.n_classes != anchors.n_classes or state.dim != anchors.dim:
        raise ConfigError("session state does not match the anchor dimensions")

    collected: Optional[list] = None
    if config.trace and trace_sink is None:
        collected = []
        trace_sink = collected.append

    metrics = MetricsAccumulator()
    ab = config.ablations
    q = config.gate.quantile
    warmup = config.gate.warmup
    batch_size = config.update.batch_size
    want_cal = config.metrics_probs == "cal"
    current_kl = kl(state.pi, state.pi0)
    n_seen = 0
    cal_scratch = np.empty(anchors.n_classes)

    for rec in records:
        views = np.atleast_2d(rec.views.astype(np.float64))
        views /= np.linalg.norm(views, axis=1, keepdims=True)
        z0 = views[0]
        scored = score(state, z0)

        probs_out = None
        if rec.label is not None or trace_sink is not None:
            if want_cal and state.tau_cal != state.tau_pred:
                probs_out = calibrated_probs_from_cosines(state, scored.cosines, cal_scratch)
            else:
                probs_out = scored.probs_pred
        if rec.label is not None:
            metrics.record_prediction(probs_out, scored.pred_class, rec.label)

        window.observe(scored.entropy, scored.margin)
        if ab.gate_off:
            accepted = window.count > warmup
        else:
            eps_h, eps_m = window.thresholds(q)
            accepted = accept(scored, eps_h, eps_m, window.count, warmup)

        if accepted:
            if views.shape[0] == 1:
                r = scored.probs_pred  # single view: responsibilities reduce to it
            else:
                r = responsibilities(state, views)
            accumulate(state, buf, r, z0, config.update, anchors)
            state.accepted_count += 1
            if buf.count >= batch_size:
                current_kl, proto_step, anchor_dist = _update_block(
                    state, buf, anchors, config
                )
                metrics.record_drift(current_kl, proto_step, anchor_dist)

        if trace_sink is not None:
            trace_sink(
                {
                    "index": n_seen,
                    "pred": scored.pred_class,
                    "label": rec.label,
                    "confidence": float(probs_out.max()),
                    "accepted": accepted,
                    "kl": current_kl,
                    "tau_pred": state.tau_pred,
                }
            )
        n_seen += 1

    sync_accumulators(state, buf)
    report = metrics.finalize() if metrics.n_eval > 0 else MetricsReport.empty()
    summary = {
        "n_seen": n_seen,
        "accepted_count": state.accepted_count,
        "update_count": state.update_count,
        "final_tau_pred": state.tau_pred,
        "final_tau_cal": state.tau_cal,
        "final_prior_kl": kl(state.pi, state.pi0),
        "final_max_anchor_dist": float(
            np.linalg.norm(state.prototypes - anchors.mu, axis=1).max()
        ),
        "final_pi": [float(x) for x in state.pi],
    }
    result = RunResult(
        report=report, state=state, summary=summary, session=session, trace=collected
    )
    if config.persist_path is not None:
        save_session(config.persist_path, session)
    return result


def run_zero_shot(
    anchors: Anchors,
    records: Iterable[SampleRecord],
    config: Optional[EngineConfig] = None,
    *,
    trace_sink: Optional[Callable[[dict], None]] = None,
) -> RunResult:
    """Frozen baseline: the anchor head scores and is never updated.

    Implemented as the fully frozen ablation of :func:`run_stream`, so the
    two are trace-identical by construction.
    """
    base = config or EngineConfig()
    frozen = replace(
        base,
        ablations=Ablations(
            gate_off=base.ablations.gate_off,
            freeze_prototypes=True,
            freeze_prior=True,
            single_tau=True,
            single_tau_fixed=True,
            guards_off=False,
        ),
    )
    return run_stream(anchors, records, frozen, trace_sink=trace_sink)


# --- persistence -----------------------------------------------------------

def _pack_array(f, arr: np.ndarray, dtype: str) -> None:
    f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def save_session(path, session: Session) -> None:
    """Persist head state plus gate window and batch buffer, so a split
    stream replays exactly like an unsplit one."""
    state, window, buf = session.state, session.window, session.buffer
    if buf.pending:
        sync_accumulators(state, buf)
    C, d = state.n_classes, state.dim
    items = window.items()
    with open(path, "wb") as f:
        f.write(
            _STATE_HEADER.pack(
                STATE_MAGIC, STATE_VERSION, C, d, 0x3,
                state.tau_pred, state.tau_cal,
                state.accepted_count, state.update_count,
            )
        )
        _pack_array(f, state.prototypes, "<f8")
        _pack_array(f, state.pi, "<f8")
        _pack_array(f, state.pi0, "<f8")
        _pack_array(f, state.U, "<f4")
        _pack_array(f, state.N, "<f8")
        # gate window section
        f.write(struct.pack("<IQI", window.capacity, window.count, len(items)))
        for e, m in items:
            f.write(struct.pack("<dd", e, m))
        # batch buffer section
        f.write(struct.pack("<II", buf.capacity, buf.count))
        _pack_array(f, buf.Z[: buf.count], "<f8")
        _pack_array(f, buf.R[: buf.count], "<f8")
        _pack_array(f, buf.soft_counts, "<f8")
        f.write(struct.pack("<d", buf.total_soft))


def save_state(state: HeadState, path) -> None:
    """Persist just the head state (no gate window or batch buffer)."""
    dummy = Session(
        state=state,
        window=GateWindow(8),
        buffer=BatchBuffer(1, state.dim, state.n_classes),
    )
    dummy.window.count = 0
    save_session(path, dummy)


def _read_exact(f, n: int, path, what: str) -> bytes:
    raw = f.read(n)
    if len(raw) < n:
        raise FormatError(f"{path}: truncated {what}")
    return raw


def load_session(path) -> Session:
    path = Path(path)
    with open(path, "rb") as f:
        raw = _read_exact(f, _STATE_HEADER.size, path, "header")
        magic, version, C, d, flags, tau_pred, tau_cal, acc, upd = _STATE_HEADER.unpack(raw)
        if magic != STATE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {STATE_MAGIC!r}")
        if version != STATE_VERSION:
            raise FormatError(f"{path}: unsupported state version {version}")
        protos = np.frombuffer(_read_exact(f, C * d * 8, path, "prototypes"), "<f8").reshape(C, d).copy()
        pi = np.frombuffer(_read_exact(f, C * 8, path, "prior"), "<f8").copy()
        pi0 = np.frombuffer(_read_exact(f, C * 8, path, "reference prior"), "<f8").copy()
        U = np.frombuffer(_read_exact(f, C * d * 4, path, "U"), "<f4").reshape(C, d).copy()
        N = np.frombuffer(_read_exact(f, C * 8, path, "N"), "<f8").copy()
        state = HeadState(
            prototypes=protos, pi=pi, pi0=pi0,
            tau_pred=tau_pred, tau_cal=tau_cal,
            U=U, N=N, accepted_count=acc, update_count=upd,
        )
        cap, seen, n_items = struct.unpack("<IQI", _read_exact(f, 16, path, "window header"))
        window = GateWindow(cap)
        for _ in range(n_items):
            e, m = struct.unpack("<dd", _read_exact(f, 16, path, "window entry"))
            window.observe(e, m)
        window.count = seen
        bcap, bcount = struct.unpack("<II", _read_exact(f, 8, path, "buffer header"))
        buf = BatchBuffer(bcap, d, C)
        if bcount:
            buf.Z[:bcount] = np.frombuffer(
                _read_exact(f, bcount * d * 8, path, "buffer Z"), "<f8"
            ).reshape(bcount, d)
            buf.R[:bcount] = np.frombuffer(
                _read_exact(f, bcount * C * 8, path, "buffer R"), "<f8"
            ).reshape(bcount, C)
        buf.count = bcount
        buf.mark_synced()  # pending rows were folded before save
        buf.soft_counts = np.frombuffer(_read_exact(f, C * 8, path, "soft counts"), "<f8").copy()
        (buf.total_soft,) = struct.unpack("<d", _read_exact(f, 8, path, "soft total"))
    return Session(state=state, window=window, buffer=buf)


def load_state(path) -> HeadState:
    """Load just the head state from a persisted session file."""
    return load_session(path).state
