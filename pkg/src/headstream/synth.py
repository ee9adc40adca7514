"""Deterministic synthetic shifted streams with known ground truth.

Anchors are random unit directions; the true prototypes are the anchors
displaced toward independent random directions by a controllable severity.
Samples are noisy copies of their class prototype, renormalized, with
optional extra noisy views per sample and an optional mid-stream switch to a
second, independent displacement (a domain switch).

All randomness comes from the counter-based Philox 4x64 generator, so a
config reproduces its stream byte-for-byte anywhere.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, DataError, FormatError, StateError
from .head import Anchors
from .stream_io import SampleRecord, StreamWriter

TRUTH_MAGIC = b"ULG1"
TRUTH_VERSION = 1
_TRUTH_HEADER = struct.Struct("<4sIIIIQIQQdddd")
_GEN_CHUNK = 4096


@dataclass(frozen=True)
class SynthConfig:
    C: int
    d: int
    N: int
    K: int = 1
    seed: int = 0
    shift: float = 0.0
    noise_sigma: float = 0.0
    view_sigma: float = 0.0
    true_prior_concentration: Optional[float] = None  # None or inf = uniform
    switch_at: Optional[int] = None

    def __post_init__(self):
        if self.C < 2:
            raise ConfigError(f"C must be >= 2, got {self.C}")
        if self.d < 2:
            raise ConfigError(f"d must be >= 2, got {self.d}")
        if self.N < 0:
            raise ConfigError(f"N must be nonnegative, got {self.N}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.seed < 0:
            raise ConfigError(f"seed must be nonnegative, got {self.seed}")
        if not (0.0 <= self.shift <= 1.0):
            raise ConfigError(f"shift must lie in [0, 1], got {self.shift}")
        if self.noise_sigma < 0.0:
            raise ConfigError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")
        if self.view_sigma < 0.0:
            raise ConfigError(f"view_sigma must be nonnegative, got {self.view_sigma}")
        conc = self.true_prior_concentration
        if conc is not None and not math.isinf(conc) and conc <= 0.0:
            raise ConfigError(
                f"true_prior_concentration must be positive, got {conc}"
            )
        if self.switch_at is not None and not (0 <= self.switch_at < self.N):
            raise ConfigError(
                f"switch_at must lie in [0, N), got {self.switch_at}"
            )

    @property
    def uniform_prior(self) -> bool:
        c = self.true_prior_concentration
        return c is None or math.isinf(c)


@dataclass
class SynthTruth:
    """Ground truth behind a generated stream."""

    prototypes: np.ndarray                      # (C, d) phase-1 true prototypes
    prior: np.ndarray                           # (C,) true class prior
    config: SynthConfig
    prototypes_after_switch: Optional[np.ndarray] = None


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def generate(config: SynthConfig) -> tuple[Anchors, SynthTruth, Iterator[SampleRecord]]:
    """Build (anchors, truth, lazy labeled record stream) for a config.

    The record iterator draws noise in fixed-size chunks; the draw order is
    part of the format, so identical configs yield identical streams.
    """
    rng = _rng(config.seed)
    C, d = config.C, config.d
    mu = _unit_rows(rng.normal(size=(C, d)))
    u1 = _unit_rows(rng.normal(size=(C, d)))
    t1 = _unit_rows((1.0 - config.shift) * mu + config.shift * u1)
    t2 = None
    if config.switch_at is not None:
        u2 = _unit_rows(rng.normal(size=(C, d)))
        t2 = _unit_rows((1.0 - config.shift) * mu + config.shift * u2)
    if config.uniform_prior:
        pi = np.full(C, 1.0 / C)
    else:
        pi = rng.dirichlet(np.full(C, float(config.true_prior_concentration)))
    labels = rng.choice(C, size=config.N, p=pi) if config.N else np.zeros(0, dtype=np.int64)

    anchors = Anchors(mu)
    truth = SynthTruth(prototypes=t1, prior=pi, config=config, prototypes_after_switch=t2)

    def records() -> Iterator[SampleRecord]:
        for start in range(0, config.N, _GEN_CHUNK):
            stop = min(start + _GEN_CHUNK, config.N)
            y = labels[start:stop]
            m = stop - start
            proto = t1[y]
            if t2 is not None and stop > config.switch_at:
                switched = (np.arange(start, stop) >= config.switch_at)
                proto = np.where(switched[:, None], t2[y], proto)
            base = _unit_rows(proto + config.noise_sigma * rng.normal(size=(m, d)))
            if config.K > 1:
                extra = _unit_rows(
                    base[:, None, :]
                    + config.view_sigma * rng.normal(size=(m, config.K - 1, d))
                )
                views = np.concatenate([base[:, None, :], extra], axis=1)
            else:
                views = base[:, None, :]
            views32 = views.astype(np.float32)
            for i in range(m):
                yield SampleRecord(views=views32[i], label=int(y[i]))

    return anchors, truth, records()


def write_synth(
    config: SynthConfig, stream_path, truth_path=None
) -> tuple[Anchors, SynthTruth]:
    """Generate and persist a stream plus its ground-truth sidecar."""
    anchors, truth, records = generate(config)
    with StreamWriter(stream_path, anchors, views=config.K, labeled=True) as w:
        for rec in records:
            w.write(rec)
    if truth_path is not None:
        write_truth(truth_path, truth)
    return anchors, truth


def write_truth(path, truth: SynthTruth) -> None:
    cfg = truth.config
    flags = 0x1 if truth.prototypes_after_switch is not None else 0
    conc = cfg.true_prior_concentration
    conc_f = math.inf if conc is None else float(conc)
    with open(path, "wb") as f:
        f.write(
            _TRUTH_HEADER.pack(
                TRUTH_MAGIC, TRUTH_VERSION, cfg.C, cfg.d, cfg.K, cfg.N, flags,
                cfg.switch_at or 0, cfg.seed,
                cfg.shift, cfg.noise_sigma, cfg.view_sigma, conc_f,
            )
        )
        f.write(np.ascontiguousarray(truth.prior, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(truth.prototypes, dtype="<f8").tobytes())
        if truth.prototypes_after_switch is not None:
            f.write(
                np.ascontiguousarray(truth.prototypes_after_switch, dtype="<f8").tobytes()
            )


def read_truth(path) -> SynthTruth:
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read(_TRUTH_HEADER.size)
        if len(raw) < _TRUTH_HEADER.size:
            raise FormatError(f"{path}: too short for a ULG1 header")
        (magic, version, C, d, K, N, flags, switch_at, seed,
         shift, noise_sigma, view_sigma, conc) = _TRUTH_HEADER.unpack(raw)
        if magic != TRUTH_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != TRUTH_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        config = SynthConfig(
            C=C, d=d, N=N, K=K, seed=seed, shift=shift,
            noise_sigma=noise_sigma, view_sigma=view_sigma,
            true_prior_concentration=None if math.isinf(conc) else conc,
            switch_at=switch_at if flags & 0x1 else None,
        )
        def read_array(count: int, what: str) -> np.ndarray:
            raw_bytes = f.read(count * 8)
            if len(raw_bytes) < count * 8:
                raise FormatError(f"{path}: truncated {what}")
            return np.frombuffer(raw_bytes, dtype="<f8").copy()

        pi = read_array(C, "prior")
        t1 = read_array(C * d, "prototypes").reshape(C, d)
        t2 = None
        if flags & 0x1:
            t2 = read_array(C * d, "post-switch prototypes").reshape(C, d)
    return SynthTruth(prototypes=t1, prior=pi, config=config, prototypes_after_switch=t2)


def oracle_accuracy(t_star: np.ndarray, pi_star: np.ndarray, records) -> float:
    """Accuracy of the ground-truth head (temperature 1, true prototypes,
    true prior) over a labeled stream; the ceiling adaptation is measured
    against."""
    t_star = np.asarray(t_star, dtype=np.float64)
    log_pi = np.log(np.asarray(pi_star, dtype=np.float64))
    n = 0
    correct = 0
    for rec in records:
        if rec.label is None:
            raise StateError("oracle accuracy needs a labeled stream")
        z = rec.views[0].astype(np.float64)
        z /= np.linalg.norm(z)
        logits = t_star @ z + log_pi
        correct += int(int(np.argmax(logits)) == rec.label)
        n += 1
    if n == 0:
        raise StateError("oracle accuracy needs a nonempty stream")
    return correct / n
