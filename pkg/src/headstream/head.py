"""Adaptable scoring head: class prototypes, class prior, two temperatures.

Scoring is a pure function of (state, embedding). All mutation happens in
the update layer under the engine's exclusive-write contract, so a state
snapshot can be scored concurrently.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from .errors import ConfigError, DataError, InvariantError

if TYPE_CHECKING:  # pragma: no cover
    from .engine import EngineConfig

ANCHOR_NORM_TOL = 1e-6
INPUT_NORM_TOL = 1e-4
PRIOR_SUM_TOL = 1e-9


@dataclass(frozen=True)
class Anchors:
    """Unit-norm class anchor matrix, one row per class."""

    mu: np.ndarray
    class_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        mu = np.ascontiguousarray(np.asarray(self.mu, dtype=np.float64))
        object.__setattr__(self, "mu", mu)
        if mu.ndim != 2:
            raise ConfigError("anchor matrix must be 2-D (classes x dim)")
        n_classes, dim = mu.shape
        if n_classes < 2 or dim < 2:
            raise ConfigError(
                f"anchors need at least 2 classes and 2 dimensions, got {mu.shape}"
            )
        if not np.all(np.isfinite(mu)):
            raise ConfigError("anchor matrix contains non-finite values")
        norms = np.linalg.norm(mu, axis=1)
        worst = float(np.abs(norms - 1.0).max())
        if worst > ANCHOR_NORM_TOL:
            raise ConfigError(
                f"anchor rows must be unit-norm within {ANCHOR_NORM_TOL}, "
                f"worst deviation {worst:.3g}"
            )
        if self.class_names is not None:
            names = tuple(self.class_names)
            if len(names) != n_classes:
                raise ConfigError("class_names length does not match anchor rows")
            object.__setattr__(self, "class_names", names)

    @property
    def n_classes(self) -> int:
        return self.mu.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]


@dataclass
class HeadState:
    """The adaptable triple (prototypes, prior, temperatures) plus evidence
    accumulators.

    ``U`` is stored as float32: it mirrors the float32 stream payload and
    halves the head's persistent footprint; all arithmetic on it is done in
    float64 at update time.
    """

    prototypes: np.ndarray  # (C, d) float64, rows unit-norm
    pi: np.ndarray          # (C,) float64, strictly positive, sums to 1
    pi0: np.ndarray         # (C,) float64 reference prior
    tau_pred: float
    tau_cal: float
    U: np.ndarray           # (C, d) float32 evidence accumulator
    N: np.ndarray           # (C,) float64 soft-count accumulator, >= alpha
    accepted_count: int = 0
    update_count: int = 0
    _log_pi: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._log_pi = np.log(self.pi)

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    @property
    def log_pi(self) -> np.ndarray:
        return self._log_pi

    def set_prior(self, pi: np.ndarray) -> None:
        """Install a new class prior, keeping the cached log in sync."""
        pi = np.asarray(pi, dtype=np.float64)
        if pi.shape != self.pi.shape:
            raise ConfigError("prior length does not match class count")
        if np.any(pi <= 0.0):
            raise DataError("prior must be strictly positive")
        if abs(float(pi.sum()) - 1.0) > PRIOR_SUM_TOL:
            raise DataError("prior must sum to 1")
        self.pi = pi
        self._log_pi = np.log(pi)


@dataclass(frozen=True)
class ScoredSample:
    """Pure scoring output for one embedding under a state snapshot."""

    logits: np.ndarray      # (C,)
    probs_pred: np.ndarray  # (C,) softmax under tau_pred
    entropy: float          # nats
    margin: float           # top-1 minus top-2 logit, >= 0
    pred_class: int
    cosines: np.ndarray     # (C,) raw <z, t_c>, kept for cheap recalibration


def init_state(anchors: Anchors, config: "EngineConfig") -> HeadState:
    """Build the initial head: prototypes at the anchors, reference prior,
    accumulators seeded with the anchor prior mass."""
    alpha = config.update.alpha
    tau0 = config.temp.tau_init
    n_classes = anchors.n_classes
    if config.prior0 is not None:
        pi0 = np.asarray(config.prior0, dtype=np.float64)
        if pi0.shape != (n_classes,):
            raise ConfigError(
                f"prior0 has length {pi0.shape}, anchors have {n_classes} classes"
            )
        if np.any(pi0 <= 0.0) or abs(float(pi0.sum()) - 1.0) > PRIOR_SUM_TOL:
            raise ConfigError("prior0 must be strictly positive and sum to 1")
        pi0 = pi0.copy()
    else:
        pi0 = np.full(n_classes, 1.0 / n_classes)
    return HeadState(
        prototypes=anchors.mu.copy(),
        pi=pi0.copy(),
        pi0=pi0,
        tau_pred=tau0,
        tau_cal=tau0,
        U=(alpha * anchors.mu).astype(np.float32),
        N=np.full(n_classes, float(alpha)),
    )


def _validated_embedding(z, dim: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (dim,):
        raise DataError(f"embedding has shape {z.shape}, expected ({dim},)")
    if not np.all(np.isfinite(z)):
        raise DataError("embedding contains non-finite values")
    norm = float(np.linalg.norm(z))
    if abs(norm - 1.0) > INPUT_NORM_TOL:
        raise DataError(
            f"embedding norm {norm:.6g} outside 1 +/- {INPUT_NORM_TOL}"
        )
    return z / norm


def _stable_softmax(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (probs, log_probs) with max-subtraction."""
    shifted = logits - logits.max()
    ex = np.exp(shifted)
    total = ex.sum()
    probs = ex / total
    log_probs = shifted - np.log(total)
    return probs, log_probs


def predictive_probs(state: HeadState, z) -> np.ndarray:
    """Softmax probabilities under tau_pred for one validated embedding."""
    z = _validated_embedding(z, state.dim)
    logits = state.tau_pred * (state.prototypes @ z) + state._log_pi
    probs, _ = _stable_softmax(logits)
    return probs


def score(state: HeadState, z) -> ScoredSample:
    """Score one unit-norm embedding against the current head.

    Inputs within 1e-4 of unit norm are renormalized; anything further off
    (including zero or NaN vectors) is rejected as corrupt.
    """
    z = _validated_embedding(z, state.dim)
    cosines = state.prototypes @ z
    logits = state.tau_pred * cosines + state._log_pi
    probs, log_probs = _stable_softmax(logits)
    pred = int(np.argmax(logits))  # ties resolve to the lowest index
    entropy = max(0.0, float(-(probs @ log_probs)))
    runner_up = float(np.partition(logits, -2)[-2])
    margin = max(0.0, float(logits[pred]) - runner_up)
    return ScoredSample(
        logits=logits,
        probs_pred=probs,
        entropy=entropy,
        margin=margin,
        pred_class=pred,
        cosines=cosines,
    )


def calibrated_probs_from_cosines(
    state: HeadState, cosines: np.ndarray, scratch: Optional[np.ndarray] = None
) -> np.ndarray:
    """Calibration-temperature softmax reusing already-computed cosines.

    ``scratch`` (a length-C float64 buffer) avoids temporaries in hot loops;
    the returned probability vector is always freshly allocated.
    """
    if scratch is None:
        scratch = np.empty_like(cosines)
    np.multiply(cosines, state.tau_cal, out=scratch)
    scratch += state._log_pi
    scratch -= scratch.max()
    np.exp(scratch, out=scratch)
    return scratch / scratch.sum()


def calibrated_probs(state: HeadState, z) -> np.ndarray:
    """Probabilities under the calibration temperature tau_cal.

    Same scoring rule as :func:`score` but with tau_cal in place of
    tau_pred; this is the vector meant for downstream consumers.
    """
    z = _validated_embedding(z, state.dim)
    return calibrated_probs_from_cosines(state, state.prototypes @ z)


def validate_state(
    state: HeadState,
    *,
    alpha: Optional[float] = None,
    tau_min: Optional[float] = None,
    tau_max: Optional[float] = None,
) -> None:
    """Check the head-state invariants; raise InvariantError on violation."""
    norms = np.linalg.norm(state.prototypes, axis=1)
    worst = float(np.abs(norms - 1.0).max())
    if worst > ANCHOR_NORM_TOL:
        raise InvariantError(f"prototype row norm off unit by {worst:.3g}")
    if np.any(state.pi <= 0.0) or np.any(state.pi0 <= 0.0):
        raise InvariantError("prior has non-positive entries")
    if abs(float(state.pi.sum()) - 1.0) > PRIOR_SUM_TOL:
        raise InvariantError("prior does not sum to 1 within 1e-9")
    if alpha is not None and float(state.N.min()) < alpha - 1e-9:
        raise InvariantError("soft-count accumulator dropped below alpha")
    if tau_min is not None and not (
        tau_min - 1e-12 <= state.tau_pred <= (tau_max or np.inf) + 1e-12
    ):
        raise InvariantError(
            f"tau_pred {state.tau_pred} escaped [{tau_min}, {tau_max}]"
        )
    if tau_min is not None and not (
        tau_min - 1e-12 <= state.tau_cal <= (tau_max or np.inf) + 1e-12
    ):
        raise InvariantError(f"tau_cal {state.tau_cal} escaped bounds")
