"""Evidence accumulation and the closed-form M-step updates.

Prototypes: anchored MAP direction, blended in with a step size and confined
to a chordal ball around each anchor. Prior: Dirichlet posterior mean over
run-cumulative soft counts, projected back toward the reference prior when
its KL divergence exceeds the cap.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, StateError
from .head import Anchors, HeadState, predictive_probs

logger = logging.getLogger(__name__)

RESP_SUM_TOL = 1e-9
_DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class UpdateConfig:
    """Knobs of the M-step.

    ``gamma`` defaults to the number of classes (resolved at use time when
    left as None). ``decay`` < 1 enables anchored exponential forgetting of
    the accumulators for non-stationary streams; 1.0 disables it.
    """

    alpha: float = 1.0
    gamma: Optional[float] = None
    eta: float = 0.1
    rho: float = 0.5
    kappa: float = 0.1
    eps: float = 1e-8
    batch_size: int = 64
    decay: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.gamma is not None and self.gamma <= 0.0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if not (0.0 < self.eta <= 1.0):
            raise ConfigError(f"eta must lie in (0, 1], got {self.eta}")
        if self.rho <= 0.0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if self.kappa <= 0.0:
            raise ConfigError(f"kappa must be positive, got {self.kappa}")
        if self.eps <= 0.0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError(f"batch_size must be a positive integer, got {self.batch_size}")
        if not (0.0 < self.decay <= 1.0):
            raise ConfigError(f"decay must lie in (0, 1], got {self.decay}")

    def effective_gamma(self, n_classes: int) -> float:
        return float(self.gamma) if self.gamma is not None else float(n_classes)


class BatchBuffer:
    """Embeddings and responsibilities of the accepted samples since the last
    update, plus the run-cumulative Dirichlet soft counts.

    Pending rows are folded into the state's U accumulator in one GEMM by
    :func:`sync_accumulators`, so per-sample cost stays O(C). Rows are kept
    float64: cancellation in the fold would amplify any storage rounding of
    the inputs well past it.
    """

    def __init__(self, capacity: int, dim: int, n_classes: int):
        if capacity < 1:
            raise ConfigError("buffer capacity must be positive")
        self.capacity = int(capacity)
        self.Z = np.zeros((self.capacity, dim), dtype=np.float64)
        self.R = np.zeros((self.capacity, n_classes), dtype=np.float64)
        self.count = 0
        self._pending_from = 0
        self.soft_counts = np.zeros(n_classes, dtype=np.float64)
        self.total_soft = 0.0

    @property
    def pending(self) -> int:
        return self.count - self._pending_from

    def append(self, z: np.ndarray, r: np.ndarray) -> None:
        if self.count >= self.capacity:
            raise StateError("batch buffer full; update cadence was missed")
        self.Z[self.count] = z
        self.R[self.count] = r
        self.count += 1

    def mark_synced(self) -> None:
        self._pending_from = self.count

    def clear(self) -> None:
        """Drop the buffered batch. Soft counts persist across updates."""
        if self._pending_from != self.count:
            raise StateError("clearing a buffer with unsynced evidence")
        self.count = 0
        self._pending_from = 0


def responsibilities(state: HeadState, views) -> np.ndarray:
    """Soft class assignment for one accepted sample: the renormalized mean
    of the predictive probabilities of its K views under the current state."""
    views = np.asarray(views, dtype=np.float64)
    if views.ndim == 1:
        views = views[None, :]
    if views.ndim != 2 or views.shape[0] < 1:
        raise DataError("views must be a K x d array with K >= 1")
    total = None
    for k in range(views.shape[0]):
        p = predictive_probs(state, views[k])
        total = p if total is None else total + p
    r = total / views.shape[0]
    return r / r.sum()


def _validate_responsibility(r: np.ndarray, n_classes: int) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (n_classes,):
        raise DataError("responsibility length does not match class count")
    if np.any(r < 0.0) or not np.all(np.isfinite(r)):
        raise DataError("responsibilities must be finite and nonnegative")
    if abs(float(r.sum()) - 1.0) > RESP_SUM_TOL:
        raise DataError("responsibilities must sum to 1")
    return r


def accumulate(
    state: HeadState,
    buf: BatchBuffer,
    r: np.ndarray,
    z: np.ndarray,
    config: UpdateConfig,
    anchors: Anchors,
) -> None:
    """Fold one accepted sample into the evidence: U += r z, N += r, soft
    counts += r, with the sample buffered for the batched update step.

    With decay < 1 the accumulators first relax toward their anchor values
    (alpha * mu, alpha), which preserves the N >= alpha floor.
    """
    r = _validate_responsibility(r, state.n_classes)
    if config.decay < 1.0:
        sync_accumulators(state, buf)
        d = config.decay
        U = d * state.U.astype(np.float64) + (1.0 - d) * config.alpha * anchors.mu
        U += r[:, None] * z[None, :]
        state.U = U.astype(np.float32)
        state.N = d * state.N + (1.0 - d) * config.alpha + r
        buf.append(z, r)
        buf.mark_synced()
    else:
        buf.append(z, r)
        state.N = state.N + r
    buf.soft_counts += r
    buf.total_soft += float(r.sum())


def sync_accumulators(state: HeadState, buf: BatchBuffer) -> np.ndarray:
    """Fold the buffer's pending rank-1 updates into U with one GEMM.

    Returns the float64 view of U so a following update step can reuse it
    without a second widening pass.
    """
    U = state.U.astype(np.float64)
    if buf.pending:
        sl = slice(buf._pending_from, buf.count)
        U += buf.R[sl].T @ buf.Z[sl]
        state.U = U.astype(np.float32)
        buf.mark_synced()
    return U


def _clip_rows_to_anchor_ball(t: np.ndarray, mu: np.ndarray, rho: float) -> bool:
    """Pull rows of t back onto the sphere at chordal distance exactly rho
    from their anchors, along the great-circle arc. Returns whether any row
    was clipped.

    Truncating the chord and renormalizing can overshoot rho (by ~3% at
    rho = 0.5), so the clip is done in arc coordinates instead; the arc
    construction lands exactly on the sphere at exactly rho.
    """
    if rho >= 2.0:
        return False
    diff = t - mu
    dist2 = np.einsum("ij,ij->i", diff, diff)
    over = dist2 > rho * rho
    if not np.any(over):
        return False
    psi = 2.0 * math.asin(rho / 2.0)
    cos_psi, sin_psi = math.cos(psi), math.sin(psi)
    idx = np.nonzero(over)[0]
    mu_o = mu[idx]
    t_o = t[idx]
    c = np.einsum("ij,ij->i", t_o, mu_o)
    e = t_o - c[:, None] * mu_o
    en = np.linalg.norm(e, axis=1)
    for j in np.nonzero(en < _DEGENERATE_NORM)[0]:
        # row is (anti)parallel to its anchor: pick the basis direction with
        # the smallest anchor component, orthogonalized, as a deterministic arc
        k = int(np.argmin(np.abs(mu_o[j])))
        ej = -mu_o[j] * mu_o[j, k]
        ej[k] += 1.0
        e[j] = ej
        en[j] = np.linalg.norm(ej)
    t[idx] = cos_psi * mu_o + sin_psi * (e / en[:, None])
    return True


def prototype_update(
    state: HeadState,
    config: UpdateConfig,
    anchors: Anchors,
    *,
    clip: bool = True,
    u64: Optional[np.ndarray] = None,
) -> None:
    """MAP-direction step: normalize U / (N + eps), blend with step size eta,
    renormalize, and (when clip is set) confine to the anchor ball.

    Degenerate directions (norm below 1e-12) keep the previous prototype and
    log a warning. Call :func:`sync_accumulators` first when a buffer holds
    pending evidence; its return value can be passed as ``u64`` to skip a
    widening pass. ``u64`` is consumed (overwritten).
    """
    t_tilde = state.U.astype(np.float64) if u64 is None else u64
    np.divide(t_tilde, (state.N + config.eps)[:, None], out=t_tilde)
    norms = np.sqrt(np.einsum("ij,ij->i", t_tilde, t_tilde))
    bad = norms < _DEGENERATE_NORM
    if np.any(bad):
        logger.warning(
            "degenerate MAP direction for classes %s; keeping previous prototypes",
            np.nonzero(bad)[0].tolist(),
        )
        t_tilde[bad] = state.prototypes[bad]
        norms[bad] = 1.0
    np.divide(t_tilde, norms[:, None], out=t_tilde)

    t_new = t_tilde  # reuse: blend the step in place
    np.multiply(t_new, config.eta, out=t_new)
    t_new += (1.0 - config.eta) * state.prototypes
    norms2 = np.sqrt(np.einsum("ij,ij->i", t_new, t_new))
    bad2 = norms2 < _DEGENERATE_NORM
    if np.any(bad2):
        logger.warning(
            "interpolation collapsed for classes %s; keeping previous prototypes",
            np.nonzero(bad2)[0].tolist(),
        )
        t_new[bad2] = state.prototypes[bad2]
        norms2[bad2] = 1.0
    np.divide(t_new, norms2[:, None], out=t_new)

    if clip and _clip_rows_to_anchor_ball(t_new, anchors.mu, config.rho):
        # arc-clipped rows are unit by construction; renormalize for hygiene
        np.divide(t_new, np.sqrt(np.einsum("ij,ij->i", t_new, t_new))[:, None], out=t_new)
    state.prototypes = t_new


def prior_update(
    state: HeadState,
    buf: BatchBuffer,
    config: UpdateConfig,
    *,
    apply_guard: bool = True,
) -> np.ndarray:
    """Dirichlet posterior mean over the cumulative soft counts, followed by
    the KL projection toward the reference prior (unless disabled)."""
    gamma = config.effective_gamma(state.n_classes)
    s = buf.soft_counts
    pi = (gamma * state.pi0 + s) / (gamma + float(s.sum()))
    if apply_guard:
        pi = kl_guard(pi, state.pi0, config.kappa)
    state.set_prior(pi)
    return state.pi


def kl(p, q) -> float:
    """KL divergence sum(p log p/q) in nats for strictly positive simplex
    vectors; zero entries are rejected."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DataError("KL arguments must have the same shape")
    if np.any(p <= 0.0) or np.any(q <= 0.0):
        raise DataError("KL arguments must be strictly positive")
    if abs(float(p.sum()) - 1.0) > 1e-6 or abs(float(q.sum()) - 1.0) > 1e-6:
        raise DataError("KL arguments must sum to 1")
    return max(0.0, float(np.sum(p * np.log(p / q))))


def kl_guard(pi, pi0, kappa: float) -> np.ndarray:
    """Largest-lambda mix lambda*pi + (1-lambda)*pi0 with KL(mix || pi0) <= kappa.

    KL of the mix is convex in lambda with value 0 at lambda = 0, hence
    nondecreasing on [0, 1]; bisection to 1e-8 on lambda finds the boundary.
    """
    if kappa <= 0.0:
        raise ConfigError("kappa must be positive")
    pi = np.asarray(pi, dtype=np.float64)
    pi0 = np.asarray(pi0, dtype=np.float64)
    if kl(pi, pi0) <= kappa:
        return pi.copy()
    lo, hi = 0.0, 1.0
    while hi - lo > 1e-8:
        mid = 0.5 * (lo + hi)
        mix = mid * pi + (1.0 - mid) * pi0
        if kl(mix, pi0) <= kappa:
            lo = mid
        else:
            hi = mid
    return lo * pi + (1.0 - lo) * pi0
