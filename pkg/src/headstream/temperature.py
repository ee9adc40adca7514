"""Prediction-temperature search and the calibration-temperature policy.

The prediction temperature minimizes total entropy over the accepted batch
via a coarse scan plus golden-section refinement, then moves through an EMA
with hard bounds. The calibration temperature is held fixed by default, or
mirrors the prediction temperature through a slower EMA.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, StateError
from .head import HeadState

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
_FLAT_REL_TOL = 1e-12


@dataclass(frozen=True)
class TempConfig:
    tau_min: float = 0.5
    tau_max: float = 3.0
    beta: float = 0.9
    search_tol: float = 1e-4
    cal_mode: str = "fixed"  # or "mirror_pred"
    tau_init: float = 1.0
    coarse_steps: int = 9  # global scan density guarding against local minima

    def __post_init__(self):
        if not (0.0 < self.tau_min < self.tau_max):
            raise ConfigError(
                f"need 0 < tau_min < tau_max, got [{self.tau_min}, {self.tau_max}]"
            )
        if not (0.0 <= self.beta < 1.0):
            raise ConfigError(f"beta must lie in [0, 1), got {self.beta}")
        if self.search_tol <= 0.0:
            raise ConfigError("search_tol must be positive")
        if self.cal_mode not in ("fixed", "mirror_pred"):
            raise ConfigError(f"unknown cal_mode {self.cal_mode!r}")
        if not (self.tau_min <= self.tau_init <= self.tau_max):
            raise ConfigError("tau_init must lie within the temperature bounds")
        if int(self.coarse_steps) != self.coarse_steps or self.coarse_steps < 3:
            raise ConfigError("coarse_steps must be an integer >= 3")


def _validated_batch(cosines, log_pi) -> tuple[np.ndarray, np.ndarray]:
    cos = np.asarray(cosines, dtype=np.float64)
    if cos.ndim == 1:
        cos = cos[None, :]
    if cos.ndim != 2 or cos.shape[0] < 1 or cos.shape[1] < 2:
        raise StateError("need a nonempty batch of per-class cosines")
    if not np.all(np.isfinite(cos)):
        raise DataError("cosines must be finite")
    # float32-resolution unit vectors give |cos| up to ~1 + 1e-7
    overshoot = float(np.abs(cos).max()) - 1.0
    if overshoot > 1e-6:
        raise DataError("cosines must lie in [-1, 1]")
    if overshoot > 0.0:
        cos = np.clip(cos, -1.0, 1.0)
    lp = np.asarray(log_pi, dtype=np.float64)
    if lp.shape != (cos.shape[1],):
        raise DataError("log-prior length does not match cosine columns")
    return cos, lp


class _Objective:
    """Entropy-sum evaluator with reusable scratch, so a search loop does not
    churn (B, C)-sized temporaries on every call."""

    def __init__(self, cos: np.ndarray, log_pi: np.ndarray):
        self.cos = cos
        self.log_pi = log_pi
        self._s = np.empty_like(cos)
        self._e = np.empty_like(cos)

    def __call__(self, tau: float) -> float:
        s, e = self._s, self._e
        np.multiply(self.cos, tau, out=s)
        np.add(s, self.log_pi, out=s)
        m = s.max(axis=1, keepdims=True)
        np.subtract(s, m, out=s)
        np.exp(s, out=e)
        z = e.sum(axis=1)
        # entropy is shift-invariant: H_i = log z_i - sum_c e_ic s_ic / z_i
        weighted = np.einsum("ij,ij->i", e, s)
        h = np.log(z) - weighted / z
        return float(h.sum())


def _entropy_sum(tau: float, cos: np.ndarray, log_pi: np.ndarray) -> float:
    """Sum over the batch of softmax entropies at temperature tau (nats)."""
    return _Objective(cos, log_pi)(tau)


def entropy_objective(tau: float, cosines, log_pi) -> float:
    """Total predictive entropy of the batch at temperature tau."""
    if tau <= 0.0:
        raise ConfigError(f"tau must be positive, got {tau}")
    cos, lp = _validated_batch(cosines, log_pi)
    return _entropy_sum(float(tau), cos, lp)


def _golden_section(f, lo: float, hi: float, tol: float) -> float:
    """Midpoint of the final golden-section bracket on [lo, hi]."""
    h = hi - lo
    if h <= tol:
        return 0.5 * (lo + hi)
    x1 = hi - _INV_PHI * h
    x2 = lo + _INV_PHI * h
    f1, f2 = f(x1), f(x2)
    while h > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            h = hi - lo
            x1 = hi - _INV_PHI * h
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            h = hi - lo
            x2 = lo + _INV_PHI * h
            f2 = f(x2)
    return 0.5 * (lo + hi)


def minimize_tau(cosines, log_pi, config: TempConfig) -> float:
    """argmin of the batch entropy over [tau_min, tau_max].

    A coarse global scan locates the best basin (the objective need not be
    unimodal once a non-uniform prior enters the logits); golden-section then
    refines within the bracketing cell. The returned value never evaluates
    worse than either bound. A flat objective returns the bracket midpoint.
    """
    cos, lp = _validated_batch(cosines, log_pi)
    f = _Objective(cos, lp)

    xs = np.linspace(config.tau_min, config.tau_max, config.coarse_steps)
    vals = np.array([f(x) for x in xs])
    spread = float(vals.max() - vals.min())
    if spread <= _FLAT_REL_TOL * max(1.0, float(np.abs(vals).max())):
        return 0.5 * (config.tau_min + config.tau_max)

    i = int(np.argmin(vals))
    diffs = np.diff(vals)
    if i == len(xs) - 1 and np.all(diffs < 0.0):
        # strictly decreasing scan: confirm the bound is a local min too
        probe = config.tau_max - config.search_tol
        if f(probe) >= vals[-1]:
            return config.tau_max
    if i == 0 and np.all(diffs > 0.0):
        probe = config.tau_min + config.search_tol
        if f(probe) >= vals[0]:
            return config.tau_min
    lo = xs[max(i - 1, 0)]
    hi = xs[min(i + 1, len(xs) - 1)]
    tau_g = _golden_section(f, float(lo), float(hi), config.search_tol)

    candidates = [(f(tau_g), tau_g), (vals[i], float(xs[i])),
                  (vals[0], float(xs[0])), (vals[-1], float(xs[-1]))]
    best = min(candidates, key=lambda c: c[0])
    return best[1]


def ema_clamp(tau_pred: float, tau_hat: float, config: TempConfig) -> float:
    """EMA step toward tau_hat, clipped to the configured bounds."""
    if tau_pred <= 0.0 or tau_hat <= 0.0:
        raise DataError("temperatures must be positive")
    mixed = config.beta * tau_pred + (1.0 - config.beta) * tau_hat
    return float(min(max(mixed, config.tau_min), config.tau_max))


def update_tau_cal(state: HeadState, config: TempConfig) -> float:
    """Calibration-temperature policy: fixed, or a slower EMA toward tau_pred."""
    if config.cal_mode == "fixed":
        return state.tau_cal
    beta_cal = 0.5 * (1.0 + config.beta)
    mixed = beta_cal * state.tau_cal + (1.0 - beta_cal) * state.tau_pred
    return float(min(max(mixed, config.tau_min), config.tau_max))
