"""Single-pass prequential evaluation: top-1, 15-bin calibration, NLL, Brier,
drift ceilings, and windowed accuracy for head-vs-tail drop estimation.

Each labeled sample is recorded with the probabilities that existed before
that sample contributed any evidence (the engine enforces the ordering).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError, StateError

N_BINS = 15
_WINDOW_BASE = 64     # accuracy-window chunk size; doubles to bound memory
_MAX_WINDOWS = 32
_NLL_FLOOR = 1e-300   # keeps NLL finite on (crafted) zero-probability labels


@dataclass
class MetricsReport:
    """Flat, JSON-friendly summary of one streaming run."""

    n_eval: int
    top1: Optional[float]
    ece: Optional[float]
    nll_mean: Optional[float]
    brier_mean: Optional[float]
    acc_drop: Optional[float]
    max_prior_kl: float
    max_proto_step: float
    max_proto_anchor_dist: float
    bin_counts: list[int]
    bin_conf_sums: list[float]
    bin_correct: list[int]
    window_size: int
    window_counts: list[int]
    window_acc: list[float]

    def to_dict(self) -> dict:
        return {
            "n_eval": self.n_eval,
            "top1": self.top1,
            "ece": self.ece,
            "nll_mean": self.nll_mean,
            "brier_mean": self.brier_mean,
            "acc_drop": self.acc_drop,
            "max_prior_kl": self.max_prior_kl,
            "max_proto_step": self.max_proto_step,
            "max_proto_anchor_dist": self.max_proto_anchor_dist,
            "bin_counts": list(self.bin_counts),
            "bin_conf_sums": list(self.bin_conf_sums),
            "bin_correct": list(self.bin_correct),
            "window_size": self.window_size,
            "window_counts": list(self.window_counts),
            "window_acc": list(self.window_acc),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})  # type: ignore[arg-type]

    @classmethod
    def empty(cls) -> "MetricsReport":
        return cls(
            n_eval=0, top1=None, ece=None, nll_mean=None, brier_mean=None,
            acc_drop=None, max_prior_kl=0.0, max_proto_step=0.0,
            max_proto_anchor_dist=0.0, bin_counts=[0] * N_BINS,
            bin_conf_sums=[0.0] * N_BINS, bin_correct=[0] * N_BINS,
            window_size=_WINDOW_BASE, window_counts=[], window_acc=[],
        )


@dataclass
class MetricsAccumulator:
    n_eval: int = 0
    n_correct: int = 0
    bin_counts: np.ndarray = field(default_factory=lambda: np.zeros(N_BINS, dtype=np.int64))
    bin_conf_sums: np.ndarray = field(default_factory=lambda: np.zeros(N_BINS))
    bin_correct: np.ndarray = field(default_factory=lambda: np.zeros(N_BINS, dtype=np.int64))
    nll_sum: float = 0.0
    brier_sum: float = 0.0
    max_prior_kl: float = 0.0
    max_proto_step: float = 0.0
    max_proto_anchor_dist: float = 0.0
    # fixed-size accuracy windows, merged pairwise when there are too many
    window_size: int = _WINDOW_BASE
    windows: list[tuple[int, int]] = field(default_factory=list)  # (n, correct)
    _cur_n: int = 0
    _cur_correct: int = 0

    def record_prediction(self, probs_cal, pred_class: int, true_label: int) -> None:
        """Record one labeled sample. Confidence is the max of the supplied
        (calibration-temperature) probabilities; correctness compares the
        decision-rule argmax against the label."""
        p = np.asarray(probs_cal, dtype=np.float64)
        if p.ndim != 1:
            raise DataError("probabilities must be a vector")
        n_classes = p.shape[0]
        if not (0 <= true_label < n_classes):
            raise DataError(f"label {true_label} outside [0, {n_classes})")
        if not np.all(np.isfinite(p)) or np.any(p < -1e-12):
            raise DataError("probabilities must be finite and nonnegative")
        if abs(float(p.sum()) - 1.0) > 1e-6:
            raise DataError("probabilities must sum to 1")

        confidence = float(p.max())
        b = min(N_BINS - 1, int(confidence * N_BINS))  # conf 1.0 clamps to top bin
        correct = int(pred_class == true_label)

        self.n_eval += 1
        self.n_correct += correct
        self.bin_counts[b] += 1
        self.bin_conf_sums[b] += confidence
        self.bin_correct[b] += correct
        self.nll_sum += -math.log(max(float(p[true_label]), _NLL_FLOOR))
        self.brier_sum += float(p @ p) - 2.0 * float(p[true_label]) + 1.0

        self._cur_n += 1
        self._cur_correct += correct
        if self._cur_n == self.window_size:
            self.windows.append((self._cur_n, self._cur_correct))
            self._cur_n = 0
            self._cur_correct = 0
            if len(self.windows) == _MAX_WINDOWS:
                merged = [
                    (a[0] + b_[0], a[1] + b_[1])
                    for a, b_ in zip(self.windows[0::2], self.windows[1::2])
                ]
                self.windows = merged
                self.window_size *= 2

    def record_drift(self, prior_kl: float, proto_step: float, proto_anchor_dist: float) -> None:
        """Update the running maxima of the drift indicators."""
        for name, v in (
            ("prior_kl", prior_kl),
            ("proto_step", proto_step),
            ("proto_anchor_dist", proto_anchor_dist),
        ):
            if not math.isfinite(v) or v < 0.0:
                raise DataError(f"drift indicator {name} must be finite and nonnegative")
        self.max_prior_kl = max(self.max_prior_kl, float(prior_kl))
        self.max_proto_step = max(self.max_proto_step, float(proto_step))
        self.max_proto_anchor_dist = max(self.max_proto_anchor_dist, float(proto_anchor_dist))

    def ece(self) -> float:
        """15-bin expected calibration error over the recorded samples."""
        if self.n_eval == 0:
            raise StateError("no labeled samples recorded")
        total = 0.0
        for b in range(N_BINS):
            n_b = int(self.bin_counts[b])
            if n_b == 0:
                continue
            acc_b = self.bin_correct[b] / n_b
            conf_b = self.bin_conf_sums[b] / n_b
            total += (n_b / self.n_eval) * abs(acc_b - conf_b)
        return total

    def _all_windows(self) -> list[tuple[int, int]]:
        out = list(self.windows)
        if self._cur_n > 0:
            out.append((self._cur_n, self._cur_correct))
        return out

    def accuracy_drop(self) -> float:
        """Mean accuracy of the first ~10% of labeled samples minus the last
        ~10%, assembled from the fixed-size windows (at least one each)."""
        wins = self._all_windows()
        if not wins:
            return 0.0
        target = max(1, math.ceil(0.1 * self.n_eval))

        def window_mean(seq) -> float:
            n = c = 0
            for wn, wc in seq:
                n += wn
                c += wc
                if n >= target:
                    break
            return c / n

        return window_mean(wins) - window_mean(reversed(wins))

    def finalize(self) -> MetricsReport:
        if self.n_eval == 0:
            raise StateError("cannot finalize an empty run")
        wins = self._all_windows()
        return MetricsReport(
            n_eval=self.n_eval,
            top1=self.n_correct / self.n_eval,
            ece=self.ece(),
            nll_mean=self.nll_sum / self.n_eval,
            brier_mean=self.brier_sum / self.n_eval,
            acc_drop=self.accuracy_drop(),
            max_prior_kl=self.max_prior_kl,
            max_proto_step=self.max_proto_step,
            max_proto_anchor_dist=self.max_proto_anchor_dist,
            bin_counts=[int(x) for x in self.bin_counts],
            bin_conf_sums=[float(x) for x in self.bin_conf_sums],
            bin_correct=[int(x) for x in self.bin_correct],
            window_size=self.window_size,
            window_counts=[n for n, _ in wins],
            window_acc=[c / n for n, c in wins],
        )
