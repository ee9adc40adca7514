"""Confidence gate: entropy/margin thresholds from sliding-window quantiles.

The window collects statistics from every streamed sample, accepted or not,
so the thresholds track stream difficulty rather than the gated subset.
Warm-up blocks acceptance but still fills the window.
"""
from __future__ import annotations

import math
from bisect import bisect_left, insort
from collections import deque
from dataclasses import dataclass

from .errors import ConfigError, DataError, StateError


@dataclass(frozen=True)
class GateConfig:
    window_len: int = 512
    quantile: float = 0.5
    warmup: int = 100

    def __post_init__(self):
        if int(self.window_len) != self.window_len or self.window_len < 8:
            raise ConfigError(f"window_len must be an integer >= 8, got {self.window_len}")
        if not (0.0 < self.quantile < 1.0):
            raise ConfigError(f"quantile must lie in (0, 1), got {self.quantile}")
        if int(self.warmup) != self.warmup or self.warmup < 0:
            raise ConfigError(f"warmup must be a nonnegative integer, got {self.warmup}")


def _quantile_sorted(values: list[float], q: float) -> float:
    """Linear interpolation between closest order statistics of a sorted list."""
    n = len(values)
    if n == 1:
        return values[0]
    pos = q * (n - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return values[lo] + frac * (values[hi] - values[lo])


class GateWindow:
    """Ring buffer of the last W (entropy, margin) pairs plus a total count.

    Sorted shadow lists make threshold queries O(1) after an O(W) insert,
    which keeps the per-sample cost flat for the streaming loop.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("window capacity must be positive")
        self.capacity = int(capacity)
        self._ring: deque[tuple[float, float]] = deque()
        self._ent: list[float] = []
        self._mar: list[float] = []
        self.count = 0  # samples observed over the whole stream

    def __len__(self) -> int:
        return len(self._ring)

    def observe(self, entropy: float, margin: float) -> None:
        """Append one (entropy, margin) pair, evicting the oldest when full."""
        entropy = float(entropy)
        margin = float(margin)
        if not (math.isfinite(entropy) and math.isfinite(margin)):
            raise DataError("gate statistics must be finite")
        if entropy < 0.0 or margin < 0.0:
            raise DataError("gate statistics must be nonnegative")
        if len(self._ring) == self.capacity:
            old_e, old_m = self._ring.popleft()
            self._ent.pop(bisect_left(self._ent, old_e))
            self._mar.pop(bisect_left(self._mar, old_m))
        self._ring.append((entropy, margin))
        insort(self._ent, entropy)
        insort(self._mar, margin)
        self.count += 1

    def thresholds(self, q: float) -> tuple[float, float]:
        """(eps_entropy, eps_margin): accept entropy <= eps_entropy keeps the
        q most-confident fraction; accept margin >= eps_margin likewise."""
        if not self._ring:
            raise StateError("cannot compute thresholds from an empty window")
        eps_h = _quantile_sorted(self._ent, q)
        eps_m = _quantile_sorted(self._mar, 1.0 - q)
        return eps_h, eps_m

    def items(self) -> list[tuple[float, float]]:
        """Window contents in arrival order (for persistence)."""
        return list(self._ring)

    @classmethod
    def restore(
        cls, capacity: int, items: list[tuple[float, float]], count: int
    ) -> "GateWindow":
        win = cls(capacity)
        for e, m in items:
            win.observe(e, m)
        win.count = int(count)
        return win


def accept(scored, eps_h: float, eps_margin: float, samples_seen: int, warmup: int) -> bool:
    """Gate decision: past warm-up, entropy low enough, margin high enough."""
    return (
        samples_seen > warmup
        and scored.entropy <= eps_h
        and scored.margin >= eps_margin
    )
