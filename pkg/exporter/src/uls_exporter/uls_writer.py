"""Self-contained ULS1 writer.

Deliberately independent of the consumer's implementation: the byte layout
below is the contract between the two packages, so round-trips through the
consumer's reader genuinely exercise it.

Layout, little-endian:
    magic 'ULS1' | u32 version=1 | u32 C | u32 d | u32 K | u64 N | u32 flags
    anchors: C*d float32 row-major
    records: K*d float32 views, then u32 label when flags bit 0 is set
             (0xFFFFFFFF encodes an unlabeled sample)
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InputError

MAGIC = b"ULS1"
VERSION = 1
FLAG_LABELS = 0x1
UNLABELED = 0xFFFFFFFF
_HEADER = struct.Struct("<4sIIIIQI")
_N_OFFSET = 20
NORM_TOL = 1e-3


class Uls1Writer:
    def __init__(self, path, anchors: np.ndarray, views: int, labeled: bool = True):
        anchors = np.asarray(anchors, dtype=np.float32)
        if anchors.ndim != 2 or anchors.shape[0] < 2 or anchors.shape[1] < 2:
            raise InputError(f"anchor matrix must be C x d with C,d >= 2, got {anchors.shape}")
        norms = np.linalg.norm(anchors.astype(np.float64), axis=1)
        if float(np.abs(norms - 1.0).max()) > NORM_TOL:
            raise InputError("anchor rows must be unit-norm")
        self.n_classes, self.dim = anchors.shape
        self.views = int(views)
        self.labeled = bool(labeled)
        self._n = 0
        self._path = Path(path)
        self._f = open(self._path, "wb")
        flags = FLAG_LABELS if labeled else 0
        self._f.write(
            _HEADER.pack(MAGIC, VERSION, self.n_classes, self.dim, self.views, 0, flags)
        )
        self._f.write(np.ascontiguousarray(anchors, dtype="<f4").tobytes())

    def write(self, views: np.ndarray, label: Optional[int]) -> None:
        views = np.asarray(views, dtype=np.float32)
        if views.shape != (self.views, self.dim):
            raise InputError(
                f"record {self._n}: views shape {views.shape}, "
                f"expected ({self.views}, {self.dim})"
            )
        norms = np.linalg.norm(views.astype(np.float64), axis=1)
        if float(np.abs(norms - 1.0).max()) > NORM_TOL:
            raise InputError(f"record {self._n}: view not unit-norm")
        if label is None:
            encoded = UNLABELED
        else:
            if not (0 <= int(label) < self.n_classes):
                raise InputError(f"record {self._n}: label {label} out of range")
            encoded = int(label)
        self._f.write(np.ascontiguousarray(views, dtype="<f4").tobytes())
        if self.labeled:
            self._f.write(struct.pack("<I", encoded))
        self._n += 1

    def close(self) -> int:
        if not self._f.closed:
            self._f.seek(_N_OFFSET)
            self._f.write(struct.pack("<Q", self._n))
            self._f.close()
        return self._n

    def __enter__(self) -> "Uls1Writer":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.close()
        else:
            self._f.close()
            self._path.unlink(missing_ok=True)
