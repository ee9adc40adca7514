"""ULS1 binary container: an anchor matrix plus a lazy stream of embedding
records. This file format is the boundary between the engine and whatever
produces the embeddings.

Layout, all little-endian:

    header   magic 'ULS1' | u32 version | u32 C | u32 d | u32 K
             | u64 N | u32 flags
    anchors  C*d float32, row-major
    records  per sample: K*d float32 views (row-major), then, when flags
             bit 0 is set, one u32 label (0xFFFFFFFF = unlabeled)

Writers are exclusive; the reader is a strict single-pass iterator that
never buffers more than one record plus the anchor matrix.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .errors import DataError, FormatError
from .head import Anchors

MAGIC = b"ULS1"
VERSION = 1
FLAG_LABELS = 0x1
UNLABELED = 0xFFFFFFFF
VIEW_NORM_TOL = 1e-3

_HEADER = struct.Struct("<4sIIIIQI")
_LABEL = struct.Struct("<I")
_N_OFFSET = 4 + 4 + 4 + 4 + 4  # byte offset of the u64 sample count


@dataclass(frozen=True)
class StreamHeader:
    version: int
    n_classes: int
    dim: int
    views: int
    n_samples: int
    flags: int

    @property
    def labeled(self) -> bool:
        return bool(self.flags & FLAG_LABELS)


@dataclass
class SampleRecord:
    """One stream element: K unit-norm float32 views, optional label."""

    views: np.ndarray  # (K, d) float32
    label: Optional[int] = None


def _validate_views(views: np.ndarray, k: int, dim: int, where: str) -> np.ndarray:
    views = np.asarray(views, dtype=np.float32)
    if views.ndim == 1:
        views = views[None, :]
    if views.shape != (k, dim):
        raise DataError(f"{where}: views have shape {views.shape}, expected ({k}, {dim})")
    if not np.all(np.isfinite(views)):
        raise DataError(f"{where}: non-finite view component")
    norms = np.linalg.norm(views.astype(np.float64), axis=1)
    worst = float(np.abs(norms - 1.0).max())
    if worst > VIEW_NORM_TOL:
        raise DataError(
            f"{where}: view norm off unit by {worst:.3g} (tolerance {VIEW_NORM_TOL})"
        )
    return views


class StreamWriter:
    """Exclusive record-at-a-time writer. The sample count is patched into
    the header on close, so the record count never has to be known upfront."""

    def __init__(self, path, anchors: Anchors, *, views: int, labeled: bool):
        if views < 1:
            raise DataError("views per sample must be >= 1")
        self._path = Path(path)
        self._anchors = anchors
        self._k = int(views)
        self._labeled = bool(labeled)
        self._n = 0
        self._f = open(self._path, "wb")
        flags = FLAG_LABELS if labeled else 0
        self._f.write(
            _HEADER.pack(MAGIC, VERSION, anchors.n_classes, anchors.dim, self._k, 0, flags)
        )
        self._f.write(np.ascontiguousarray(anchors.mu, dtype="<f4").tobytes())

    def write(self, record: SampleRecord) -> None:
        views = _validate_views(
            record.views, self._k, self._anchors.dim, f"record {self._n}"
        )
        label = record.label
        if label is None:
            encoded = UNLABELED
        else:
            label = int(label)
            if not (0 <= label < self._anchors.n_classes):
                raise DataError(
                    f"record {self._n}: label {label} outside "
                    f"[0, {self._anchors.n_classes})"
                )
            encoded = label
        if label is not None and not self._labeled:
            raise DataError(
                f"record {self._n}: labeled record in an unlabeled stream"
            )
        self._f.write(np.ascontiguousarray(views, dtype="<f4").tobytes())
        if self._labeled:
            self._f.write(_LABEL.pack(encoded))
        self._n += 1

    def close(self) -> int:
        if self._f.closed:
            return self._n
        self._f.seek(_N_OFFSET)
        self._f.write(struct.pack("<Q", self._n))
        self._f.close()
        return self._n

    def __enter__(self) -> "StreamWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.close()
        else:  # do not leave a plausible-looking file behind a failed write
            self._f.close()
            self._path.unlink(missing_ok=True)


def write_stream(
    path,
    anchors: Anchors,
    records: Iterable[SampleRecord],
    *,
    views: Optional[int] = None,
    labeled: Optional[bool] = None,
) -> int:
    """Write a whole stream; views/labeled are inferred from the first record
    when not given. Returns the number of records written."""
    it = iter(records)
    first = next(it, None)
    if first is not None:
        arr = np.asarray(first.views)
        if views is None:
            views = 1 if arr.ndim == 1 else arr.shape[0]
        if labeled is None:
            labeled = first.label is not None
    else:
        views = views or 1
        labeled = bool(labeled)
    with StreamWriter(path, anchors, views=views, labeled=labeled) as w:
        if first is not None:
            w.write(first)
        for rec in it:
            w.write(rec)
        return w._n


class StreamReader:
    """Single-consumer sequential reader; validates the header eagerly and
    each record as it is yielded."""

    def __init__(self, path):
        self._path = Path(path)
        self._f = open(self._path, "rb")
        raw = self._f.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            self._f.close()
            raise FormatError(f"{self._path}: file too short for a ULS1 header")
        magic, version, n_classes, dim, k, n, flags = _HEADER.unpack(raw)
        if magic != MAGIC:
            self._f.close()
            raise FormatError(f"{self._path}: bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            self._f.close()
            raise FormatError(f"{self._path}: unsupported version {version}")
        if n_classes < 1 or dim < 1 or k < 1:
            self._f.close()
            raise FormatError(f"{self._path}: degenerate header C={n_classes} d={dim} K={k}")
        if flags & ~FLAG_LABELS:
            self._f.close()
            raise FormatError(f"{self._path}: unknown flag bits 0x{flags:x}")
        self.header = StreamHeader(version, n_classes, dim, k, n, flags)
        anchor_bytes = self._f.read(n_classes * dim * 4)
        if len(anchor_bytes) < n_classes * dim * 4:
            self._f.close()
            raise FormatError(f"{self._path}: truncated anchor matrix")
        mu = np.frombuffer(anchor_bytes, dtype="<f4").reshape(n_classes, dim)
        self.anchors = Anchors(mu.astype(np.float64))
        self._record_bytes = k * dim * 4 + (4 if self.header.labeled else 0)
        self._yielded = 0

    def __iter__(self) -> Iterator[SampleRecord]:
        hdr = self.header
        view_bytes = hdr.views * hdr.dim * 4
        for i in range(hdr.n_samples):
            raw = self._f.read(self._record_bytes)
            if len(raw) < self._record_bytes:
                self._f.close()
                raise FormatError(
                    f"{self._path}: truncated stream at record {i} "
                    f"({len(raw)} of {self._record_bytes} bytes)"
                )
            views = np.frombuffer(raw, dtype="<f4", count=hdr.views * hdr.dim)
            views = views.reshape(hdr.views, hdr.dim).copy()
            if not np.all(np.isfinite(views)):
                self._f.close()
                raise DataError(f"{self._path}: non-finite value in record {i}")
            norms = np.linalg.norm(views.astype(np.float64), axis=1)
            if float(np.abs(norms - 1.0).max()) > VIEW_NORM_TOL:
                self._f.close()
                raise DataError(f"{self._path}: off-unit view norm in record {i}")
            label: Optional[int] = None
            if hdr.labeled:
                (enc,) = _LABEL.unpack_from(raw, view_bytes)
                if enc != UNLABELED:
                    if enc >= hdr.n_classes:
                        self._f.close()
                        raise DataError(
                            f"{self._path}: label {enc} out of range in record {i}"
                        )
                    label = int(enc)
            self._yielded += 1
            yield SampleRecord(views=views, label=label)
        trailing = self._f.read(1)
        self._f.close()
        if trailing:
            raise FormatError(
                f"{self._path}: trailing bytes after the declared {hdr.n_samples} records"
            )

    def close(self) -> None:
        self._f.close()


def open_stream(path) -> StreamReader:
    return StreamReader(path)


def read_stream(path) -> tuple[Anchors, Iterator[SampleRecord]]:
    """(anchors, lazy record iterator) for an existing ULS1 file."""
    reader = StreamReader(path)
    return reader.anchors, iter(reader)
