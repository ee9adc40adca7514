"""Dataset enumeration: class-labeled subfolders or an explicit manifest.

Both produce a fixed, reproducible ordering: the stream is replayed in
manifest order, never shuffled.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import InputError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


@dataclass(frozen=True)
class DatasetIndex:
    class_names: tuple[str, ...]
    entries: tuple[tuple[Path, int], ...]  # (image path, class index), stream order


def from_folders(root) -> DatasetIndex:
    """One subdirectory per class; classes sorted by name, images sorted
    within each class, stream order = class-major."""
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"image root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise InputError(f"no class subdirectories under {root}")
    names = tuple(p.name for p in class_dirs)
    entries: list[tuple[Path, int]] = []
    for idx, cdir in enumerate(class_dirs):
        images = sorted(
            p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
        )
        if not images:
            raise InputError(f"class {cdir.name!r} has no images")
        entries.extend((p, idx) for p in images)
    return DatasetIndex(class_names=names, entries=tuple(entries))


def from_manifest(path, class_names: list[str] | None = None) -> DatasetIndex:
    """Tab-separated manifest: one `path<TAB>label` line per image, streamed
    in file order. Labels are class names; the class list is their sorted
    set unless given explicitly."""
    path = Path(path)
    rows: list[tuple[Path, str]] = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise InputError(f"{path}:{lineno}: expected 'path<TAB>label'")
            rows.append((path.parent / parts[0], parts[1]))
    if not rows:
        raise InputError(f"manifest {path} lists no images")
    labels = sorted({label for _, label in rows}) if class_names is None else list(class_names)
    index = {name: i for i, name in enumerate(labels)}
    missing = {label for _, label in rows} - set(index)
    if missing:
        raise InputError(f"manifest labels {sorted(missing)} missing from the class list")
    entries = tuple((p, index[label]) for p, label in rows)
    return DatasetIndex(class_names=tuple(labels), entries=entries)
