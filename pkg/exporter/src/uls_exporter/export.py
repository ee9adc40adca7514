"""Export pipeline: text anchors from class prompts, per-image embeddings
with optional lightly augmented extra views, written as a ULS1 stream.

View 0 is always the canonical preprocess of the image; views 1..K-1 are
random-crop/flip variants whose randomness is seeded per (record, view), so
re-exports are reproducible up to encoder nondeterminism.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .encoders import for_model
from .errors import InputError, SpecError
from .manifest import DatasetIndex, from_folders, from_manifest
from .uls_writer import Uls1Writer

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "a photo of a {}"
ENSEMBLE_TEMPLATES = (
    "a photo of a {}",
    "a blurry photo of a {}",
    "a drawing of a {}",
    "a photo of the large {}",
)


@dataclass(frozen=True)
class ExportSpec:
    model: str
    out: str
    image_root: Optional[str] = None
    manifest: Optional[str] = None
    views: int = 1
    templates: tuple[str, ...] = (DEFAULT_TEMPLATE,)
    seed: int = 0

    def __post_init__(self):
        if self.views < 1:
            raise SpecError(f"views must be >= 1, got {self.views}")
        if (self.image_root is None) == (self.manifest is None):
            raise SpecError("give exactly one of image_root or manifest")
        if not self.templates:
            raise SpecError("at least one prompt template is required")
        for t in self.templates:
            if "{}" not in t:
                raise SpecError(f"template {t!r} has no {{}} placeholder")


@dataclass
class ExportResult:
    n_written: int
    n_skipped: int
    class_names: tuple[str, ...]
    skipped: list[str] = field(default_factory=list)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def build_anchors(encoder, class_names, templates) -> np.ndarray:
    """Mean text embedding over the prompt templates, renormalized."""
    per_template = []
    for template in templates:
        prompts = [template.format(name) for name in class_names]
        per_template.append(encoder.encode_texts(list(prompts)))
    return _unit(np.mean(per_template, axis=0))


def light_augment(img: Image.Image, rng: np.random.Generator) -> Image.Image:
    """Random crop (80-100% of each side) plus a coin-flip mirror; nothing
    heavier, so the augmented views keep the image's semantics."""
    w, h = img.size
    cw = max(1, int(round(w * rng.uniform(0.8, 1.0))))
    ch = max(1, int(round(h * rng.uniform(0.8, 1.0))))
    left = int(rng.integers(0, w - cw + 1))
    top = int(rng.integers(0, h - ch + 1))
    out = img.crop((left, top, left + cw, top + ch)).resize((w, h))
    if rng.integers(2):
        out = out.transpose(Image.FLIP_LEFT_RIGHT)
    return out


def load_index(spec: ExportSpec) -> DatasetIndex:
    if spec.manifest is not None:
        return from_manifest(spec.manifest)
    return from_folders(spec.image_root)


def export(spec: ExportSpec) -> ExportResult:
    encoder = for_model(spec.model)
    index = load_index(spec)
    anchors = build_anchors(encoder, index.class_names, spec.templates)
    if anchors.shape[0] != len(index.class_names):
        raise InputError("anchor count does not match the class list")

    skipped: list[str] = []
    n = 0
    with Uls1Writer(spec.out, anchors, views=spec.views, labeled=True) as writer:
        for record_idx, (path, label) in enumerate(index.entries):
            try:
                with Image.open(path) as img:
                    img = img.convert("RGB")
            except (OSError, UnidentifiedImageError) as e:
                logger.warning("skipping undecodable image %s: %s", path, e)
                skipped.append(str(path))
                continue
            batch = [img]
            for k in range(1, spec.views):
                key = np.array(
                    [spec.seed, (record_idx << 16) | k], dtype=np.uint64
                )
                rng = np.random.Generator(np.random.Philox(key=key))
                batch.append(light_augment(img, rng))
            views = _unit(encoder.encode_images(batch).astype(np.float64))
            writer.write(views.astype(np.float32), label)
            n += 1
    if n == 0:
        Path(spec.out).unlink(missing_ok=True)
        raise InputError("no images could be exported")
    return ExportResult(
        n_written=n,
        n_skipped=len(skipped),
        class_names=index.class_names,
        skipped=skipped,
    )
