"""Embedding backends.

``for_model()`` picks a backend by model identifier:

- ``stub:<dim>`` — a deterministic offline encoder that hashes the input
  into a Philox-seeded unit vector. No semantics, exact reproducibility;
  used in tests and anywhere the real checkpoint is unavailable.
- anything else — a CLIP checkpoint loaded through ``transformers``
  (requires the ``clip`` extra).
"""
from __future__ import annotations

import hashlib

import numpy as np
from PIL import Image

from .errors import SpecError


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


class StubEncoder:
    """Hash-seeded random unit embeddings; deterministic across processes."""

    def __init__(self, dim: int, seed: int = 0):
        if dim < 2:
            raise SpecError(f"stub dimension must be >= 2, got {dim}")
        self.dim = int(dim)
        self.seed = int(seed)

    def _vector(self, payload: bytes) -> np.ndarray:
        digest = hashlib.blake2b(payload, digest_size=16).digest()
        key = np.frombuffer(digest, dtype=np.uint64) ^ np.uint64(self.seed)
        rng = np.random.Generator(np.random.Philox(key=key))
        return _unit(rng.normal(size=self.dim))

    def encode_texts(self, prompts: list[str]) -> np.ndarray:
        return np.stack([self._vector(b"text:" + p.encode()) for p in prompts])

    def encode_images(self, images: list[Image.Image]) -> np.ndarray:
        out = []
        for img in images:
            rgb = img.convert("RGB")
            payload = b"image:" + rgb.size[0].to_bytes(4, "little") + rgb.tobytes()
            out.append(self._vector(payload))
        return np.stack(out)


class ClipEncoder:
    """Frozen CLIP checkpoint via transformers; embeddings are L2-normalized
    float32 regardless of the model's compute dtype."""

    def __init__(self, model_id: str):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as e:  # pragma: no cover - exercised only with the extra
            raise SpecError(
                f"model {model_id!r} needs the 'clip' extra (torch + transformers)"
            ) from e
        self._torch = torch
        self.model = CLIPModel.from_pretrained(model_id)
        self.model.eval()
        self.processor = CLIPProcessor.from_pretrained(model_id)
        self.dim = int(self.model.config.projection_dim)

    def encode_texts(self, prompts: list[str]) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            inputs = self.processor(text=prompts, return_tensors="pt", padding=True)
            feats = self.model.get_text_features(**inputs)
        return _unit(feats.float().cpu().numpy().astype(np.float64))

    def encode_images(self, images: list[Image.Image]) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            inputs = self.processor(images=[im.convert("RGB") for im in images], return_tensors="pt")
            feats = self.model.get_image_features(**inputs)
        return _unit(feats.float().cpu().numpy().astype(np.float64))


def for_model(model_id: str):
    if model_id.startswith("stub:"):
        parts = model_id.split(":")
        try:
            dim = int(parts[1])
            seed = int(parts[2]) if len(parts) > 2 else 0
        except (IndexError, ValueError) as e:
            raise SpecError(f"bad stub encoder id {model_id!r}; use stub:<dim>[:<seed>]") from e
        return StubEncoder(dim, seed)
    return ClipEncoder(model_id)
