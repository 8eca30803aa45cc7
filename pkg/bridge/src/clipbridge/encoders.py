"""Encoder backends.

``hf:<model>`` wraps a pretrained CLIP-style checkpoint via transformers and
is the production path. ``palette:<dim>`` is a deterministic, dependency-light
stand-in for offline testing: texts and images are embedded through one
shared token table (seeded per token string), so color words in a sentence
and color patches in an image land near each other in the same space, which
is exactly the alignment property the pipeline relies on. Both backends
return raw (unnormalized) float32 embeddings.
"""

from __future__ import annotations

import math
from hashlib import blake2b

import numpy as np
from PIL import Image

# The palette backend's visual vocabulary: each color it can "see" in an
# image shares a token with the matching word.
PALETTE = {
    "red": (220, 40, 40),
    "green": (50, 170, 60),
    "blue": (40, 70, 220),
    "yellow": (230, 220, 50),
    "orange": (240, 150, 40),
    "purple": (140, 60, 180),
    "pink": (240, 130, 180),
    "brown": (140, 90, 50),
    "black": (20, 20, 20),
    "white": (245, 245, 245),
    "gray": (128, 128, 128),
    "cyan": (60, 210, 220),
    "magenta": (220, 50, 200),
    "olive": (120, 130, 40),
    "navy": (25, 30, 90),
    "teal": (40, 130, 130),
    "maroon": (130, 30, 40),
    "lime": (170, 240, 60),
    "gold": (212, 175, 55),
    "coral": (255, 127, 80),
}

EMBED_SCALE = 10.0


class EncoderError(RuntimeError):
    pass


class TextTooLongError(ValueError):
    """Text exceeds the encoder's context limit; the caller skips and reports."""


def _token_vector(token: str, dim: int) -> np.ndarray:
    """Deterministic per-token Gaussian direction, seeded by the token bytes."""
    seed = int.from_bytes(blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    gen = np.random.Generator(np.random.PCG64(seed))
    v = gen.standard_normal(dim)
    return v / math.sqrt(dim)


class PaletteEncoder:
    """Deterministic joint text/image encoder over a fixed color lexicon.

    Text: lowercase whitespace/punctuation tokens, mean of token vectors,
    scaled. Image: pixels quantized to the nearest palette color; the
    coverage-weighted mean of the matching color-word tokens, scaled. Color
    words therefore anchor both modalities to the same directions, while a
    sentence's non-color words displace the text embedding (a modality gap).
    """

    def __init__(self, dim: int = 64, context_limit: int = 77, resolution: int = 224):
        if dim < 8:
            raise EncoderError(f"palette encoder needs dim >= 8, got {dim}")
        self.dim = dim
        self.context_limit = context_limit
        self.resolution = resolution
        self.name = f"palette:{dim}"
        self._cache: dict[str, np.ndarray] = {}
        self._palette_names = list(PALETTE)
        self._palette_rgb = np.asarray([PALETTE[c] for c in self._palette_names], dtype=np.float64)

    def _tok(self, token: str) -> np.ndarray:
        if token not in self._cache:
            self._cache[token] = _token_vector(token, self.dim)
        return self._cache[token]

    @staticmethod
    def tokenize(text: str) -> list[str]:
        cleaned = "".join(c.lower() if c.isalnum() else " " for c in text)
        return cleaned.split()

    def encode_text(self, text: str) -> np.ndarray:
        tokens = self.tokenize(text)
        if not tokens:
            raise EncoderError("cannot encode an empty text")
        if len(tokens) > self.context_limit:
            raise TextTooLongError(f"{len(tokens)} tokens exceeds context limit {self.context_limit}")
        return (EMBED_SCALE * np.mean([self._tok(t) for t in tokens], axis=0)).astype(np.float32)

    def encode_image(self, path) -> np.ndarray:
        try:
            with Image.open(path) as img:
                img = img.convert("RGB").resize((self.resolution, self.resolution), Image.NEAREST)
                pixels = np.asarray(img, dtype=np.float64).reshape(-1, 3)
        except OSError as e:
            raise EncoderError(f"unreadable image {path}: {e}") from None
        dists = ((pixels[:, None, :] - self._palette_rgb[None, :, :]) ** 2).sum(axis=2)
        nearest = np.argmin(dists, axis=1)
        weights = np.bincount(nearest, minlength=len(self._palette_names)).astype(np.float64)
        weights /= weights.sum()
        vec = np.zeros(self.dim)
        for c, w in zip(self._palette_names, weights):
            if w > 0:
                vec += w * self._tok(c)
        return (EMBED_SCALE * vec).astype(np.float32)


class HFClipEncoder:
    """Pretrained CLIP checkpoint via transformers (production backend)."""

    def __init__(self, model_id: str, resolution: int = 224, device: str = "cpu", batch_size: int = 16):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as e:
            raise EncoderError(
                "the hf backend needs the transformers and torch packages "
                "(install the clipbridge[hf] extra)"
            ) from e
        self._torch = torch
        self.model = CLIPModel.from_pretrained(model_id).to(device).eval()
        self.processor = CLIPProcessor.from_pretrained(model_id)
        if resolution != 224:
            self.processor.image_processor.size = {"shortest_edge": resolution}
            self.processor.image_processor.crop_size = {"height": resolution, "width": resolution}
        self.resolution = resolution
        self.device = device
        self.batch_size = batch_size
        self.name = f"hf:{model_id}"
        self.context_limit = self.processor.tokenizer.model_max_length
        self.dim = self.model.config.projection_dim

    def encode_text(self, text: str) -> np.ndarray:
        tokens = self.processor.tokenizer(text)["input_ids"]
        if len(tokens) > self.context_limit:
            raise TextTooLongError(f"{len(tokens)} tokens exceeds context limit {self.context_limit}")
        inputs = self.processor(text=[text], return_tensors="pt", padding=True, truncation=False)
        with self._torch.no_grad():
            feats = self.model.get_text_features(**{k: v.to(self.device) for k, v in inputs.items()})
        return feats[0].cpu().numpy().astype(np.float32)

    def encode_image(self, path) -> np.ndarray:
        try:
            with Image.open(path) as img:
                image = img.convert("RGB")
                inputs = self.processor(images=[image], return_tensors="pt")
        except OSError as e:
            raise EncoderError(f"unreadable image {path}: {e}") from None
        with self._torch.no_grad():
            feats = self.model.get_image_features(**{k: v.to(self.device) for k, v in inputs.items()})
        return feats[0].cpu().numpy().astype(np.float32)


def make_encoder(spec: str, resolution: int = 224) -> PaletteEncoder | HFClipEncoder:
    """Build an encoder from a ``backend:arg`` spec string."""
    kind, _, arg = spec.partition(":")
    if kind == "palette":
        return PaletteEncoder(dim=int(arg) if arg else 64, resolution=resolution)
    if kind == "hf":
        if not arg:
            raise EncoderError("hf backend needs a model id, e.g. hf:openai/clip-vit-base-patch32")
        return HFClipEncoder(arg, resolution=resolution)
    raise EncoderError(f"unknown encoder backend {spec!r} (use palette:<dim> or hf:<model>)")
