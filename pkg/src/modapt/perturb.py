"""Embedding-space perturbation: plain hypersphere noise on text embeddings,
the mixed text/image variant for few-shot training, and the shifted variant
for partial-label training.

The shifted variant estimates where image clusters sit from partially
annotated images: per-label visual centroids are averaged over the images
known to contain that label, per-combination text centroids over the texts
generated from exactly that combination, and the difference is the offset
that moves each text embedding onto its combination's visual cluster before
noise is applied. Combinations whose labels have no known-positive image at
all fall back to a zero offset (plain perturbation).

Perturbation touches vectors only; annotations are never altered.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataio import (
    BadMagicError,
    InvalidConfigError,
    LabelVocab,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from .numkit import RandomSource, ball_interior_batch, sphere_surface_batch

SCHEMES = ("surface", "interior")

CENTROID_MAGIC = b"CNTR"
CENTROID_VERSION = 1


class RadiusOrderWarning(UserWarning):
    """The image radius is expected to be much smaller than the text radius."""


@dataclass(frozen=True)
class PerturbConfig:
    """Noise radii for the three training regimes plus the sampling scheme.

    Defaults follow the reference operating point: text radius 25, image
    radius 1, post-shift text radius 10, surface sampling (the ablation
    favors surface over interior).
    """

    radius: float = 25.0
    image_radius: float = 1.0
    shift_radius: float = 10.0
    scheme: str = "surface"

    def __post_init__(self):
        for name in ("radius", "image_radius", "shift_radius"):
            v = getattr(self, name)
            if v < 0 or not np.isfinite(v):
                raise InvalidConfigError(f"{name} must be finite and >= 0, got {v}")
        if self.scheme not in SCHEMES:
            raise InvalidConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")


def noise_batch(rng: RandomSource, n: int, d: int, radius: float, scheme: str) -> np.ndarray:
    """(n, d) noise draws at the given radius, surface or interior."""
    if scheme == "surface":
        return sphere_surface_batch(rng, n, d, radius)
    if scheme == "interior":
        return ball_interior_batch(rng, n, d, radius)
    raise InvalidConfigError(f"scheme must be one of {SCHEMES}, got {scheme!r}")


def perturb_text(rng: RandomSource, t: np.ndarray, cfg: PerturbConfig) -> np.ndarray:
    """t plus a fresh noise draw at the text radius. Identity when radius=0."""
    t = np.asarray(t, dtype=np.float64)
    return t + noise_batch(rng, 1, t.shape[0], cfg.radius, cfg.scheme)[0]


def perturb_image(rng: RandomSource, v: np.ndarray, cfg: PerturbConfig) -> np.ndarray:
    """v plus a fresh noise draw at the (much smaller) image radius."""
    if cfg.image_radius > cfg.radius:
        warnings.warn(
            f"image radius {cfg.image_radius} exceeds text radius {cfg.radius}; "
            "the image radius is meant to be much smaller",
            RadiusOrderWarning,
            stacklevel=2,
        )
    v = np.asarray(v, dtype=np.float64)
    return v + noise_batch(rng, 1, v.shape[0], cfg.image_radius, cfg.scheme)[0]


# ---------------------------------------------------------------------------
# Centroids and offsets


def combo_key(marks: np.ndarray) -> tuple[int, ...]:
    """Canonical key for a label combination: sorted positive indices."""
    return tuple(int(j) for j in np.flatnonzero(np.asarray(marks) > 0))


def estimate_visual_centroids(image_records) -> dict[int, np.ndarray]:
    """Per-label mean of the images known to contain that label.

    Marks of 0 (absent) and -1 (unknown) are both excluded. Labels with no
    known-positive image are absent from the map; that absence is a
    represented state, not an error.
    """
    if not image_records:
        raise InvalidConfigError("need at least one image record")
    marks = np.stack([r.marks for r in image_records])
    vectors = np.stack([r.vector for r in image_records]).astype(np.float64)
    known_pos = (marks > 0).astype(np.float64)
    counts = known_pos.sum(axis=0)
    sums = known_pos.T @ vectors
    return {int(j): sums[j] / counts[j] for j in np.flatnonzero(counts > 0)}


def text_combination_centroids(text_records) -> dict[tuple[int, ...], np.ndarray]:
    """Mean text embedding per distinct exact label combination."""
    if not text_records:
        raise InvalidConfigError("need at least one text record")
    groups: dict[tuple[int, ...], list[np.ndarray]] = {}
    for r in text_records:
        groups.setdefault(combo_key(r.marks), []).append(r.vector.astype(np.float64))
    return {key: np.mean(vecs, axis=0) for key, vecs in groups.items()}


def compute_offsets(
    visual: dict[int, np.ndarray],
    text_centroids: dict[tuple[int, ...], np.ndarray],
) -> dict[tuple[int, ...], np.ndarray]:
    """Per-combination displacement from the text centroid to the mean of the
    available visual label centroids.

    Labels without a visual centroid drop out of both the numerator and the
    denominator; a combination with no available label at all gets a zero
    offset so shifting degenerates to plain perturbation.
    """
    offsets = {}
    for key, c_text in text_centroids.items():
        avail = [visual[j] for j in key if j in visual]
        if avail:
            offsets[key] = np.mean(avail, axis=0) - c_text
        else:
            offsets[key] = np.zeros_like(c_text)
    return offsets


def shift_text(t: np.ndarray, combination, offsets: dict[tuple[int, ...], np.ndarray]) -> np.ndarray:
    """t plus its combination's offset; zero offset if the combination is
    absent from the map. The caller perturbs the result at the shift radius."""
    t = np.asarray(t, dtype=np.float64)
    key = combo_key(combination) if not isinstance(combination, tuple) else combination
    off = offsets.get(key)
    return t if off is None else t + off


@dataclass
class CentroidTable:
    """Visual label centroids, text combination centroids, and their offsets."""

    d: int
    n_labels: int
    vocab_hash: int
    visual: dict[int, np.ndarray] = field(default_factory=dict)
    text: dict[tuple[int, ...], np.ndarray] = field(default_factory=dict)
    offsets: dict[tuple[int, ...], np.ndarray] = field(default_factory=dict)


def estimate_table(text_records, image_records, vocab: LabelVocab) -> CentroidTable:
    """One-call estimation of everything the shifted variant needs."""
    visual = estimate_visual_centroids(image_records)
    text = text_combination_centroids(text_records)
    d = text_records[0].vector.shape[0]
    return CentroidTable(
        d=int(d),
        n_labels=len(vocab),
        vocab_hash=vocab.hash,
        visual=visual,
        text=text,
        offsets=compute_offsets(visual, text),
    )


_TABLE_HEADER = struct.Struct("<4sHIIQ")


def save_centroid_table(path, table: CentroidTable) -> None:
    """Serialize a centroid table (entries sorted by key for determinism)."""
    if set(table.offsets) != set(table.text):
        raise InvalidConfigError("offset keys must match text centroid keys")
    with open(path, "wb") as f:
        f.write(_TABLE_HEADER.pack(CENTROID_MAGIC, CENTROID_VERSION, table.d, table.n_labels, table.vocab_hash))
        f.write(struct.pack("<I", len(table.visual)))
        for j in sorted(table.visual):
            f.write(struct.pack("<I", j))
            f.write(np.ascontiguousarray(table.visual[j], dtype="<f8").tobytes())
        f.write(struct.pack("<I", len(table.text)))
        for key in sorted(table.text):
            f.write(struct.pack("<I", len(key)))
            f.write(struct.pack(f"<{len(key)}I", *key))
            f.write(np.ascontiguousarray(table.text[key], dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(table.offsets[key], dtype="<f8").tobytes())


def load_centroid_table(path) -> CentroidTable:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _TABLE_HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than centroid header")
    magic, version, d, n_labels, vhash = _TABLE_HEADER.unpack_from(data, 0)
    if magic != CENTROID_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != CENTROID_VERSION:
        raise UnsupportedVersionError(f"{path}: centroid table version {version} not supported")
    off = _TABLE_HEADER.size
    vec_bytes = 8 * d

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise TruncatedPayloadError(f"{path}: truncated centroid table")
        out = data[off : off + n]
        off += n
        return out

    table = CentroidTable(d=d, n_labels=n_labels, vocab_hash=vhash)
    (n_visual,) = struct.unpack("<I", take(4))
    for _ in range(n_visual):
        (j,) = struct.unpack("<I", take(4))
        table.visual[j] = np.frombuffer(take(vec_bytes), dtype="<f8").copy()
    (n_combos,) = struct.unpack("<I", take(4))
    for _ in range(n_combos):
        (k,) = struct.unpack("<I", take(4))
        key = struct.unpack(f"<{k}I", take(4 * k))
        table.text[key] = np.frombuffer(take(vec_bytes), dtype="<f8").copy()
        table.offsets[key] = np.frombuffer(take(vec_bytes), dtype="<f8").copy()
    return table
