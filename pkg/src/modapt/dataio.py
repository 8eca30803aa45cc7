"""On-disk formats and loaders: label vocabularies, labeled texts, embedding
stores, adapter checkpoints, score files, and the synthetic bimodal benchmark.

Binary layouts (all little-endian):

``*.taie`` embedding store
    header  ``magic b"TAIE" | version u16 | d u32 | N u32 | count u64 |
    modality u8 (0=text, 1=image) | vocab_hash u64``
    records ``marks int8[N] | vector float32[d]`` repeated ``count`` times.
    Record identity is positional: the loader assigns ``{modality}-{i:06d}``
    as the source id, and score files key rows by those ids.

``*.adpt`` adapter checkpoint
    header  ``magic b"ADPT" | version u16 | d u32 | N u32 | n_hidden u16 |
    hidden u32[n_hidden] | dropout f32 | vocab_hash u64 | seed u64``
    payload layer weights then biases, in layer order, float32 row-major.
    Weight matrices are stored as (fan_in, fan_out).

Text files: ``vocab.json`` is a JSON array of label names; ``texts.jsonl``
has one ``{id, text, labels}`` object per line; ``scores.jsonl`` one
``{source_id, scores}`` object per line.

Embedding payloads are float32 (typical encoder output precision); all
arithmetic upcasts to float64.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from hashlib import blake2b

import numpy as np

from .numkit import RandomSource, sphere_surface_batch

STORE_MAGIC = b"TAIE"
STORE_VERSION = 1
CHECKPOINT_MAGIC = b"ADPT"
CHECKPOINT_VERSION = 1

_MODALITY_CODES = {"text": 0, "image": 1}
_MODALITY_NAMES = {v: k for k, v in _MODALITY_CODES.items()}

# Unit-norm label prototypes are scaled by this constant so that the default
# perturbation radii and gap norms land on comparable scales.
PROTOTYPE_SCALE = 10.0


class StoreError(Exception):
    """Base class for embedding-store and checkpoint load failures."""


class BadMagicError(StoreError):
    pass


class UnsupportedVersionError(StoreError):
    pass


class HeaderError(StoreError):
    pass


class VocabHashMismatchError(StoreError):
    pass


class TruncatedPayloadError(StoreError):
    pass


class CorruptPayloadError(StoreError):
    pass


class InvalidConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Label vocabulary


def _canonical_vocab_bytes(names) -> bytes:
    return json.dumps(list(names), ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def vocab_digest(names) -> int:
    """64-bit digest of the canonical vocab serialization (blake2b-8)."""
    return int.from_bytes(blake2b(_canonical_vocab_bytes(names), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class LabelVocab:
    """Ordered candidate label set; a name's index is its label id everywhere."""

    names: tuple[str, ...]
    hash: int = field(init=False)

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        if len(names) < 1:
            raise InvalidConfigError("vocab must contain at least one label")
        if any(not n for n in names):
            raise InvalidConfigError("vocab labels must be nonempty strings")
        if len(set(names)) != len(names):
            raise InvalidConfigError("vocab labels must be unique")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "hash", vocab_digest(names))

    def __len__(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        return self.names.index(name)

    @classmethod
    def from_json_file(cls, path) -> "LabelVocab":
        with open(path, "r", encoding="utf-8") as f:
            names = json.load(f)
        if not isinstance(names, list):
            raise InvalidConfigError(f"{path}: vocab file must be a JSON array of strings")
        return cls(tuple(names))

    def to_json_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(list(self.names), f, ensure_ascii=False, indent=0)
            f.write("\n")


# ---------------------------------------------------------------------------
# Annotations and records


def multihot(indices, n_labels: int) -> np.ndarray:
    """{0,1}^N annotation with the given positive label indices."""
    marks = np.zeros(n_labels, dtype=np.int8)
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.size:
        if idx.min() < 0 or idx.max() >= n_labels:
            raise InvalidConfigError(f"label index out of range for N={n_labels}")
        marks[idx] = 1
    return marks


def is_partial(marks: np.ndarray) -> bool:
    """True if any label is marked unknown (-1)."""
    return bool(np.any(marks < 0))


def positive_indices(marks: np.ndarray) -> tuple[int, ...]:
    return tuple(int(j) for j in np.flatnonzero(marks > 0))


def _validate_marks(marks: np.ndarray, n_labels: int) -> np.ndarray:
    marks = np.asarray(marks, dtype=np.int8)
    if marks.shape != (n_labels,):
        raise HeaderError(f"annotation length {marks.shape} does not match N={n_labels}")
    if not np.all(np.isin(marks, (-1, 0, 1))):
        raise HeaderError("annotation marks must be in {-1, 0, 1}")
    return marks


def positional_id(modality: str, index: int) -> str:
    return f"{modality}-{index:06d}"


@dataclass(eq=False)
class EmbeddingRecord:
    """One embedded sample: a d-vector plus its (possibly partial) annotation."""

    source_id: str
    vector: np.ndarray  # float32 (d,)
    marks: np.ndarray  # int8 (N,); -1 = unknown
    modality: str  # "text" | "image"


def records_dims(records) -> tuple[int, int]:
    """(d, N) shared by all records; raises if inconsistent or empty-less."""
    if not records:
        raise InvalidConfigError("record list is empty")
    d = records[0].vector.shape[0]
    n = records[0].marks.shape[0]
    for r in records:
        if r.vector.shape != (d,) or r.marks.shape != (n,):
            raise HeaderError("records disagree on (d, N)")
    return int(d), int(n)


# ---------------------------------------------------------------------------
# Embedding store

_STORE_HEADER = struct.Struct("<4sHIIQBQ")


def write_store(path, records, vocab: LabelVocab, modality: str) -> None:
    """Serialize records to a ``*.taie`` store. Byte-exact round trip."""
    if modality not in _MODALITY_CODES:
        raise InvalidConfigError(f"unknown modality {modality!r}")
    records = list(records)
    if records:
        d, n = records_dims(records)
    else:
        d, n = 1, len(vocab)
    if n != len(vocab):
        raise HeaderError(f"annotation length {n} does not match vocab size {len(vocab)}")
    for r in records:
        if r.modality != modality:
            raise HeaderError(f"record {r.source_id} has modality {r.modality!r}, store is {modality!r}")
        _validate_marks(r.marks, n)
        if not np.all(np.isfinite(r.vector)):
            raise HeaderError(f"record {r.source_id} has non-finite coordinates")
    header = _STORE_HEADER.pack(
        STORE_MAGIC, STORE_VERSION, d, n, len(records), _MODALITY_CODES[modality], vocab.hash
    )
    with open(path, "wb") as f:
        f.write(header)
        for r in records:
            f.write(np.ascontiguousarray(r.marks, dtype=np.int8).tobytes())
            f.write(np.ascontiguousarray(r.vector, dtype="<f4").tobytes())


@dataclass(frozen=True)
class StoreHeader:
    d: int
    n_labels: int
    count: int
    modality: str
    vocab_hash: int


def read_store_header(path) -> StoreHeader:
    with open(path, "rb") as f:
        raw = f.read(_STORE_HEADER.size)
    if len(raw) < _STORE_HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than store header")
    magic, version, d, n, count, modality_code, vhash = _STORE_HEADER.unpack(raw)
    if magic != STORE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != STORE_VERSION:
        raise UnsupportedVersionError(f"{path}: store version {version} not supported")
    if modality_code not in _MODALITY_NAMES:
        raise HeaderError(f"{path}: unknown modality code {modality_code}")
    if d < 1 or n < 1:
        raise HeaderError(f"{path}: invalid dimensions d={d}, N={n}")
    return StoreHeader(d, n, count, _MODALITY_NAMES[modality_code], vhash)


def read_store(path, vocab: LabelVocab) -> list[EmbeddingRecord]:
    """Load a store, validating every header invariant before the payload.

    Source ids are positional (``{modality}-{index:06d}``).
    """
    header = read_store_header(path)
    if header.vocab_hash != vocab.hash:
        raise VocabHashMismatchError(
            f"{path}: store was written for vocab hash {header.vocab_hash:#x}, "
            f"supplied vocab hashes to {vocab.hash:#x}"
        )
    if header.n_labels != len(vocab):
        raise HeaderError(f"{path}: store N={header.n_labels} but vocab has {len(vocab)} labels")
    record_size = header.n_labels + 4 * header.d
    with open(path, "rb") as f:
        f.seek(_STORE_HEADER.size)
        payload = f.read()
    if len(payload) != header.count * record_size:
        raise TruncatedPayloadError(
            f"{path}: expected {header.count * record_size} payload bytes, found {len(payload)}"
        )
    dtype = np.dtype([("marks", np.int8, header.n_labels), ("vector", "<f4", header.d)])
    raw = np.frombuffer(payload, dtype=dtype)
    records = []
    for i in range(header.count):
        marks = _validate_marks(raw["marks"][i].copy(), header.n_labels)
        vector = raw["vector"][i].copy()
        if not np.all(np.isfinite(vector)):
            raise CorruptPayloadError(f"{path}: record {i} has non-finite coordinates")
        records.append(
            EmbeddingRecord(positional_id(header.modality, i), vector, marks, header.modality)
        )
    return records


# ---------------------------------------------------------------------------
# Adapter checkpoints


@dataclass
class AdapterCheckpoint:
    """Persisted adapter weights plus the header metadata that pins them."""

    d: int
    n_labels: int
    hidden: tuple[int, ...]
    dropout: float
    vocab_hash: int
    seed: int
    weights: list[np.ndarray]  # float32 (fan_in, fan_out), layer order
    biases: list[np.ndarray]  # float32 (fan_out,)

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.d, *self.hidden, self.n_labels)

    @property
    def param_count(self) -> int:
        dims = self.layer_dims
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


def save_checkpoint(path, ckpt: AdapterCheckpoint) -> None:
    dims = ckpt.layer_dims
    expected = [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
    got = [w.shape for w in ckpt.weights]
    if got != expected or [b.shape for b in ckpt.biases] != [(o,) for _, o in expected]:
        raise HeaderError(f"checkpoint payload shapes {got} do not match header dims {dims}")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHIIH", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, ckpt.d, ckpt.n_labels, len(ckpt.hidden)))
        f.write(struct.pack(f"<{len(ckpt.hidden)}I", *ckpt.hidden))
        f.write(struct.pack("<fQQ", ckpt.dropout, ckpt.vocab_hash, ckpt.seed))
        for w, b in zip(ckpt.weights, ckpt.biases):
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_checkpoint(path, vocab: LabelVocab | None = None, force: bool = False) -> AdapterCheckpoint:
    """Load a checkpoint; refuses a vocab-hash mismatch unless forced."""
    with open(path, "rb") as f:
        data = f.read()
    fixed = struct.Struct("<4sHIIH")
    if len(data) < fixed.size:
        raise TruncatedPayloadError(f"{path}: file shorter than checkpoint header")
    magic, version, d, n, n_hidden = fixed.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint version {version} not supported")
    off = fixed.size
    try:
        hidden = struct.unpack_from(f"<{n_hidden}I", data, off)
        off += 4 * n_hidden
        dropout, vhash, seed = struct.unpack_from("<fQQ", data, off)
        off += struct.calcsize("<fQQ")
    except struct.error as e:
        raise TruncatedPayloadError(f"{path}: truncated checkpoint header: {e}") from None
    dims = (d, *hidden, n)
    if any(x < 1 for x in dims):
        raise HeaderError(f"{path}: invalid layer dims {dims}")
    n_params = sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))
    payload = data[off:]
    if len(payload) != 4 * n_params:
        raise CorruptPayloadError(
            f"{path}: header implies {4 * n_params} payload bytes, found {len(payload)}"
        )
    if vocab is not None and vocab.hash != vhash:
        if not force:
            raise VocabHashMismatchError(
                f"{path}: checkpoint vocab hash {vhash:#x} does not match supplied vocab "
                f"{vocab.hash:#x} (pass force=True to load anyway)"
            )
        warnings.warn(
            f"{path}: vocab hash mismatch ({vhash:#x} vs {vocab.hash:#x}), loading anyway",
            UserWarning,
            stacklevel=2,
        )
    flat = np.frombuffer(payload, dtype="<f4")
    weights, biases, pos = [], [], 0
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        weights.append(flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        pos += fan_in * fan_out
        biases.append(flat[pos : pos + fan_out].copy())
        pos += fan_out
    ckpt = AdapterCheckpoint(d, n, tuple(int(h) for h in hidden), float(dropout), vhash, seed, weights, biases)
    for w, b in zip(ckpt.weights, ckpt.biases):
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise CorruptPayloadError(f"{path}: non-finite parameter values")
    return ckpt


# ---------------------------------------------------------------------------
# Score files and labeled texts


def write_scores(path, scored) -> None:
    """Write ``{source_id, scores}`` lines; scores must be finite in [0, 1]."""
    with open(path, "w", encoding="utf-8") as f:
        for source_id, scores in scored:
            arr = np.asarray(scores, dtype=np.float64)
            if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
                raise InvalidConfigError(f"scores for {source_id} must be finite in [0, 1]")
            f.write(json.dumps({"source_id": source_id, "scores": arr.tolist()}) + "\n")


def read_scores(path, n_labels: int | None = None) -> list[tuple[str, np.ndarray]]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            scores = np.asarray(obj["scores"], dtype=np.float64)
            if n_labels is not None and scores.shape != (n_labels,):
                raise HeaderError(f"{path}:{lineno}: expected {n_labels} scores, got {scores.shape}")
            if not np.all(np.isfinite(scores)):
                raise CorruptPayloadError(f"{path}:{lineno}: non-finite score")
            out.append((str(obj["source_id"]), scores))
    return out


@dataclass(frozen=True)
class TextRecord:
    """A generated training text with the label indices it was built from."""

    id: str
    text: str
    labels: tuple[int, ...]


def write_texts(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(
                json.dumps({"id": r.id, "text": r.text, "labels": list(r.labels)}, ensure_ascii=False)
                + "\n"
            )


def read_texts(path, vocab: LabelVocab | None = None) -> list[TextRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            labels = tuple(int(j) for j in obj["labels"])
            if vocab is not None and any(j < 0 or j >= len(vocab) for j in labels):
                raise HeaderError(f"{path}:{lineno}: label index out of range for N={len(vocab)}")
            out.append(TextRecord(str(obj["id"]), str(obj["text"]), labels))
    return out


# ---------------------------------------------------------------------------
# Annotation masking and shot selection


def mask_known_rate(records, rate: float, rng: RandomSource) -> list[EmbeddingRecord]:
    """Hide each known label independently with probability 1 - rate.

    Per-(record, label) Bernoulli reveal; hidden marks become -1. rate=1.0
    reveals everything exactly; rate=0.0 hides everything.
    """
    if not 0.0 <= rate <= 1.0:
        raise InvalidConfigError(f"known rate must be in [0, 1], got {rate}")
    out = []
    for r in records:
        reveal = rng.uniform(r.marks.shape[0]) < rate
        marks = np.where(reveal, r.marks, np.int8(-1)).astype(np.int8)
        out.append(EmbeddingRecord(r.source_id, r.vector, marks, r.modality))
    return out


def select_shots(records, n_shots: int, rng: RandomSource) -> list[EmbeddingRecord]:
    """Per label, keep the first n_shots records containing it under a seeded
    shuffle; returns the deduplicated union in original store order."""
    if n_shots < 0:
        raise InvalidConfigError(f"shot count must be >= 0, got {n_shots}")
    if n_shots == 0 or not records:
        return []
    _, n_labels = records_dims(records)
    order = rng.permutation(len(records))
    chosen: set[int] = set()
    for j in range(n_labels):
        taken = 0
        for idx in order:
            if taken >= n_shots:
                break
            if records[idx].marks[j] > 0:
                chosen.add(int(idx))
                taken += 1
    return [records[i] for i in sorted(chosen)]


# ---------------------------------------------------------------------------
# Synthetic bimodal benchmark


@dataclass(frozen=True)
class SynthConfig:
    """Desk-scale stand-in for a jointly trained text/image embedding space.

    Each label gets a unit prototype (scaled by PROTOTYPE_SCALE); samples mix
    prototype subsets; the two modalities sit on opposite sides of a fixed
    gap displacement, plus isotropic cluster noise. ``cluster_noise`` is the
    expected noise vector NORM (per-coordinate std is cluster_noise/sqrt(d)),
    so gap_norm and cluster_noise are directly comparable distances no matter
    the dimension.
    """

    n_labels: int = 20
    dim: int = 256
    n_texts: int = 2000
    n_images: int = 1000
    gap_norm: float = 5.0
    cluster_noise: float = 1.0
    # Default 2: with heavier label mixing, per-label visual centroids blend
    # co-occurring prototypes so strongly that combination offsets stop
    # pointing at the right clusters at this scale.
    max_labels_per_sample: int = 2
    seed: int = 0

    def __post_init__(self):
        if min(self.n_labels, self.dim, self.n_texts, self.n_images) < 1:
            raise InvalidConfigError("n_labels, dim, n_texts, n_images must all be >= 1")
        if self.gap_norm < 0 or self.cluster_noise < 0:
            raise InvalidConfigError("gap_norm and cluster_noise must be >= 0")
        if not 1 <= self.max_labels_per_sample <= self.n_labels:
            raise InvalidConfigError(
                f"max_labels_per_sample must be in [1, {self.n_labels}], got {self.max_labels_per_sample}"
            )


@dataclass
class SynthBenchmark:
    vocab: LabelVocab
    texts: list[EmbeddingRecord]
    images: list[EmbeddingRecord]
    prototypes: np.ndarray  # (N, d) float64, rows unit-norm before scaling
    gap_text: np.ndarray  # (d,) unit vector
    gap_image: np.ndarray  # (d,) unit vector


def synth_benchmark(cfg: SynthConfig) -> SynthBenchmark:
    """Generate aligned text/image embedding stores with a modality gap.

    Draw order (fixed for determinism): label prototypes, the two gap
    directions, then per text sample (subset size, subset, noise), then per
    image sample likewise.
    """
    rng = RandomSource(cfg.seed)
    protos = sphere_surface_batch(rng, cfg.n_labels, cfg.dim, 1.0)
    gap_text = sphere_surface_batch(rng, 1, cfg.dim, 1.0)[0]
    gap_image = sphere_surface_batch(rng, 1, cfg.dim, 1.0)[0]
    vocab = LabelVocab(tuple(f"label-{j:03d}" for j in range(cfg.n_labels)))

    noise_scale = cfg.cluster_noise / math.sqrt(cfg.dim)

    def make(modality: str, count: int, gap_dir: np.ndarray) -> list[EmbeddingRecord]:
        records = []
        for i in range(count):
            k = int(rng.integers(1, cfg.max_labels_per_sample + 1))
            subset = np.sort(rng.choice_without_replacement(cfg.n_labels, k))
            base = PROTOTYPE_SCALE * protos[subset].mean(axis=0)
            noise = noise_scale * rng.normal(cfg.dim)
            vec = base + cfg.gap_norm * gap_dir + noise
            records.append(
                EmbeddingRecord(
                    positional_id(modality, i),
                    vec.astype(np.float32),
                    multihot(subset, cfg.n_labels),
                    modality,
                )
            )
        return records

    texts = make("text", cfg.n_texts, gap_text)
    images = make("image", cfg.n_images, gap_image)
    return SynthBenchmark(vocab, texts, images, protos, gap_text, gap_image)
