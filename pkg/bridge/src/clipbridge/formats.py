"""Independent writers/readers for the shared file formats.

Implemented from the format definitions, not by importing the training
package: the byte layouts are the contract between the two components.

``*.taie`` store, little-endian: header ``magic b"TAIE" | version u16 |
d u32 | N u32 | count u64 | modality u8 (0=text, 1=image) | vocab_hash u64``
followed by ``count`` records of ``marks int8[N] | vector float32[d]``.
The vocab hash is blake2b-8 (little-endian) of the compact JSON array of
label names.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from hashlib import blake2b

import numpy as np

STORE_MAGIC = b"TAIE"
STORE_VERSION = 1
MODALITY_CODES = {"text": 0, "image": 1}

_STORE_HEADER = struct.Struct("<4sHIIQBQ")


class FormatError(ValueError):
    pass


def vocab_hash(names) -> int:
    canonical = json.dumps(list(names), ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    return int.from_bytes(blake2b(canonical, digest_size=8).digest(), "little")


def load_vocab(path) -> list[str]:
    with open(path, "r", encoding="utf-8") as f:
        names = json.load(f)
    if not isinstance(names, list) or not names or len(set(names)) != len(names):
        raise FormatError(f"{path}: vocab must be a nonempty JSON array of unique strings")
    return [str(n) for n in names]


def write_taie(path, vectors: np.ndarray, marks: np.ndarray, modality: str, names) -> None:
    """Serialize (count, d) float vectors and (count, N) int8 marks."""
    if modality not in MODALITY_CODES:
        raise FormatError(f"unknown modality {modality!r}")
    vectors = np.asarray(vectors, dtype="<f4")
    marks = np.asarray(marks, dtype=np.int8)
    if vectors.ndim != 2 or marks.ndim != 2 or vectors.shape[0] != marks.shape[0]:
        raise FormatError(f"shape mismatch: vectors {vectors.shape}, marks {marks.shape}")
    if marks.shape[1] != len(names):
        raise FormatError(f"marks have {marks.shape[1]} labels, vocab has {len(names)}")
    if not np.all(np.isfinite(vectors)):
        raise FormatError("non-finite embedding coordinates")
    count, d = vectors.shape
    with open(path, "wb") as f:
        f.write(_STORE_HEADER.pack(STORE_MAGIC, STORE_VERSION, d, marks.shape[1], count,
                                   MODALITY_CODES[modality], vocab_hash(names)))
        for i in range(count):
            f.write(marks[i].tobytes())
            f.write(vectors[i].tobytes())


@dataclass(frozen=True)
class LabeledText:
    id: str
    text: str
    labels: tuple[int, ...]


def read_texts_jsonl(path) -> list[LabeledText]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(LabeledText(str(obj["id"]), str(obj["text"]), tuple(int(j) for j in obj["labels"])))
    return out


@dataclass(frozen=True)
class ImageEntry:
    id: str
    path: str
    labels: tuple[int, ...]


def read_images_jsonl(path) -> list[ImageEntry]:
    """Image manifest: one ``{id, path, labels}`` object per line; paths are
    resolved relative to the manifest's directory."""
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(ImageEntry(str(obj["id"]), str(obj["path"]), tuple(int(j) for j in obj["labels"])))
    return out


def multihot(labels, n: int) -> np.ndarray:
    marks = np.zeros(n, dtype=np.int8)
    for j in labels:
        if not 0 <= j < n:
            raise FormatError(f"label index {j} out of range for N={n}")
        marks[j] = 1
    return marks


def read_instructions_jsonl(path) -> tuple[dict, list[dict]]:
    """Returns (metadata, records); the metadata first line is optional."""
    meta: dict = {}
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "id" not in obj:
                if lineno == 1:
                    meta = obj
                    continue
                raise FormatError(f"{path}:{lineno}: record without id")
            records.append(obj)
    return meta, records
