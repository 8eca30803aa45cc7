"""Embedding export: labeled texts and annotated images into .taie stores."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import EncoderError, TextTooLongError
from .formats import multihot, read_images_jsonl, read_texts_jsonl, write_taie

logger = logging.getLogger(__name__)


@dataclass
class ExportReport:
    n_exported: int = 0
    skipped: list[dict] = field(default_factory=list)

    def skip(self, item_id: str, reason: str) -> None:
        self.skipped.append({"id": item_id, "reason": reason})
        logger.warning("skipped %s: %s", item_id, reason)


def export_text_embeddings(texts_path, vocab_names, encoder, out_path) -> ExportReport:
    """One record per text, raw encoder output, annotation from the text
    record. Over-long texts are skipped and reported."""
    texts = read_texts_jsonl(texts_path)
    report = ExportReport()
    vectors, marks = [], []
    for t in texts:
        try:
            vec = encoder.encode_text(t.text)
        except TextTooLongError as e:
            report.skip(t.id, str(e))
            continue
        vectors.append(vec)
        marks.append(multihot(t.labels, len(vocab_names)))
    if not vectors:
        raise EncoderError(f"no exportable texts in {texts_path}")
    write_taie(out_path, np.stack(vectors), np.stack(marks), "text", vocab_names)
    report.n_exported = len(vectors)
    return report


def export_image_embeddings(images_path, vocab_names, encoder, out_path) -> ExportReport:
    """One record per readable image; unreadable files are skipped with a
    report entry. Manifest paths resolve relative to the manifest file."""
    entries = read_images_jsonl(images_path)
    base = Path(images_path).parent
    report = ExportReport()
    vectors, marks = [], []
    for e in entries:
        path = Path(e.path)
        if not path.is_absolute():
            path = base / path
        try:
            vec = encoder.encode_image(path)
        except EncoderError as err:
            report.skip(e.id, str(err))
            continue
        vectors.append(vec)
        marks.append(multihot(e.labels, len(vocab_names)))
    if not vectors:
        raise EncoderError(f"no exportable images in {images_path}")
    write_taie(out_path, np.stack(vectors), np.stack(marks), "image", vocab_names)
    report.n_exported = len(vectors)
    return report
