"""Multi-label training text generation: combination sampling, prompt-based
rendering, instruction file emission, and chat-response ingestion.

Two routes produce labeled texts. The prompt route fills sampled label
combinations straight into fixed sentence patterns (no model in the loop, so
generating any number of texts takes seconds). The instruction route writes an
``instructions.jsonl`` file for an external chat model and later joins the
model's ``responses.jsonl`` back to the label combinations each instruction
was built from. Either way the supervision is exact by construction: a text's
annotation is precisely the combination it was generated from.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .dataio import InvalidConfigError, LabelVocab, TextRecord, multihot, positive_indices
from .numkit import RandomSource

logger = logging.getLogger(__name__)

INSTRUCTION_TEMPLATES = {
    "instruction_1": "Please briefly caption an image that contains {}.",
    "instruction_2": "Please organize the words {} into a sentence to describe an image.",
}

# First pattern is the canonical one; the rest are project-supplied
# paraphrases. Extend freely: any single-placeholder sentence works.
PROMPT_SET = (
    "there are {} in the photo.",
    "a photo of {}.",
    "an image showing {}.",
    "a picture containing {}.",
    "this photo shows {}.",
    "{} can be seen in the image.",
    "a snapshot with {} in the scene.",
    "an image in which {} appear.",
)

# Emitted verbatim as instruction-file metadata; an external chat client uses
# them to ask for a different caption and to shorten over-long ones.
REFINEMENT_INSTRUCTIONS = (
    "Go ahead and add a caption to this image that is different from what you described before.",
    "It's too long, please make it shorter.",
)

# Ingestion drops responses longer than this, standing in for the text
# encoder's context limit.
DEFAULT_MAX_RESPONSE_CHARS = 300


class OrphanResponseError(ValueError):
    """A response id has no matching instruction."""


@dataclass(frozen=True)
class InstructionRecord:
    id: str
    instruction: str
    labels: tuple[int, ...]


@dataclass
class IngestReport:
    n_ingested: int = 0
    n_dropped_too_long: int = 0
    n_skipped_empty: int = 0


def join_label_names(names) -> str:
    """Natural-English list: "a", "a and b", "a, b and c"."""
    names = list(names)
    if not names:
        raise InvalidConfigError("cannot join an empty label list")
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


def sample_combination(rng: RandomSource, vocab: LabelVocab, min_k: int = 1, max_k: int = 4) -> np.ndarray:
    """Multi-hot subset: size uniform in [min_k, max_k], labels uniform
    without replacement."""
    n = len(vocab)
    if not 1 <= min_k <= max_k:
        raise InvalidConfigError(f"need 1 <= min_k <= max_k, got [{min_k}, {max_k}]")
    if max_k > n:
        raise InvalidConfigError(f"max_k={max_k} exceeds vocab size {n}")
    k = int(rng.integers(min_k, max_k + 1))
    subset = rng.choice_without_replacement(n, k)
    return multihot(subset, n)


def render_text(pattern: str, combination: np.ndarray, vocab: LabelVocab) -> str:
    """Substitute the combination's label names into the pattern's single
    placeholder. Pure function; names appear in label-index order."""
    if pattern.count("{}") != 1:
        raise InvalidConfigError(f"pattern must contain exactly one {{}} placeholder: {pattern!r}")
    positives = positive_indices(combination)
    if not positives:
        raise InvalidConfigError("combination must contain at least one label")
    return pattern.replace("{}", join_label_names(vocab.names[j] for j in positives))


def generate_prompt_texts(
    rng: RandomSource,
    vocab: LabelVocab,
    count: int,
    min_k: int = 1,
    max_k: int = 4,
    template_index: int | None = None,
) -> list[TextRecord]:
    """Render ``count`` prompt-based texts. O(count) string work, no model.

    Per sample: draw the combination, then (if template_index is None) the
    pattern index.
    """
    if count < 1:
        raise InvalidConfigError(f"count must be >= 1, got {count}")
    if template_index is not None and not 0 <= template_index < len(PROMPT_SET):
        raise InvalidConfigError(f"template_index out of range [0, {len(PROMPT_SET)})")
    records = []
    for i in range(count):
        combo = sample_combination(rng, vocab, min_k, max_k)
        t = template_index if template_index is not None else int(rng.integers(0, len(PROMPT_SET)))
        records.append(
            TextRecord(f"text-{i:06d}", render_text(PROMPT_SET[t], combo, vocab), positive_indices(combo))
        )
    return records


def emit_instructions(
    rng: RandomSource,
    vocab: LabelVocab,
    count: int,
    template_id: str,
    min_k: int,
    max_k: int,
    path,
) -> list[InstructionRecord]:
    """Write ``instructions.jsonl``: a metadata first line (template id, vocab
    hash, the refinement instructions verbatim) followed by one record per
    line."""
    if count < 1:
        raise InvalidConfigError(f"count must be >= 1, got {count}")
    if template_id not in INSTRUCTION_TEMPLATES:
        raise InvalidConfigError(
            f"unknown template {template_id!r}; choose from {sorted(INSTRUCTION_TEMPLATES)}"
        )
    pattern = INSTRUCTION_TEMPLATES[template_id]
    records = []
    for i in range(count):
        combo = sample_combination(rng, vocab, min_k, max_k)
        text = render_text(pattern, combo, vocab)
        for j in positive_indices(combo):
            assert vocab.names[j] in text
        records.append(InstructionRecord(f"inst-{i:06d}", text, positive_indices(combo)))
    meta = {
        "kind": "instructions",
        "template": template_id,
        "vocab_hash": vocab.hash,
        "refinement_instructions": list(REFINEMENT_INSTRUCTIONS),
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(meta, ensure_ascii=False) + "\n")
        for r in records:
            f.write(
                json.dumps(
                    {"id": r.id, "instruction": r.instruction, "labels": list(r.labels)},
                    ensure_ascii=False,
                )
                + "\n"
            )
    return records


def read_instructions(path) -> tuple[dict, list[InstructionRecord]]:
    """Load an instruction file; the metadata line is optional on read."""
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
                raise InvalidConfigError(f"{path}:{lineno}: record without id")
            records.append(
                InstructionRecord(str(obj["id"]), str(obj["instruction"]), tuple(int(j) for j in obj["labels"]))
            )
    return meta, records


def read_responses(path) -> list[tuple[str, str]]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append((str(obj["id"]), str(obj["text"])))
    return out


def ingest_responses(
    instructions_path,
    responses_path,
    max_chars: int = DEFAULT_MAX_RESPONSE_CHARS,
) -> tuple[list[TextRecord], IngestReport]:
    """Join chat responses to the label combinations of their instructions.

    Over-long responses are dropped with a counted warning; empty responses
    are skipped; unknown response ids abort with the offending ids listed.
    """
    _, instructions = read_instructions(instructions_path)
    by_id = {r.id: r for r in instructions}
    responses = read_responses(responses_path)
    orphans = sorted({rid for rid, _ in responses if rid not in by_id})
    if orphans:
        raise OrphanResponseError(f"responses reference unknown instruction ids: {', '.join(orphans)}")
    seen: set[str] = set()
    dupes: set[str] = set()
    for rid, _ in responses:
        (dupes if rid in seen else seen).add(rid)
    if dupes:
        raise InvalidConfigError(f"duplicate response ids: {', '.join(sorted(dupes))}")
    report = IngestReport()
    out = []
    for rid, text in responses:
        text = text.strip()
        if not text:
            report.n_skipped_empty += 1
            logger.warning("response %s is empty, skipped", rid)
            continue
        if len(text) > max_chars:
            report.n_dropped_too_long += 1
            logger.warning("response %s is %d chars (> %d), dropped", rid, len(text), max_chars)
            continue
        out.append(TextRecord(rid, text, by_id[rid].labels))
        report.n_ingested += 1
    return out, report
