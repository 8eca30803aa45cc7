"""Multi-label ranking metrics (per-label average precision, mAP), score
ensembling, and evaluation reports.

The AP variant is the uninterpolated precision-at-positive-ranks average,
with ties broken by ascending sample index (stable). Labels with zero
positives have undefined AP and are excluded from the mean rather than
scored 0; the report records them as null.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataio import InvalidConfigError


class ZeroPositivesError(ValueError):
    """AP is undefined for a label with no positive samples."""


class IdMismatchError(ValueError):
    """Score rows and truth records do not describe the same samples."""


def _ranking(scores: np.ndarray) -> np.ndarray:
    """Sample indices sorted by descending score, ties by ascending index."""
    n = scores.shape[0]
    return np.lexsort((np.arange(n), -scores))


def average_precision(scores, truths) -> float:
    """Mean of precision-at-k over the ranks k holding a positive sample."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths)
    if scores.shape != truths.shape or scores.ndim != 1:
        raise InvalidConfigError(f"shape mismatch: scores {scores.shape}, truths {truths.shape}")
    pos = truths > 0
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise ZeroPositivesError("label has no positive samples")
    order = _ranking(scores)
    hits = pos[order]
    ranks = np.arange(1, scores.shape[0] + 1, dtype=np.float64)
    precision_at = np.cumsum(hits) / ranks
    return float(precision_at[hits].sum() / n_pos)


@dataclass
class EvalReport:
    """Per-label AP (None where undefined), their mean, and positive counts."""

    per_label_ap: list[float | None]
    map: float
    positives: list[int]
    n_samples: int
    config: dict = field(default_factory=dict)

    def to_json(self, path, include_per_label: bool = True) -> None:
        payload = {
            "map": self.map,
            "n_samples": self.n_samples,
            "n_labels": len(self.per_label_ap),
            "positives": self.positives,
            "config": self.config,
        }
        if include_per_label:
            payload["per_label_ap"] = self.per_label_ap
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2)
            f.write("\n")


def mean_ap(scored, truth_records, config: dict | None = None) -> EvalReport:
    """mAP of score rows against ground-truth records, aligned by source id.

    Truth annotations must be full multi-hot; every score row needs exactly
    one matching truth record and vice versa.
    """
    truth_by_id = {r.source_id: r for r in truth_records}
    if len(truth_by_id) != len(truth_records):
        raise IdMismatchError("duplicate source ids in truth records")
    if len(scored) != len(truth_records):
        raise IdMismatchError(f"{len(scored)} score rows vs {len(truth_records)} truth records")
    if not scored:
        raise InvalidConfigError("nothing to evaluate")
    score_ids = [sid for sid, _ in scored]
    if len(set(score_ids)) != len(score_ids):
        raise IdMismatchError("duplicate source ids in score rows")
    missing = [sid for sid in score_ids if sid not in truth_by_id]
    if missing:
        raise IdMismatchError(f"score ids missing from truth store: {', '.join(missing[:5])}")
    n_labels = truth_records[0].marks.shape[0]
    scores = np.stack([s for _, s in scored])
    if scores.shape[1] != n_labels:
        raise InvalidConfigError(f"score rows have {scores.shape[1]} labels, truth has {n_labels}")
    marks = np.stack([truth_by_id[sid].marks for sid, _ in scored])
    if np.any(marks < 0):
        raise InvalidConfigError("evaluation requires full annotations (found unknown marks)")
    per_label: list[float | None] = []
    positives = []
    for j in range(n_labels):
        n_pos = int((marks[:, j] > 0).sum())
        positives.append(n_pos)
        per_label.append(average_precision(scores[:, j], marks[:, j]) if n_pos else None)
    present = [ap for ap in per_label if ap is not None]
    if not present:
        raise InvalidConfigError("no label has a positive sample; mAP undefined")
    return EvalReport(
        per_label_ap=per_label,
        map=float(np.mean(present)),
        positives=positives,
        n_samples=scores.shape[0],
        config=config or {},
    )


def _minmax_columns(scores: np.ndarray) -> np.ndarray:
    """Scale each label column to [0, 1]; constant columns map to 0.5."""
    lo = scores.min(axis=0)
    hi = scores.max(axis=0)
    span = hi - lo
    out = np.full_like(scores, 0.5, dtype=np.float64)
    ok = span > 0
    out[:, ok] = (scores[:, ok] - lo[ok]) / span[ok]
    return out


def _minmax_global(scores: np.ndarray) -> np.ndarray:
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.full_like(scores, 0.5, dtype=np.float64)
    return (scores - lo) / (hi - lo)


def ensemble_scores(a, b, per_file: bool = False) -> list[tuple[str, np.ndarray]]:
    """Min-max scale both score sets to [0, 1], then average element-wise.

    Scaling is per label column by default; ``per_file`` switches to one
    global min/max per file. Ids must match row for row.
    """
    ids_a = [sid for sid, _ in a]
    ids_b = [sid for sid, _ in b]
    if ids_a != ids_b:
        raise IdMismatchError("ensemble inputs must list the same source ids in the same order")
    if not a:
        raise InvalidConfigError("nothing to ensemble")
    mat_a = np.stack([s for _, s in a]).astype(np.float64)
    mat_b = np.stack([s for _, s in b]).astype(np.float64)
    if mat_a.shape != mat_b.shape:
        raise InvalidConfigError(f"shape mismatch: {mat_a.shape} vs {mat_b.shape}")
    scale = _minmax_global if per_file else _minmax_columns
    avg = 0.5 * (scale(mat_a) + scale(mat_b))
    return [(sid, avg[i]) for i, sid in enumerate(ids_a)]
