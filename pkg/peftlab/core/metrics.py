"""
Classification and Efficiency Metrics
=====================================
Scores for classification-as-generation runs.

Features:
- token accuracy over supervised positions (argmax given the gold prefix)
- accuracy and macro-F1 over a fixed label set, with invalid generations
  counted as wrong (FN for the gold class, FP for no class)
- PSCP: performance discounted by trainable parameters, inference time and
  peak memory relative to reference constants
"""
from __future__ import annotations

import logging
import math
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from peftlab.core.errors import ConfigError, DataError

logger = logging.getLogger(__name__)


class ClassCounts(BaseModel):
    tp: int = 0
    fp: int = 0
    fn: int = 0


class MetricReport(BaseModel):
    """Evaluation outputs for one split."""

    examples: int = 0
    token_accuracy: Optional[float] = None
    accuracy: Optional[float] = None
    macro_f1: Optional[float] = None
    invalid_rate: Optional[float] = None
    pscp: Optional[float] = None
    time_per_example: Optional[float] = None
    peak_memory_bytes: Optional[int] = None
    per_class: dict[str, ClassCounts] = Field(default_factory=dict)

    def to_flat_dict(self) -> dict:
        """Flat JSON-ready mapping; per-class counts become ``<label>.tp`` keys."""
        from peftlab.core.report_utils import safe_number

        flat = {}
        for key, value in self.model_dump(exclude={"per_class"}).items():
            if value is None:
                continue
            flat[key] = value if isinstance(value, int) else safe_number(value)
        for label, counts in self.per_class.items():
            for name, value in counts.model_dump().items():
                flat[f"{label}.{name}"] = value
        return flat


class PSCPConstants(BaseModel):
    """Reference constants C and importance exponents β."""

    c_p: float = 1000.0
    c_f: float = 0.01
    c_m: float = 1e8
    b_p: float = 1.0
    b_f: float = 1.0
    b_m: float = 1.0

    def check(self) -> None:
        for key in ("c_p", "c_f", "c_m"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"PSCP constant {key} must be positive, got {getattr(self, key)}")
        for key in ("b_p", "b_f", "b_m"):
            if getattr(self, key) < 0:
                raise ConfigError(f"PSCP exponent {key} must be nonnegative, got {getattr(self, key)}")


# ============================================================================
# CLASSIFICATION
# ============================================================================


def normalize_label(text: str) -> str:
    return text.strip().lower()


def classification_scores(
    preds: Sequence[str],
    golds: Sequence[str],
    label_set: Sequence[str],
) -> MetricReport:
    """
    Accuracy, macro-F1 and invalid rate for generated labels.

    Predictions that match no label after normalization are invalid: they
    count as incorrect and add a false negative to the gold class only.
    Macro-F1 averages over classes with at least one TP, FP or FN.

    Raises:
        DataError: length mismatch, empty label set, or gold outside label_set
    """
    if len(preds) != len(golds):
        raise DataError(f"{len(preds)} predictions for {len(golds)} gold labels")
    if not label_set:
        raise DataError("label set is empty")
    labels = [normalize_label(label) for label in label_set]
    index = {label: i for i, label in enumerate(labels)}
    n_classes = len(labels)

    gold_idx = []
    for position, gold in enumerate(golds):
        key = normalize_label(gold)
        if key not in index:
            raise DataError(f"gold label '{gold}' at position {position} is outside the label set")
        gold_idx.append(index[key])
    # column n_classes collects invalid generations
    pred_idx = [index.get(normalize_label(p), n_classes) for p in preds]

    confusion = np.zeros((n_classes, n_classes + 1), dtype=np.int64)
    for g, p in zip(gold_idx, pred_idx):
        confusion[g, p] += 1

    tp = np.diag(confusion[:, :n_classes])
    fp = confusion[:, :n_classes].sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp

    total = len(golds)
    report = MetricReport(examples=total)
    report.accuracy = float(tp.sum() / total) if total else 0.0
    report.invalid_rate = float(confusion[:, n_classes].sum() / total) if total else 0.0

    f1_scores = []
    for c, label in enumerate(labels):
        report.per_class[label] = ClassCounts(tp=int(tp[c]), fp=int(fp[c]), fn=int(fn[c]))
        if tp[c] + fp[c] + fn[c] == 0:
            continue
        f1_scores.append(2.0 * tp[c] / (2.0 * tp[c] + fp[c] + fn[c]))
    report.macro_f1 = float(np.mean(f1_scores)) if f1_scores else 0.0
    return report


def token_accuracy(pred_ids: Sequence[int], gold_ids: Sequence[int], loss_mask: Sequence[bool]) -> float:
    """
    Fraction of supervised positions where the prediction equals the gold id.

    Raises:
        DataError: misaligned inputs or no supervised positions
    """
    pred = np.asarray(pred_ids)
    gold = np.asarray(gold_ids)
    mask = np.asarray(loss_mask, dtype=bool)
    if not (pred.shape == gold.shape == mask.shape):
        raise DataError(f"misaligned inputs: {pred.shape}, {gold.shape}, {mask.shape}")
    supervised = int(mask.sum())
    if supervised == 0:
        raise DataError("no supervised positions")
    return float((pred[mask] == gold[mask]).sum() / supervised)


# ============================================================================
# EFFICIENCY
# ============================================================================


def pscp(
    performance: float,
    trainable_params: float,
    time_per_example: float,
    peak_memory: float,
    k: PSCPConstants,
) -> float:
    """
    performance · Π_j (C_j / (C_j + x_j))^β_j over parameters, time and memory.

    Raises:
        ConfigError: invalid constants
        DataError: negative inputs or performance outside [0, 1]
    """
    k.check()
    if not 0.0 <= performance <= 1.0:
        raise DataError(f"performance must lie in [0, 1], got {performance}")
    factors = (
        (trainable_params, k.c_p, k.b_p),
        (time_per_example, k.c_f, k.b_f),
        (peak_memory, k.c_m, k.b_m),
    )
    score = performance
    for x, c, beta in factors:
        if x < 0:
            raise DataError(f"PSCP inputs must be nonnegative, got {x}")
        if beta == 0:
            continue
        score *= math.pow(c / (c + x), beta)
    return score
