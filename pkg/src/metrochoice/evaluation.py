"""Confusion-matrix metrics, comparison tables, and dataset splits.

Abandonment is the positive class throughout. Zero-denominator precision
or recall reports as 0 with an undefined flag rather than erroring, and
F1 is always the harmonic mean of the computed precision and recall.
Printed tables are checked against that identity: a row whose rounded F1
disagrees with the recomputed harmonic mean beyond rounding tolerance
carries an inconsistency flag.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .choices import ChoiceLabel, ChoiceRecord
from .llm import Prediction

F1_IDENTITY_TOL = 1e-9
PRINTED_F1_TOL = 0.01


class EvaluationError(Exception):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    model_id: str
    matrix: ConfusionMatrix
    accuracy: float
    recall: float
    precision: float
    f1: float
    unresolved: int = 0
    undefined: tuple[str, ...] = ()
    inconsistent: bool = False

    @property
    def support(self) -> dict[str, int]:
        m = self.matrix
        return {
            "evaluated": m.total,
            "unresolved": self.unresolved,
            "positives_true": m.tp + m.fn,
            "positives_predicted": m.tp + m.fp,
        }

    @property
    def coverage(self) -> float:
        denom = self.matrix.total + self.unresolved
        return self.matrix.total / denom if denom else 0.0


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if precision + recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def check_f1_identity(
    precision: float, recall: float, printed_f1: float, tol: float = PRINTED_F1_TOL
) -> bool:
    """True when a printed F1 matches the harmonic mean within tolerance."""
    return abs(f1_score(precision, recall) - printed_f1) <= tol


def metrics_from_counts(model_id: str, matrix: ConfusionMatrix, unresolved: int = 0) -> MetricsReport:
    undefined: list[str] = []
    total = matrix.total
    accuracy = (matrix.tp + matrix.tn) / total if total else 0.0
    if matrix.tp + matrix.fn > 0:
        recall = matrix.tp / (matrix.tp + matrix.fn)
    else:
        recall = 0.0
        undefined.append("recall")
    if matrix.tp + matrix.fp > 0:
        precision = matrix.tp / (matrix.tp + matrix.fp)
    else:
        precision = 0.0
        undefined.append("precision")
    if precision + recall <= 0:
        undefined.append("f1")
    f1 = f1_score(precision, recall)
    return MetricsReport(
        model_id=model_id,
        matrix=matrix,
        accuracy=accuracy,
        recall=recall,
        precision=precision,
        f1=f1,
        unresolved=unresolved,
        undefined=tuple(undefined),
    )


def compute_metrics(
    predictions: Sequence[Prediction],
    truth: Mapping[tuple[str, int], ChoiceLabel] | Sequence[ChoiceRecord],
    model_id: str | None = None,
) -> MetricsReport:
    """Score predictions against labeled truth keyed by (card_id, event_id).

    Unresolved predictions are excluded from the matrix and counted
    separately. A key mismatch in either direction raises with the
    orphaned keys listed.
    """
    if not isinstance(truth, Mapping):
        truth = {r.key: r.label for r in truth}
    pred_keys = {p.key for p in predictions}
    truth_keys = set(truth)
    missing = sorted(pred_keys - truth_keys)
    extra = sorted(truth_keys - pred_keys)
    if missing or extra:
        raise EvaluationError(
            f"key mismatch: {len(missing)} predictions without truth {missing[:5]}, "
            f"{len(extra)} truths without prediction {extra[:5]}"
        )
    if not any(p.label is not None for p in predictions):
        raise EvaluationError("no resolved predictions to score")

    tp = fp = tn = fn = unresolved = 0
    for p in predictions:
        if p.label is None:
            unresolved += 1
            continue
        actual = truth[p.key]
        predicted_pos = p.label == ChoiceLabel.ABANDON
        actual_pos = actual == ChoiceLabel.ABANDON
        if predicted_pos and actual_pos:
            tp += 1
        elif predicted_pos:
            fp += 1
        elif actual_pos:
            fn += 1
        else:
            tn += 1
    model = model_id or (predictions[0].backend_id if predictions else "model")
    return metrics_from_counts(model, ConfusionMatrix(tp, fp, tn, fn), unresolved)


COMPARISON_COLUMNS = ("Model", "Accuracy", "Recall", "Precision", "F1-score")


@dataclass
class ComparisonTable:
    rows: list[MetricsReport] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def has_inconsistency(self) -> bool:
        return any(r.inconsistent for r in self.rows)

    def render_text(self) -> str:
        width = max([len(COMPARISON_COLUMNS[0])] + [len(r.model_id) for r in self.rows]) + 2
        header = f"{COMPARISON_COLUMNS[0]:<{width}}" + "".join(
            f"{c:>11}" for c in COMPARISON_COLUMNS[1:]
        )
        lines = [header, "-" * len(header)]
        for r in self.rows:
            flags = ""
            if r.undefined:
                flags += " *undef:" + ",".join(r.undefined)
            if r.inconsistent:
                flags += " *inconsistent-f1"
            lines.append(
                f"{r.model_id:<{width}}"
                f"{r.accuracy:>11.2f}{r.recall:>11.2f}{r.precision:>11.2f}{r.f1:>11.2f}"
                + flags
            )
        for w in self.warnings:
            lines.append(f"! {w}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {
            "columns": list(COMPARISON_COLUMNS),
            "models": [
                {
                    "model": r.model_id,
                    "accuracy": r.accuracy,
                    "recall": r.recall,
                    "precision": r.precision,
                    "f1": r.f1,
                    "support": r.support,
                    "coverage": r.coverage,
                    "undefined": list(r.undefined),
                    "inconsistent": r.inconsistent,
                }
                for r in self.rows
            ],
            "warnings": self.warnings,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def compare_models(reports: Sequence[MetricsReport]) -> ComparisonTable:
    """Fixed-column comparison; duplicate model ids get numeric suffixes.

    Each row's printed (2-decimal) F1 is audited against the harmonic mean
    of its printed precision/recall; failures set the inconsistency flag.
    """
    if not reports:
        raise EvaluationError("no reports to compare")
    table = ComparisonTable()
    seen: dict[str, int] = {}
    for report in reports:
        model_id = report.model_id
        if model_id in seen:
            seen[model_id] += 1
            suffixed = f"{model_id}#{seen[model_id]}"
            table.warnings.append(f"duplicate model id {model_id!r} renamed to {suffixed!r}")
            model_id = suffixed
        else:
            seen[model_id] = 1
        printed_p = round(report.precision, 2)
        printed_r = round(report.recall, 2)
        printed_f1 = round(report.f1, 2)
        inconsistent = not check_f1_identity(printed_p, printed_r, printed_f1)
        table.rows.append(
            MetricsReport(
                model_id=model_id,
                matrix=report.matrix,
                accuracy=report.accuracy,
                recall=report.recall,
                precision=report.precision,
                f1=report.f1,
                unresolved=report.unresolved,
                undefined=report.undefined,
                inconsistent=inconsistent,
            )
        )
    return table


def audit_reported_row(
    model_id: str, accuracy: float, recall: float, precision: float, printed_f1: float
) -> tuple[float, bool]:
    """Recompute F1 from a reported (precision, recall) pair and audit the
    printed value. Returns (recomputed_f1, consistent)."""
    recomputed = f1_score(precision, recall)
    return recomputed, check_f1_identity(precision, recall, printed_f1)


# ---------------------------------------------------------------------------
# Splits


def stratified_split(
    records: Sequence[ChoiceRecord],
    test_fraction: float = 0.3,
    seed: int = 0,
) -> tuple[list[ChoiceRecord], list[ChoiceRecord]]:
    """Label-stratified random split with a fixed seed.

    Records are canonically ordered by key before shuffling, so the split
    depends only on (records, fraction, seed).
    """
    by_label: dict[ChoiceLabel | None, list[ChoiceRecord]] = {}
    for r in sorted(records, key=lambda r: r.key):
        by_label.setdefault(r.label, []).append(r)
    rng = random.Random(seed)
    train: list[ChoiceRecord] = []
    test: list[ChoiceRecord] = []
    for label in sorted(by_label, key=lambda l: (l is None, l.value if l else "")):
        group = by_label[label]
        rng.shuffle(group)
        n_test = round(len(group) * test_fraction)
        test.extend(group[:n_test])
        train.extend(group[n_test:])
    train.sort(key=lambda r: r.key)
    test.sort(key=lambda r: r.key)
    return train, test


def leave_one_event_out(
    records: Sequence[ChoiceRecord], event_id: int
) -> tuple[list[ChoiceRecord], list[ChoiceRecord]]:
    train = sorted((r for r in records if r.event_id != event_id), key=lambda r: r.key)
    test = sorted((r for r in records if r.event_id == event_id), key=lambda r: r.key)
    if not test:
        raise EvaluationError(f"no records for held-out event {event_id}")
    return train, test


def write_report(table: ComparisonTable, text_path: str | Path, json_path: str | Path) -> None:
    Path(text_path).write_text(table.render_text(), encoding="utf-8")
    Path(json_path).write_text(table.to_json(), encoding="utf-8")
