from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from . import numerics as nx
from .assembly import SpecialVocab, build_sequence, pad_batch
from .config import MetricThresholds
from .errors import DataError
from .metrics import best_f1, f1_score, pr_curve, precision_at_recall, recall_at_precision
from .models import LabelSource, MetricsReport, Sample, ScoredPrediction
from .network import ModelBundle, forward_variant

logger = logging.getLogger(__name__)


class Predictions(BaseModel):
    """Final-question scores plus softmax probabilities of every head."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    scored: list[ScoredPrediction]
    probabilities: dict[int, np.ndarray]  # question -> [n_samples, n_classes]


def predict(model: ModelBundle, samples: Sequence[Sample], vocab: SpecialVocab, batch_size: int = 64) -> Predictions:
    """Run the frozen model without recording a graph."""
    if not samples:
        raise DataError("nothing to score: the sample list is empty")
    final = model.config.n_questions + 1
    chunks: dict[int, list[np.ndarray]] = {}
    with nx.no_grad():
        for start in range(0, len(samples), batch_size):
            part = samples[start : start + batch_size]
            batch = pad_batch([build_sequence(s, vocab, model.config) for s in part], vocab)
            images = np.stack([s.image for s in part])
            for question, logits in forward_variant(model, batch, images):
                probs = nx.softmax(logits).data.astype(np.float64)
                chunks.setdefault(question, []).append(probs)
    probabilities = {q: np.concatenate(parts) for q, parts in chunks.items()}
    scores = np.clip(probabilities[final][:, 1], 0.0, 1.0)
    scored = [
        ScoredPrediction(sample_id=s.id, score=float(score), label=s.final_label) for s, score in zip(samples, scores)
    ]
    return Predictions(scored=scored, probabilities=probabilities)


def question_accuracy(predictions: Predictions, samples: Sequence[Sample], n_questions: int) -> list[float]:
    """Argmax accuracy of each ancillary head against ground truth; empty without ancillary heads."""
    accuracies = []
    for question in range(1, n_questions + 1):
        probs = predictions.probabilities.get(question)
        if probs is None:
            return []
        truth = np.array([s.process_labels[question - 1] for s in samples])
        accuracies.append(float(np.mean(np.argmax(probs, axis=1) == truth)))
    return accuracies


def evaluate(
    model: ModelBundle,
    samples: Sequence[Sample],
    vocab: SpecialVocab,
    thresholds: MetricThresholds,
    *,
    seed: int,
    n_train: int,
    label_source: LabelSource = "ground_truth",
) -> tuple[MetricsReport, Predictions]:
    predictions = predict(model, samples, vocab)
    curve = pr_curve(predictions.scored)
    report = MetricsReport(
        variant=model.variant,
        label_source=label_source,
        seed=seed,
        n_train=n_train,
        n_test=len(samples),
        f1=f1_score(predictions.scored, thresholds.f1_threshold),
        f1_best=best_f1(curve),
        recall_at_precision={p: recall_at_precision(curve, p / 100.0) for p in thresholds.recall_at_precision},
        precision_at_recall={r: precision_at_recall(curve, r / 100.0) for r in thresholds.precision_at_recall},
        question_accuracy=question_accuracy(predictions, samples, model.config.n_questions),
    )
    return report, predictions


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------


def write_scores(predictions: Predictions, path: Path) -> None:
    """Per-sample JSONL: final score, label and each head's positive-class probability."""
    path.parent.mkdir(parents=True, exist_ok=True)
    questions = sorted(predictions.probabilities)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for row, pred in enumerate(predictions.scored):
            record = {
                "id": pred.sample_id,
                "label": pred.label,
                "score": round(pred.score, 6),
                "question_scores": {
                    f"q{q}": round(float(predictions.probabilities[q][row, -1]), 6) for q in questions
                },
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def write_reports(reports: Sequence[MetricsReport], csv_path: Path, json_path: Optional[Path] = None) -> None:
    """CSV rows in percent (one decimal) and, optionally, the raw fractions as JSON."""
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    rows = [r.to_row() for r in reports]
    header: list[str] = []
    for row in rows:
        header.extend(k for k in row if k not in header)
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, restval="", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    if json_path is not None:
        json_path.write_text(
            json.dumps([r.model_dump(mode="json") for r in reports], indent=2) + "\n", encoding="utf-8"
        )
    logger.info("Wrote %d metric rows to %s", len(rows), csv_path)
