"""Weighted multi-objective loss and the training loop.

The loss is ``sum_i w_i * CE_i``. Within a batch, ``CE_i`` is the mean
cross-entropy over the rows whose label for question ``i`` is present, so a
MISSING label removes that row from that question's term and nothing else.
Terms with zero weight are not evaluated at all.
"""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from . import numerics as nx
from .assembly import PaddedBatch, PromptLayout, SpecialVocab, build_sequence, pad_batch
from .checkpoint import Checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, DataError, NumericError
from .models import AnnotationResult, Label, LabelSource, Sample, TrainConfig
from .network import HeadOutputs, ModelBundle, forward_variant, head_questions
from .numerics import Rng, Tensor
from .optim import Adam, learning_rate

logger = logging.getLogger(__name__)

# One label per question for a single sample, or one label per row for a batch.
LabelValue = Union[Label, Sequence[Label]]
Labels = Union[Mapping[int, LabelValue], Sequence[tuple[int, LabelValue]]]


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def loss_terms(head_outputs: HeadOutputs, labels: Labels, weights: Sequence[float]) -> dict[int, Tensor]:
    """Unweighted cross-entropy per question, for questions with weight > 0 and a label."""
    targets = dict(labels)
    heads = dict(head_outputs)
    for question, value in targets.items():
        present = value is not None and (np.ndim(value) == 0 or any(v is not None for v in value))
        if present and weights[question - 1] > 0 and question not in heads:
            raise ContractError(f"label for question {question} has no matching head output")

    terms: dict[int, Tensor] = {}
    for question, logits in head_outputs:
        if weights[question - 1] == 0:
            continue
        value = targets.get(question)
        if value is None:
            continue
        if logits.ndim == 1:
            terms[question] = nx.softmax_cross_entropy(logits, int(value))
            continue
        column = list(value)
        if len(column) != logits.shape[0]:
            raise ContractError(f"question {question}: {len(column)} labels for {logits.shape[0]} rows")
        rows = [r for r, v in enumerate(column) if v is not None]
        if not rows:
            continue
        picked = logits if len(rows) == len(column) else nx.gather(logits, np.array(rows))
        targets_array = np.array([column[r] for r in rows], dtype=np.int64)
        terms[question] = nx.mean(nx.softmax_cross_entropy(picked, targets_array))
    return terms


def weighted_sum(terms: Mapping[int, Tensor], weights: Sequence[float]) -> Tensor:
    total: Optional[Tensor] = None
    for question in sorted(terms):
        term = terms[question] * float(weights[question - 1])
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def compute_loss(head_outputs: HeadOutputs, labels: Labels, weights: Sequence[float]) -> Tensor:
    """``sum_i w_i * CE(logits_i, label_i)`` over questions whose label is present."""
    return weighted_sum(loss_terms(head_outputs, labels, weights), weights)


# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------


def resolve_labels(
    samples: Sequence[Sample],
    source: LabelSource,
    annotations: Optional[Mapping[str, AnnotationResult]] = None,
    annotate_final: bool = False,
) -> list[list[Label]]:
    """Per-sample label rows (N process labels then the final label).

    Annotated sources replace the process labels; the final label stays
    ground truth unless ``annotate_final`` is set.
    """
    if source == "ground_truth":
        return [list(s.labels) for s in samples]
    if annotations is None:
        raise ConfigError(f"label source {source!r} needs an annotation file")
    rows: list[list[Label]] = []
    for sample in samples:
        result = annotations.get(sample.id)
        if result is None:
            raise DataError(f"no annotation for sample {sample.id!r}")
        if len(result.process_labels) != len(sample.process_labels):
            raise DataError(
                f"annotation for {sample.id!r} has {len(result.process_labels)} process labels, "
                f"expected {len(sample.process_labels)}"
            )
        final = result.final_label if annotate_final else sample.final_label
        rows.append([*result.process_labels, final])
    return rows


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


class EpochLog(BaseModel):
    epoch: int
    total_loss: float
    question_losses: list[Optional[float]]  # unweighted, questions 1..N+1


class TrainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: ModelBundle
    optimizer: Adam
    logs: list[EpochLog]
    epoch: int
    checkpoint_path: Optional[Path] = None


def prepare_batch(
    layouts: Sequence[PromptLayout],
    samples: Sequence[Sample],
    vocab: SpecialVocab,
) -> tuple[PaddedBatch, np.ndarray]:
    return pad_batch(layouts, vocab), np.stack([s.image for s in samples])


def train_step(
    model: ModelBundle,
    batch: PaddedBatch,
    images: np.ndarray,
    labels: Mapping[int, Sequence[Label]],
    weights: Sequence[float],
) -> tuple[Tensor, dict[int, float]]:
    """Forward, loss and backward; gradients are left on the parameters."""
    model.zero_grad()
    terms = loss_terms(forward_variant(model, batch, images), labels, weights)
    loss = weighted_sum(terms, weights)
    if math.isfinite(loss.item()):
        nx.backward(loss)
    return loss, {q: t.item() for q, t in terms.items()}


def train(
    model: ModelBundle,
    samples: Sequence[Sample],
    config: TrainConfig,
    vocab: SpecialVocab,
    *,
    labels: Optional[Sequence[Sequence[Label]]] = None,
    checkpoint_path: Optional[Path] = None,
    resume: Optional[Checkpoint] = None,
) -> TrainResult:
    """Mini-batch Adam over ``config.epochs`` epochs.

    With ``checkpoint_path`` the state is written atomically after every
    epoch. ``resume`` continues from a saved state, epoch numbering included.
    """
    if not samples:
        raise ConfigError("cannot train on an empty dataset")
    if model.variant != config.variant:
        raise ConfigError(f"model variant {model.variant} differs from train variant {config.variant}")
    n_questions = model.config.n_questions
    weights = config.resolved_weights(n_questions)
    label_rows = [list(row) for row in (labels if labels is not None else [s.labels for s in samples])]
    if len(label_rows) != len(samples):
        raise ConfigError("one label row per sample is required")

    questions = head_questions(model.config)
    if model.variant == "vanilla" and any(w > 0 for w in weights[:-1]):
        logger.info("Variant vanilla has no ancillary heads; ignoring ancillary weights %s", weights[:-1])

    layouts = [build_sequence(s, vocab, model.config) for s in samples]
    optimizer = Adam(model.params, config.beta1, config.beta2, config.eps, config.weight_decay)
    shuffle = Rng(config.seed).split("shuffle")
    start_epoch = 0
    if resume is not None:
        if resume.optimizer is not None:
            optimizer.load_state_dict(resume.optimizer)
        if resume.rng_state is not None:
            shuffle.set_state(resume.rng_state)
        start_epoch = resume.epoch
        logger.info("Resuming after epoch %d", start_epoch)

    batches_per_epoch = math.ceil(len(samples) / config.batch_size)
    total_steps = batches_per_epoch * config.epochs
    logs: list[EpochLog] = []
    for epoch in range(start_epoch + 1, config.epochs + 1):
        order = shuffle.permutation(len(samples))
        totals: list[float] = []
        per_question: dict[int, list[float]] = {q: [] for q in range(1, n_questions + 2)}
        for batch_index in range(batches_per_epoch):
            idx = order[batch_index * config.batch_size : (batch_index + 1) * config.batch_size]
            batch, images = prepare_batch([layouts[i] for i in idx], [samples[i] for i in idx], vocab)
            batch_labels = {q: [label_rows[i][q - 1] for i in idx] for q in questions}
            loss, terms = train_step(model, batch, images, batch_labels, weights)
            step = optimizer.step_count
            if not math.isfinite(loss.item()):
                raise NumericError("non-finite training loss", step=step, batch=batch_index)
            optimizer.step(learning_rate(config.lr, config.lr_schedule, step, total_steps))
            totals.append(loss.item())
            for q, value in terms.items():
                per_question[q].append(value)

        log = EpochLog(
            epoch=epoch,
            total_loss=float(np.mean(totals)),
            question_losses=[float(np.mean(v)) if v else None for _, v in sorted(per_question.items())],
        )
        logs.append(log)
        logger.info("Epoch %d/%d: loss %.4f", epoch, config.epochs, log.total_loss)
        if checkpoint_path is not None:
            save_checkpoint(
                checkpoint_path,
                Checkpoint(
                    model=model,
                    vocab=vocab,
                    optimizer=optimizer.state_dict(),
                    rng_state=shuffle.get_state(),
                    epoch=epoch,
                ),
            )

    final_epoch = logs[-1].epoch if logs else start_epoch
    return TrainResult(model=model, optimizer=optimizer, logs=logs, epoch=final_epoch, checkpoint_path=checkpoint_path)


# ---------------------------------------------------------------------------
# Epoch log CSV
# ---------------------------------------------------------------------------


def epoch_csv_header(n_questions: int) -> list[str]:
    return ["epoch", "total_loss", *(f"loss_q{i}" for i in range(1, n_questions + 2))]


def write_epoch_log(logs: Sequence[EpochLog], path: Path, n_questions: int, append: bool = False) -> None:
    """Append rows (writing the header first when the file is new)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not append or not path.exists()
    with path.open("w" if fresh else "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(epoch_csv_header(n_questions))
        for log in logs:
            writer.writerow(
                [log.epoch, f"{log.total_loss:.6f}", *("" if v is None else f"{v:.6f}" for v in log.question_losses)]
            )
