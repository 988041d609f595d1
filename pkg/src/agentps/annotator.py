"""Process labels from a calibrated noise simulator or a remote MLLM.

Simulated final annotations are MISSING with probability ``m`` and otherwise
correct with probability ``a / (1 - m)``, where ``a`` is the overall final
accuracy, so the marginal accuracy over all samples stays ``a``.
"""

from __future__ import annotations

import asyncio
import json
import logging
import re
from pathlib import Path
from typing import Iterable, Optional, Sequence

import httpx
from pydantic import BaseModel, ValidationError

from .client import AnnotatorClient, encode_frame_png
from .config import RemoteConfig, Settings
from .dispatch import RequestDispatcher
from .errors import ConfigError, ParseError, SchemaError
from .models import AnnotationResult, Label, NoiseProfile, QuestionKind, QuestionTemplate, Sample
from .numerics import Rng

logger = logging.getLogger(__name__)

AFFIRMATIVE = frozenset({"yes", "true", "correct", "present"})
NEGATIVE = frozenset({"no", "false", "absent", "none"})
NEGATORS = frozenset({"not", "never"})
NUMBER_WORDS = {
    "zero": 0, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5,
    "six": 6, "seven": 7, "eight": 8, "nine": 9, "ten": 10,
}

_TOKEN = re.compile(r"[a-z]+|\d+")
_ZERO_PREFIX = NEGATORS | {"no"}
_NUMBERED = re.compile(r"^\s*(?:q(?:uestion)?\s*)?(\d+)\s*[:.)\-]\s*(.*)$", re.IGNORECASE)


# ---------------------------------------------------------------------------
# Simulator
# ---------------------------------------------------------------------------


def _check_profile(profile: NoiseProfile, n_questions: int) -> None:
    if len(profile.accuracies) < n_questions:
        raise ConfigError(f"noise profile lists {len(profile.accuracies)} accuracies for {n_questions} questions")
    for value in [*profile.accuracies[:n_questions], profile.final_accuracy]:
        if not 0.0 < value <= 1.0:
            raise ConfigError(f"annotator accuracy {value} must lie in (0, 1]")
    if not 0.0 <= profile.missing_rate_final < 1.0:
        raise ConfigError(f"missing_rate_final {profile.missing_rate_final} must lie in [0, 1)")
    if profile.final_accuracy > 1.0 - profile.missing_rate_final:
        raise ConfigError("final accuracy cannot exceed the non-missing fraction")


def simulate_annotations(samples: Sequence[Sample], profile: NoiseProfile) -> list[AnnotationResult]:
    """Symmetric flip noise per question; each sample has its own stream."""
    if not samples:
        return []
    n = len(samples[0].process_labels)
    _check_profile(profile, n)
    accuracies = profile.accuracies[:n]
    conditional_final = profile.final_accuracy / (1.0 - profile.missing_rate_final)
    root = Rng(profile.seed).split("annotations")

    results = []
    for sample in samples:
        draws = root.split(sample.id).random(n + 2)
        labels: list[Label] = [
            y if u < acc else 1 - y for y, u, acc in zip(sample.process_labels, draws[:n], accuracies)
        ]
        if draws[n] < profile.missing_rate_final:
            labels.append(None)
        else:
            labels.append(sample.final_label if draws[n + 1] < conditional_final else 1 - sample.final_label)
        results.append(AnnotationResult(sample_id=sample.id, labels=labels, source="simulated"))
    return results


# ---------------------------------------------------------------------------
# Response parsing
# ---------------------------------------------------------------------------


def _binary_verdict(words: Sequence[str]) -> Label:
    negated_at = -2
    for i, word in enumerate(words):
        if word in NEGATORS:
            negated_at = i
            continue
        if word in AFFIRMATIVE or word in NEGATIVE:
            verdict = int(word in AFFIRMATIVE)
            # "not present"
            return 1 - verdict if negated_at == i - 1 else verdict
    return None


def parse_response(text: Optional[str], kind: QuestionKind = "binary", threshold: int = 1) -> Label:
    """Verdict for one question, or ``None`` (MISSING) when the text holds none."""
    if not text:
        return None
    tokens = _TOKEN.findall(text.lower())
    if kind == "count":
        for i, token in enumerate(tokens):
            if not token.isdigit() and token not in NUMBER_WORDS:
                continue
            # "no one", "not one of them"
            if i and tokens[i - 1] in _ZERO_PREFIX:
                return 0
            count = int(token) if token.isdigit() else NUMBER_WORDS[token]
            return int(count >= threshold)
    return _binary_verdict([t for t in tokens if not t.isdigit()])


def split_answers(text: str, n: int) -> list[Optional[str]]:
    """Map ``"1: ..."`` / ``"2) ..."`` lines to per-question answers.

    A single-question battery answered without numbering takes the whole text.
    """
    answers: list[Optional[str]] = [None] * n
    for line in text.splitlines():
        match = _NUMBERED.match(line)
        if not match:
            continue
        index = int(match.group(1))
        if 1 <= index <= n and answers[index - 1] is None:
            answers[index - 1] = match.group(2).strip()
    if n == 1 and answers[0] is None:
        answers[0] = text.strip() or None
    return answers


def battery_prompt(sample: Sample, questions: Sequence[QuestionTemplate], final: QuestionTemplate) -> str:
    """All questions of one sample as a single numbered session."""
    lines = [
        f"The post contains {len(sample.image)} images, attached in order, and this text:",
        f'"{sample.text}"',
        "",
        "Answer every question below.",
    ]
    lines.extend(f"{i}. {q.instruction}" for i, q in enumerate([*questions, final], start=1))
    lines.append("")
    lines.append("Reply with one line per question formatted as '<number>: <answer>'.")
    return "\n".join(lines)


def labels_from_reply(text: str, questions: Sequence[QuestionTemplate], final: QuestionTemplate) -> list[Label]:
    battery = [*questions, final]
    answers = split_answers(text, len(battery))
    return [parse_response(answer, q.kind, q.threshold) for answer, q in zip(answers, battery)]


# ---------------------------------------------------------------------------
# Remote orchestration
# ---------------------------------------------------------------------------


async def remote_annotate(
    samples: Sequence[Sample],
    questions: Sequence[QuestionTemplate],
    final: QuestionTemplate,
    client: AnnotatorClient,
    remote: RemoteConfig,
) -> list[AnnotationResult]:
    """Annotate with at most ``concurrency_limit`` requests in flight.

    Results come back in sample order regardless of completion order.
    """
    dispatcher = RequestDispatcher(client, remote.max_retries, remote.backoff_base, remote.backoff_max)
    gate = asyncio.Semaphore(remote.concurrency_limit)
    results: list[Optional[AnnotationResult]] = [None] * len(samples)
    n_labels = len(questions) + 1

    async def annotate_one(index: int, sample: Sample) -> None:
        images = [encode_frame_png(frame) for frame in sample.image]
        async with gate:
            text, error = await dispatcher.send(sample.id, battery_prompt(sample, questions, final), images)
        labels = labels_from_reply(text, questions, final) if text is not None else [None] * n_labels
        results[index] = AnnotationResult(
            sample_id=sample.id, labels=labels, source="remote", raw_response=text, error=error
        )

    async with asyncio.TaskGroup() as tg:
        for index, sample in enumerate(samples):
            tg.create_task(annotate_one(index, sample))

    logger.info(
        "Remote annotation finished. Success: %d, Failures: %d, Retries: %d",
        dispatcher.success_count,
        dispatcher.failure_count,
        dispatcher.retry_count,
    )
    return [r for r in results if r is not None]


def annotate_remote(
    samples: Sequence[Sample],
    questions: Sequence[QuestionTemplate],
    final: QuestionTemplate,
    remote: RemoteConfig,
    settings: Optional[Settings] = None,
    transport: Optional[httpx.AsyncBaseTransport] = None,
) -> list[AnnotationResult]:
    """Blocking entry point; fails on a missing credential before any request."""
    settings = settings or Settings()
    url, api_key = settings.require_endpoint()

    async def run() -> list[AnnotationResult]:
        async with httpx.AsyncClient(timeout=httpx.Timeout(remote.request_timeout), transport=transport) as http:
            client = AnnotatorClient(http, url, api_key, settings.annotator_provider, settings.annotator_model)
            return await remote_annotate(samples, questions, final, client, remote)

    return asyncio.run(run())


# ---------------------------------------------------------------------------
# Annotation files and agreement
# ---------------------------------------------------------------------------


def write_annotations(results: Iterable[AnnotationResult], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for result in results:
            record = result.model_dump()
            for optional in ("raw_response", "error"):
                if record[optional] is None:
                    del record[optional]
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def read_annotations(path: str | Path) -> dict[str, AnnotationResult]:
    """Annotation JSONL keyed by sample id; labels written as ``null`` are MISSING."""
    path = Path(path)
    results: dict[str, AnnotationResult] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(path), lineno, exc.msg) from exc
            try:
                result = AnnotationResult.model_validate(record)
            except ValidationError as exc:
                error = exc.errors()[0]
                field = str(error["loc"][0]) if error["loc"] else "record"
                raise SchemaError(field, f"{path}:{lineno}: {error['msg']}") from exc
            results[result.sample_id] = result
    return results


class Agreement(BaseModel):
    """Per-question accuracy against ground truth (MISSING counts as wrong) and missing rate."""

    n_samples: int
    accuracies: list[float]
    missing_rates: list[float]


def agreement(results: Sequence[AnnotationResult], samples: Sequence[Sample]) -> Agreement:
    truth = {s.id: s.labels for s in samples}
    if not results:
        raise ConfigError("no annotations to compare")
    width = len(results[0].labels)
    correct = [0] * width
    missing = [0] * width
    for result in results:
        if result.sample_id not in truth:
            raise ConfigError(f"annotation for unknown sample {result.sample_id!r}")
        for i, (label, target) in enumerate(zip(result.labels, truth[result.sample_id])):
            if label is None:
                missing[i] += 1
            elif label == target:
                correct[i] += 1
    n = len(results)
    return Agreement(
        n_samples=n,
        accuracies=[c / n for c in correct],
        missing_rates=[m / n for m in missing],
    )
