"""Procedural synthetic task generator and the JSONL dataset format.

Every sample carries four binary latent attributes, one per ancillary
question of the ``ucc`` preset:

1. watermark     - a bright diagonal stripe on every frame
2. synthetic     - a bright centred square on every frame
3. text original - text drawn from the subjective pool instead of the flat one
4. coherent      - later frames reuse the first frame's background

The final label follows ``final_label_rule`` (see ``docs/label_rule.md``).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from pydantic import ValidationError

from .errors import ConfigError, ParseError, SchemaError
from .models import DatasetSpec, Sample
from .numerics import Rng

logger = logging.getLogger(__name__)

SAMPLE_FIELDS: tuple[str, ...] = ("id", "image", "text", "process_labels", "final_label")

SUBJECTIVE_TEXTS: tuple[str, ...] = (
    "i love how this turned out so happy",
    "honestly my favourite moment of the whole week",
    "we laughed so hard making this one",
    "i think this is the best thing i have made",
    "my own take on the trend what do you think",
    "feeling proud and a little nervous sharing this",
    "so funny i could not stop smiling",
    "my story from last summer finally told",
)

FLAT_TEXTS: tuple[str, ...] = (
    "new video",
    "part two",
    "full clip here",
    "watch till the end",
    "trending now",
    "best moments compilation",
    "top scenes collection",
    "daily upload",
)

FILLER_WORDS: tuple[str, ...] = (
    "today", "video", "post", "album", "clip", "follow", "share", "like",
    "more", "soon", "again", "now", "photos", "frames",
)


def word_pool() -> list[str]:
    """Every word the generator can emit, for vocabulary construction."""
    words: set[str] = set(FILLER_WORDS)
    for text in (*SUBJECTIVE_TEXTS, *FLAT_TEXTS):
        words.update(text.split())
    return sorted(words)


# ---------------------------------------------------------------------------
# Label rule
# ---------------------------------------------------------------------------


def final_label_rule(attrs: Sequence[int]) -> int:
    """1 (unoriginal) iff (watermark or not coherent) and not text_original.

    ``attrs`` is ``(watermark, synthetic, text_original, coherent)``; the
    synthetic attribute does not enter the rule.
    """
    if len(attrs) != 4:
        raise ConfigError(f"the label rule takes 4 attributes, got {len(attrs)}")
    watermark, _synthetic, text_original, coherent = (bool(a) for a in attrs)
    return int((watermark or not coherent) and not text_original)


def _attribute_probabilities(balance: float) -> np.ndarray:
    # Independent draws whose unconditional positive rate equals ``balance``:
    # P(w or not c) = q, P(not t) = balance / q.
    q = (1.0 + balance) / 2.0
    p_each = 1.0 - math.sqrt(1.0 - q)
    p_text = 1.0 - balance / q
    return np.array([p_each, 0.5, p_text, 1.0 - p_each])


def _draw_attributes(rng: Rng, label: int, probs: np.ndarray) -> list[int]:
    """Rejection-sample attributes until the rule reproduces ``label``."""
    while True:
        attrs = [int(u < p) for u, p in zip(rng.random(4), probs)]
        if final_label_rule(attrs) == label:
            return attrs


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _background(rng: Rng, side: int) -> np.ndarray:
    coarse = rng.uniform(0.1, 0.5, size=(4, 4))
    cell = -(-side // 4)
    return np.kron(coarse, np.ones((cell, cell)))[:side, :side]


def render_frames(attrs: Sequence[int], spec: DatasetSpec, rng: Rng) -> np.ndarray:
    side = spec.image_size
    first = _background(rng.split("background-0"), side)
    frames = [first]
    for k in range(1, spec.frames):
        frames.append(first.copy() if attrs[3] else _background(rng.split(f"background-{k}"), side))
    image = np.stack(frames)

    if attrs[0]:
        rows, cols = np.diag_indices(side)
        image[:, rows, cols] = np.maximum(image[:, rows, cols], spec.stripe_intensity)
        image[:, rows[1:], cols[:-1]] = np.maximum(image[:, rows[1:], cols[:-1]], spec.stripe_intensity)
    if attrs[1]:
        start = (side - spec.blob_size) // 2
        window = (slice(None), slice(start, start + spec.blob_size), slice(start, start + spec.blob_size))
        image[window] = np.maximum(image[window], spec.blob_intensity)

    if spec.noise_sigma > 0:
        image = image + rng.split("noise").normal(0.0, spec.noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def render_text(text_original: int, rng: Rng) -> str:
    pool = SUBJECTIVE_TEXTS if text_original else FLAT_TEXTS
    words = [pool[int(rng.integers(len(pool)))]]
    n_filler = int(rng.integers(0, 7))
    words.extend(FILLER_WORDS[int(i)] for i in rng.integers(0, len(FILLER_WORDS), size=n_filler))
    return " ".join(words)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def generate_sample(index: int, label: int, spec: DatasetSpec, root: Rng) -> Sample:
    """Sample ``index``; its stream depends only on the seed and the index."""
    rng = root.split(f"sample-{index}")
    attrs = _draw_attributes(rng.split("attributes"), label, _attribute_probabilities(spec.class_balance))
    return Sample(
        id=f"syn-{index:06d}",
        image=render_frames(attrs, spec, rng.split("image")),
        text=render_text(attrs[2], rng.split("text")),
        process_labels=attrs[: spec.n_questions],
        final_label=final_label_rule(attrs),
    )


def generate_dataset(spec: DatasetSpec) -> list[Sample]:
    if spec.n_questions > 4:
        raise ConfigError(f"the synthetic generator labels at most 4 questions, {spec.n_questions} requested")
    root = Rng(spec.seed)
    n_positive = round(spec.class_balance * spec.n_samples)
    positives = set(root.split("labels").permutation(spec.n_samples)[:n_positive].tolist())
    samples = [generate_sample(i, int(i in positives), spec, root) for i in range(spec.n_samples)]
    logger.info(
        "Generated %d samples (seed=%d, positive rate %.3f)",
        len(samples),
        spec.seed,
        n_positive / spec.n_samples,
    )
    return samples


def split_dataset(samples: Sequence[Sample], test_size: int) -> tuple[list[Sample], list[Sample]]:
    """Last ``test_size`` samples are the test set; ids must be unique."""
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ConfigError("sample ids must be unique before splitting")
    if not 0 <= test_size < len(samples):
        raise ConfigError(f"test_size {test_size} must leave a nonempty training set of {len(samples)}")
    cut = len(samples) - test_size
    return list(samples[:cut]), list(samples[cut:])


def subsample(samples: Sequence[Sample], n: int, rng: Rng) -> list[Sample]:
    """``n`` samples chosen by ``rng``, kept in their original order."""
    if not 0 < n <= len(samples):
        raise ConfigError(f"cannot subsample {n} of {len(samples)} samples")
    keep = np.sort(rng.permutation(len(samples))[:n])
    return [samples[int(i)] for i in keep]


def spec_hash(spec: DatasetSpec) -> str:
    canonical = json.dumps(spec.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def dataset_digest(samples: Iterable[Sample]) -> str:
    """Content hash of a dataset, as written to JSONL."""
    digest = hashlib.sha256()
    for sample in samples:
        digest.update(encode_sample(sample).encode("utf-8"))
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------


def encode_sample(sample: Sample) -> str:
    record = {
        "id": sample.id,
        "image": np.round(sample.image.astype(np.float64), 6).tolist(),
        "text": sample.text,
        "process_labels": list(sample.process_labels),
        "final_label": sample.final_label,
    }
    return json.dumps(record, separators=(",", ":")) + "\n"


def write_jsonl(samples: Iterable[Sample], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for sample in samples:
            fh.write(encode_sample(sample))


def read_jsonl(path: str | Path) -> list[Sample]:
    path = Path(path)
    samples: list[Sample] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(path), lineno, exc.msg) from exc
            if not isinstance(record, dict):
                raise ParseError(str(path), lineno, "expected a JSON object")
            for field in SAMPLE_FIELDS:
                if field not in record:
                    raise SchemaError(field, f"{path}:{lineno}")
            try:
                samples.append(Sample.model_validate(record))
            except ValidationError as exc:
                error = exc.errors()[0]
                field = str(error["loc"][0]) if error["loc"] else "record"
                raise SchemaError(field, f"{path}:{lineno}: {error['msg']}") from exc
    return samples
