from __future__ import annotations

import math
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Variant = Literal["vanilla", "multitask", "agentps"]
LabelSource = Literal["ground_truth", "simulated", "remote"]
QuestionKind = Literal["binary", "count"]

VARIANTS: tuple[str, ...] = ("vanilla", "multitask", "agentps")

TENTH = Decimal("0.1")

# A process or final label; ``None`` marks a MISSING annotation.
Label = Optional[int]


def percent(value: float) -> Decimal:
    """Fraction as a percentage in exact tenths, rounded half up."""
    return (Decimal(repr(float(value))) * 100).quantize(TENTH, rounding=ROUND_HALF_UP)


class QuestionTemplate(BaseModel):
    """One question of the battery.

    ``prompt`` is the short form placed in the model's input sequence;
    ``annotator_prompt`` is the full zero-shot instruction sent to an MLLM.
    """

    name: str
    prompt: str
    annotator_prompt: Optional[str] = None
    kind: QuestionKind = "binary"
    threshold: int = Field(default=1, ge=0)
    n_classes: int = Field(default=2, ge=2)

    @property
    def instruction(self) -> str:
        return self.annotator_prompt or self.prompt


class Sample(BaseModel):
    """One synthetic datum: frames, text, process labels and final label."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    id: str
    image: np.ndarray  # [F, S, S], float32 in [0, 1]
    text: str
    process_labels: List[int]
    final_label: int

    @field_validator("image", mode="before")
    def _as_array(cls, v: Any) -> np.ndarray:  # noqa: N805
        array = np.asarray(v, dtype=np.float32)
        if array.ndim == 2:
            array = array[None]
        if array.ndim != 3 or array.shape[1] != array.shape[2]:
            raise ValueError(f"image must be [frames, side, side], got shape {array.shape}")
        if array.size and (array.min() < 0.0 or array.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        return array

    @property
    def labels(self) -> list[int]:
        """Process labels followed by the final label."""
        return [*self.process_labels, self.final_label]


class DatasetSpec(BaseModel):
    """Parameters of the procedural generator."""

    model_config = ConfigDict(extra="forbid")

    n_samples: int = Field(default=6000, ge=1)
    n_questions: int = Field(default=4, ge=0)
    image_size: int = Field(default=16, ge=8)
    frames: int = Field(default=2, ge=2)
    stripe_intensity: float = Field(default=0.8, gt=0.0, le=1.0)
    blob_size: int = Field(default=4, ge=1)
    blob_intensity: float = Field(default=0.8, gt=0.0, le=1.0)
    noise_sigma: float = Field(default=0.15, ge=0.0)
    label_rule: Literal["ucc-v1"] = "ucc-v1"
    class_balance: float = Field(default=0.5, gt=0.0, lt=1.0)
    test_size: int = Field(default=1000, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_split(self) -> "DatasetSpec":
        if self.test_size >= self.n_samples:
            raise ValueError("test_size must leave at least one training sample")
        if self.blob_size > self.image_size:
            raise ValueError("blob_size cannot exceed image_size")
        return self


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_size: int = Field(default=16, ge=1)
    patch_size: int = Field(default=4, ge=1)
    n_frames: int = Field(default=2, ge=1)
    d_enc: int = Field(default=32, ge=1)
    d_model: int = Field(default=32, ge=1)
    n_layers: int = Field(default=2, ge=0)
    n_heads: int = Field(default=4, ge=1)
    mlp_ratio: int = Field(default=4, ge=1)
    vocab_size: Optional[int] = Field(default=None, ge=5)
    max_seq_len: int = Field(default=288, ge=2)
    n_questions: int = Field(default=4, ge=0)
    classes_per_question: Optional[List[int]] = None
    variant: Variant = "agentps"

    @model_validator(mode="after")
    def _check_geometry(self) -> "ModelConfig":
        if self.image_size % self.patch_size:
            raise ValueError(f"patch_size {self.patch_size} must divide image_size {self.image_size}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} must be divisible by n_heads {self.n_heads}")
        if self.classes_per_question is not None:
            if len(self.classes_per_question) != self.n_questions + 1:
                raise ValueError("classes_per_question needs one entry per question plus the final one")
            if any(c < 2 for c in self.classes_per_question):
                raise ValueError("every question needs at least 2 classes")
        if self.max_seq_len <= self.visual_token_count:
            raise ValueError(
                f"max_seq_len {self.max_seq_len} leaves no room after {self.visual_token_count} visual tokens"
            )
        return self

    @property
    def head_classes(self) -> list[int]:
        """Classes per head, questions 1..N then the final one; binary unless configured."""
        if self.classes_per_question is None:
            return [2] * (self.n_questions + 1)
        return list(self.classes_per_question)

    @property
    def patches_per_frame(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size

    @property
    def visual_token_count(self) -> int:
        return self.n_frames * self.patches_per_frame

    @property
    def text_limit(self) -> int:
        """Room left for text-side tokens after the visual tokens."""
        return self.max_seq_len - self.visual_token_count

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    weights: Optional[List[float]] = None
    lr: float = Field(default=3e-4, ge=0.0)
    lr_schedule: Literal["constant", "linear", "cosine"] = "constant"
    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=32, ge=1)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    seed: int = 0
    variant: Variant = "agentps"
    label_source: LabelSource = "ground_truth"
    annotate_final: bool = False

    @field_validator("weights")
    def _check_weights(cls, v: Optional[List[float]]) -> Optional[List[float]]:  # noqa: N805
        if v is None:
            return v
        if not v:
            raise ValueError("weights must not be empty")
        if any(w < 0 for w in v):
            raise ValueError("weights must be nonnegative")
        if v[-1] <= 0:
            raise ValueError("the final-question weight must be positive")
        return v

    def resolved_weights(self, n_questions: int) -> list[float]:
        """Per-question loss weights; 0.1 for ancillary questions and 1 for the final one by default."""
        if self.weights is None:
            return [0.1] * n_questions + [1.0]
        if len(self.weights) != n_questions + 1:
            raise ValueError(f"expected {n_questions + 1} weights, got {len(self.weights)}")
        return list(self.weights)


class NoiseProfile(BaseModel):
    """Annotator quality measured on reviewed samples, per question."""

    model_config = ConfigDict(extra="forbid")

    accuracies: List[float] = Field(default_factory=lambda: [0.7910, 0.6695, 0.7429, 0.7768])
    final_accuracy: float = 0.5760
    missing_rate_final: float = 0.1223
    seed: int = 0


class AnnotationResult(BaseModel):
    """Labels produced for one sample; ``None`` entries are MISSING."""

    sample_id: str
    labels: List[Label]
    source: Literal["simulated", "remote"]
    raw_response: Optional[str] = None
    error: Optional[str] = None

    @property
    def process_labels(self) -> list[Label]:
        return self.labels[:-1]

    @property
    def final_label(self) -> Label:
        return self.labels[-1]


class ScoredPrediction(BaseModel):
    sample_id: str
    score: float
    label: int

    @field_validator("score")
    def _check_score(cls, v: float) -> float:  # noqa: N805
        if not math.isfinite(v) or not 0.0 <= v <= 1.0:
            raise ValueError(f"score {v} must be finite and within [0, 1]")
        return v


class MetricsReport(BaseModel):
    """Metrics of one trained arm on one test set; values are fractions in [0, 1]."""

    variant: Variant
    label_source: LabelSource = "ground_truth"
    seed: int
    n_train: int
    n_test: int
    f1: float
    f1_best: float
    recall_at_precision: dict[int, float]
    precision_at_recall: dict[int, float]
    question_accuracy: List[float] = Field(default_factory=list)

    @property
    def arm(self) -> str:
        return self.variant if self.label_source == "ground_truth" else f"{self.variant}+{self.label_source}"

    def columns(self) -> dict[str, float]:
        values = {"f1": self.f1, "f1_best": self.f1_best}
        values.update({f"r@p{k}": v for k, v in sorted(self.recall_at_precision.items())})
        values.update({f"p@r{k}": v for k, v in sorted(self.precision_at_recall.items())})
        values.update({f"acc_q{i + 1}": v for i, v in enumerate(self.question_accuracy)})
        return values

    def to_row(self) -> dict[str, str]:
        """CSV row with percentages at one decimal, the way result tables print them."""
        row = {"variant": self.arm, "seed": str(self.seed)}
        row.update({name: str(percent(value)) for name, value in self.columns().items()})
        return row
