from __future__ import annotations

import json
import tomllib
from pathlib import Path
from typing import Any, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, HttpUrl, SecretStr, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError, CredentialError
from .models import (
    VARIANTS,
    DatasetSpec,
    ModelConfig,
    NoiseProfile,
    QuestionTemplate,
    TrainConfig,
    Variant,
)
from .templates import PRESETS, preset


class Settings(BaseSettings):
    """Remote annotator endpoint, loaded from the environment only.

    Environment variables use the prefix ``AGENTPS_``, e.g.
    ``AGENTPS_ANNOTATOR_API_KEY``. A ``.env`` file in the working directory is
    also read.
    """

    model_config = SettingsConfigDict(env_file=".env", env_prefix="AGENTPS_", extra="ignore")

    annotator_url: Optional[HttpUrl] = None
    annotator_api_key: Optional[SecretStr] = None
    annotator_provider: Literal["generic", "openai"] = "generic"
    annotator_model: str = "gpt-4o"

    def require_endpoint(self) -> tuple[str, str]:
        """Return ``(url, api_key)`` or fail before any request is made."""
        if self.annotator_api_key is None or not self.annotator_api_key.get_secret_value():
            raise CredentialError("AGENTPS_ANNOTATOR_API_KEY is not set; remote annotation needs a credential")
        if self.annotator_url is None:
            raise CredentialError("AGENTPS_ANNOTATOR_URL is not set; remote annotation needs an endpoint")
        return str(self.annotator_url), self.annotator_api_key.get_secret_value()


class MetricThresholds(BaseModel):
    model_config = ConfigDict(extra="forbid")

    f1_threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    recall_at_precision: List[int] = Field(default_factory=lambda: [60, 65, 70, 75, 80])
    precision_at_recall: List[int] = Field(default_factory=lambda: [50])


class RemoteConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    concurrency_limit: int = Field(default=4, ge=1)  # max in-flight requests
    request_timeout: float = Field(default=30.0, gt=0.0)  # seconds
    max_retries: int = Field(default=3, ge=0)
    backoff_base: float = Field(default=0.5, ge=0.0)  # seconds, doubled per retry
    backoff_max: float = Field(default=8.0, ge=0.0)


class AblationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seeds: int = Field(default=3, ge=1)
    variants: List[Variant] = Field(default_factory=lambda: list(VARIANTS))
    noisy_arm: bool = False  # also train agentps on simulated process labels
    train_sizes: Optional[List[int]] = None  # training-set size sweep
    workers: int = Field(default=1, ge=1)  # arms trained in parallel threads


class RunConfig(BaseModel):
    """Everything one run needs; every field has a default, unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")

    output_dir: str = "runs/default"
    question_preset: Literal["ucc", "hsd"] = "ucc"
    questions: Optional[List[QuestionTemplate]] = None
    final_question: Optional[QuestionTemplate] = None
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    noise: NoiseProfile = Field(default_factory=NoiseProfile)
    metrics: MetricThresholds = Field(default_factory=MetricThresholds)
    remote: RemoteConfig = Field(default_factory=RemoteConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)

    @model_validator(mode="after")
    def _align_sections(self) -> "RunConfig":
        questions, final = preset(self.question_preset)
        if self.questions is None:
            self.questions = questions
        if self.final_question is None:
            self.final_question = final
        n = len(self.questions)

        if "n_questions" not in self.dataset.model_fields_set:
            self.dataset = self.dataset.model_copy(update={"n_questions": n})
        model_updates: dict[str, Any] = {}
        if "n_questions" not in self.model.model_fields_set:
            model_updates["n_questions"] = n
        if "classes_per_question" not in self.model.model_fields_set:
            model_updates["classes_per_question"] = [q.n_classes for q in self.questions] + [
                self.final_question.n_classes
            ]
        if "image_size" not in self.model.model_fields_set:
            model_updates["image_size"] = self.dataset.image_size
        if "n_frames" not in self.model.model_fields_set:
            model_updates["n_frames"] = self.dataset.frames
        if "variant" not in self.model.model_fields_set:
            model_updates["variant"] = self.train.variant
        if model_updates:
            self.model = ModelConfig.model_validate({**self.model.model_dump(), **model_updates})

        if self.dataset.n_questions != n or self.model.n_questions != n:
            raise ValueError(
                f"{n} questions configured but dataset has {self.dataset.n_questions} "
                f"and model has {self.model.n_questions}"
            )
        if self.model.image_size != self.dataset.image_size or self.model.n_frames != self.dataset.frames:
            raise ValueError("model image geometry must match the dataset")
        if self.model.variant != self.train.variant:
            raise ValueError(f"model variant {self.model.variant} differs from train variant {self.train.variant}")
        if len(self.noise.accuracies) < n:
            raise ValueError(f"noise profile lists {len(self.noise.accuracies)} accuracies for {n} questions")
        self.train.resolved_weights(n)
        return self

    @property
    def n_questions(self) -> int:
        return len(self.questions or [])

    def for_variant(self, variant: str, **train_updates: Any) -> "RunConfig":
        """Copy of this config retargeted to another variant (and train fields)."""
        data = self.model_dump()
        data["model"]["variant"] = variant
        data["train"].update(train_updates, variant=variant)
        return RunConfig.model_validate(data)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: dict[str, Any], overrides: List[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` overrides; values are JSON literals or bare strings."""
    for item in overrides:
        path, sep, raw = item.partition("=")
        if not sep or not path:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        node = data
        keys = path.strip().split(".")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-table value")
        node[keys[-1]] = _parse_value(raw.strip())
    return data


def parse_run_config(text: str, overrides: Optional[List[str]] = None) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    data = apply_overrides(data, overrides or [])
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid run config:\n{exc}") from exc


def load_run_config(path: Optional[Path], overrides: Optional[List[str]] = None) -> tuple[RunConfig, str]:
    """Read, override and validate a TOML run config; also return its verbatim text."""
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} does not exist") from exc
    return parse_run_config(text, overrides), text


__all__ = [
    "AblationConfig",
    "MetricThresholds",
    "PRESETS",
    "RemoteConfig",
    "RunConfig",
    "Settings",
    "apply_overrides",
    "load_run_config",
    "parse_run_config",
]
