"""Input sequence assembly.

Layout of the text side (visual tokens occupy absolute positions 0..V-1)::

    [sample text, clipped] [<sep> q_1 <ans>] ... [<sep> q_N <ans>] [<sep> final question]

The hidden state at each ``<ans>`` feeds that question's head; the last token
of the final question feeds the final head. The vanilla variant drops the
ancillary blocks.
"""

from __future__ import annotations

from typing import Iterable, List, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, PrivateAttr

from .errors import BudgetError, ConfigError, ContractError
from .models import ModelConfig, QuestionTemplate, Sample, Variant

PAD = "<pad>"
UNK = "<unk>"
SEP = "<sep>"
ANS = "<ans>"
IMG = "<img>"
SPECIAL_TOKENS: tuple[str, ...] = (PAD, UNK, SEP, ANS, IMG)


def _words(text: str) -> list[str]:
    return text.lower().split()


class SpecialVocab(BaseModel):
    """Fixed vocabulary with reserved ids and pre-tokenized question templates."""

    words: List[str]
    question_templates: List[List[int]]
    final_template: List[int]

    _index: dict[str, int] = PrivateAttr(default_factory=dict)

    def model_post_init(self, __context: object) -> None:
        self._index = {w: i for i, w in enumerate(self.words)}
        if len(self._index) != len(self.words):
            raise ConfigError("vocabulary words must be distinct")
        if tuple(self.words[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ConfigError(f"vocabulary must start with {SPECIAL_TOKENS}")
        for tokens in self.question_templates:
            if not tokens or tokens[-1] != self.ans_id or tokens.count(self.ans_id) != 1:
                raise ConfigError("each ancillary template must end with exactly one <ans>")
        if not self.final_template or self.ans_id in self.final_template:
            raise ConfigError("the final template must be non-empty and contain no <ans>")

    @classmethod
    def build(
        cls,
        words: Iterable[str],
        questions: Sequence[QuestionTemplate],
        final: QuestionTemplate,
    ) -> "SpecialVocab":
        pool = {w for w in words}
        for template in [*questions, final]:
            pool.update(_words(template.prompt))
        pool.difference_update(SPECIAL_TOKENS)
        vocab_words = [*SPECIAL_TOKENS, *sorted(pool)]
        index = {w: i for i, w in enumerate(vocab_words)}
        ans = index[ANS]
        return cls(
            words=vocab_words,
            question_templates=[[index[w] for w in _words(q.prompt)] + [ans] for q in questions],
            final_template=[index[w] for w in _words(final.prompt)],
        )

    @property
    def size(self) -> int:
        return len(self.words)

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    @property
    def sep_id(self) -> int:
        return self._index[SEP]

    @property
    def ans_id(self) -> int:
        return self._index[ANS]

    @property
    def n_questions(self) -> int:
        return len(self.question_templates)

    def lookup(self, word: str) -> int:
        return self._index.get(word, self.unk_id)


class PromptLayout(BaseModel):
    """Assembled text-side ids plus the absolute positions the heads read."""

    token_ids: List[int]
    ans_positions: List[int]
    final_position: int
    m: int  # tokens taken by the question prompt suffix
    text_budget: int
    n_visual: int
    variant: Variant
    n_questions: int

    @property
    def length(self) -> int:
        return self.n_visual + len(self.token_ids)


# ---------------------------------------------------------------------------
# Tokens
# ---------------------------------------------------------------------------


def tokenize(text: str, vocab: SpecialVocab) -> list[int]:
    """Whitespace split, lowercase, fixed-vocabulary lookup with ``<unk>`` fallback."""
    return [vocab.lookup(w) for w in _words(text)]


def detokenize(ids: Sequence[int], vocab: SpecialVocab) -> str:
    return " ".join(vocab.words[i] for i in ids)


def clip_text(tokens: Sequence[int], budget: int) -> list[int]:
    """Keep the first ``budget`` tokens."""
    if budget < 0:
        raise ContractError(f"text budget must be nonnegative, got {budget}")
    return list(tokens[:budget])


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------


def prompt_suffix(vocab: SpecialVocab, variant: Variant) -> tuple[list[int], list[int]]:
    """Question blocks appended after the text, and the ``<ans>`` offsets inside them."""
    suffix: list[int] = []
    ans_offsets: list[int] = []
    if variant != "vanilla":
        for template in vocab.question_templates:
            suffix.append(vocab.sep_id)
            suffix.extend(template)
            ans_offsets.append(len(suffix) - 1)
    suffix.append(vocab.sep_id)
    suffix.extend(vocab.final_template)
    return suffix, ans_offsets


def build_sequence(sample: Sample | str, vocab: SpecialVocab, config: ModelConfig) -> PromptLayout:
    if vocab.n_questions != config.n_questions:
        raise ContractError(
            f"vocabulary carries {vocab.n_questions} question templates, model expects {config.n_questions}"
        )
    n_visual = config.visual_token_count
    suffix, ans_offsets = prompt_suffix(vocab, config.variant)
    text_budget = config.text_limit - len(suffix)
    if text_budget < 0:
        raise BudgetError(n_visual + len(suffix), config.max_seq_len, "question prompt alone overflows")

    text = sample if isinstance(sample, str) else sample.text
    text_ids = clip_text(tokenize(text, vocab), text_budget)
    token_ids = text_ids + suffix
    return PromptLayout(
        token_ids=token_ids,
        ans_positions=[n_visual + len(text_ids) + offset for offset in ans_offsets],
        final_position=n_visual + len(token_ids) - 1,
        m=len(suffix),
        text_budget=text_budget,
        n_visual=n_visual,
        variant=config.variant,
        n_questions=config.n_questions,
    )


class PaddedBatch(BaseModel):
    """Right-padded text ids with the per-row positions heads read from."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    text_ids: np.ndarray  # [B, T] int64
    ans_positions: np.ndarray  # [B, N] int64 (N = 0 for vanilla)
    final_positions: np.ndarray  # [B] int64
    variant: Variant
    n_questions: int


def pad_batch(layouts: Sequence[PromptLayout], vocab: SpecialVocab) -> PaddedBatch:
    if not layouts:
        raise ContractError("cannot pad an empty batch")
    variants = {layout.variant for layout in layouts}
    counts = {layout.n_questions for layout in layouts}
    if len(variants) != 1 or len(counts) != 1:
        raise ContractError("all layouts in a batch must share variant and question count")
    width = max(len(layout.token_ids) for layout in layouts)
    text_ids = np.full((len(layouts), width), vocab.pad_id, dtype=np.int64)
    for row, layout in enumerate(layouts):
        text_ids[row, : len(layout.token_ids)] = layout.token_ids
    n_ans = len(layouts[0].ans_positions)
    return PaddedBatch(
        text_ids=text_ids,
        ans_positions=np.array([layout.ans_positions for layout in layouts], dtype=np.int64).reshape(
            len(layouts), n_ans
        ),
        final_positions=np.array([layout.final_position for layout in layouts], dtype=np.int64),
        variant=variants.pop(),
        n_questions=counts.pop(),
    )
