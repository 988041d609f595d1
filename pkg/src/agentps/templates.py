"""Question battery presets.

Each preset is a list of ancillary questions followed by the final question.
``prompt`` strings go into the model sequence, so they stay short and only use
plain lowercase words; ``annotator_prompt`` strings are the zero-shot
instructions for an MLLM annotator.
"""

from __future__ import annotations

from .models import QuestionTemplate

UCC_QUESTIONS: list[QuestionTemplate] = [
    QuestionTemplate(
        name="watermark",
        prompt="is there a watermark on the images",
        annotator_prompt=(
            "A watermark is an overlaid account handle or logo such as '@username' "
            "copied from another platform; a plain timestamp does not count. "
            "Treat every frame as a separate image and count how many images carry a watermark."
        ),
        kind="count",
        threshold=1,
    ),
    QuestionTemplate(
        name="ugc",
        prompt="are the images made by the user",
        annotator_prompt=(
            "User generated content is material a regular user produced, for example selfies, "
            "drawings, recordings of daily life or collages mixing found and own material. "
            "Professionally produced material such as celebrity photos, screenshots, posters or "
            "frames from films and broadcasts is not user generated. "
            "Treat every frame as a separate image and count how many images are user generated."
        ),
        kind="count",
        threshold=1,
    ),
    QuestionTemplate(
        name="text_originality",
        prompt="is the text original",
        annotator_prompt=(
            "Text is original when it carries emotional words or symbols, a personal opinion, "
            "or a narrative told by the author. Lyrics, slogans and bare statements without "
            "detail are not original. Is the accompanying text original? Answer yes or no."
        ),
        kind="binary",
    ),
    QuestionTemplate(
        name="coherence",
        prompt="do the images share one theme",
        annotator_prompt=(
            "Treat every frame as a separate image and count how many images match the "
            "overall theme of the collection."
        ),
        kind="count",
        threshold=2,
    ),
]

UCC_FINAL = QuestionTemplate(
    name="unoriginal",
    prompt="is the content unoriginal",
    annotator_prompt=(
        "Is this post unoriginal, meaning its material was copied from other sources "
        "without meaningful creative contribution by the poster? Answer yes or no."
    ),
    kind="binary",
)

HSD_QUESTIONS: list[QuestionTemplate] = [
    QuestionTemplate(
        name="ethnicity",
        prompt="is it hateful toward an ethnicity or country",
        annotator_prompt=(
            "Do the image and its caption contain mocking, discriminatory, insulting or otherwise "
            "hateful content aimed at an ethnicity or a country? Answer yes or no."
        ),
    ),
    QuestionTemplate(
        name="gender_group",
        prompt="is it hateful toward a gender or group",
        annotator_prompt=(
            "Do the image and its caption contain mocking, discriminatory, insulting or otherwise "
            "hateful content aimed at a gender or another group of people? Answer yes or no."
        ),
    ),
    QuestionTemplate(
        name="religion",
        prompt="is it hateful toward a religion",
        annotator_prompt=(
            "Do the image and its caption contain mocking, discriminatory, insulting or otherwise "
            "hateful content aimed at a religion? Answer yes or no."
        ),
    ),
]

HSD_FINAL = QuestionTemplate(
    name="hateful",
    prompt="is the meme hateful",
    annotator_prompt="Is this meme hateful? Answer yes or no.",
)

PRESETS: dict[str, tuple[list[QuestionTemplate], QuestionTemplate]] = {
    "ucc": (UCC_QUESTIONS, UCC_FINAL),
    "hsd": (HSD_QUESTIONS, HSD_FINAL),
}


def preset(name: str) -> tuple[list[QuestionTemplate], QuestionTemplate]:
    try:
        questions, final = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown question preset {name!r}; choose from {sorted(PRESETS)}") from None
    return [q.model_copy() for q in questions], final.model_copy()
