import pytest

from src.agentps import numerics as nx
from src.agentps.assembly import SpecialVocab
from src.agentps.data import generate_dataset, word_pool
from src.agentps.models import DatasetSpec, ModelConfig
from src.agentps.network import ModelBundle
from src.agentps.templates import HSD_QUESTIONS, UCC_FINAL, UCC_QUESTIONS

# ucc questions first, so batteries of up to four match the preset
BATTERY = [*UCC_QUESTIONS, *HSD_QUESTIONS]


def make_vocab(n_questions: int = 4) -> SpecialVocab:
    return SpecialVocab.build(word_pool(), BATTERY[:n_questions], UCC_FINAL)


def make_config(variant: str = "agentps", n_questions: int = 4, **overrides) -> ModelConfig:
    vocab = make_vocab(n_questions)
    fields = dict(
        image_size=8,
        patch_size=4,
        n_frames=2,
        d_enc=8,
        d_model=16,
        n_layers=1,
        n_heads=2,
        mlp_ratio=2,
        vocab_size=vocab.size,
        max_seq_len=64,
        n_questions=n_questions,
        variant=variant,
    )
    fields.update(overrides)
    return ModelConfig(**fields)


def make_model(variant: str = "agentps", n_questions: int = 4, seed: int = 0, **overrides) -> ModelBundle:
    return ModelBundle.init(make_config(variant, n_questions, **overrides), nx.Rng(seed).split("model"))


@pytest.fixture(autouse=True)
def default_precision():
    """Every test starts (and ends) in 32-bit mode."""
    nx.set_precision(32)
    yield
    nx.set_precision(32)


@pytest.fixture
def vocab():
    return make_vocab(4)


@pytest.fixture
def tiny_spec():
    return DatasetSpec(n_samples=48, image_size=8, test_size=12, seed=3)


@pytest.fixture
def tiny_samples(tiny_spec):
    return generate_dataset(tiny_spec)
