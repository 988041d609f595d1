import itertools
import json
from pathlib import Path

import numpy as np
import pytest

from src.agentps import numerics as nx
from src.agentps.data import (
    FLAT_TEXTS,
    SUBJECTIVE_TEXTS,
    dataset_digest,
    encode_sample,
    final_label_rule,
    generate_dataset,
    generate_sample,
    read_jsonl,
    split_dataset,
    subsample,
    write_jsonl,
)
from src.agentps.errors import ConfigError, ParseError, SchemaError
from src.agentps.models import DatasetSpec, Sample

DOCS = Path(__file__).resolve().parents[2] / "docs"


def _rule_table() -> list[tuple[tuple[int, ...], int]]:
    """Rows of the truth table published in docs/label_rule.md."""
    rows = []
    for line in (DOCS / "label_rule.md").read_text(encoding="utf-8").splitlines():
        cells = [c.strip() for c in line.strip().strip("|").split("|")]
        if len(cells) == 5 and all(c in ("0", "1") for c in cells):
            values = tuple(int(c) for c in cells)
            rows.append((values[:4], values[4]))
    return rows


def test_rule_examples():
    assert final_label_rule((1, 0, 0, 1)) == 1
    assert final_label_rule((1, 1, 0, 1)) == 1
    for w, s, c in itertools.product((0, 1), repeat=3):
        assert final_label_rule((w, s, 1, c)) == 0


def test_rule_matches_published_table():
    table = _rule_table()
    assert [attrs for attrs, _ in table] == list(itertools.product((0, 1), repeat=4))
    for attrs, label in table:
        assert final_label_rule(attrs) == label


def test_rule_needs_four_attributes():
    with pytest.raises(ConfigError):
        final_label_rule((1, 0, 0))


def test_stump_on_true_attributes_is_perfect(tiny_samples):
    """Splitting on text_original, then on watermark/coherent, recovers every label."""
    for sample in tiny_samples:
        watermark, _, text_original, coherent = sample.process_labels
        predicted = 0 if text_original else int(watermark or not coherent)
        assert predicted == sample.final_label


def test_stripe_reaches_intensity_without_noise():
    spec = DatasetSpec(n_samples=20, image_size=8, test_size=0, noise_sigma=0.0, seed=1)
    samples = generate_dataset(spec)
    with_stripe = [s for s in samples if s.process_labels[0] == 1]
    assert with_stripe
    for sample in with_stripe:
        diagonal = np.diagonal(sample.image, axis1=1, axis2=2)
        assert diagonal.min() >= spec.stripe_intensity - 1e-6


def test_blob_reaches_intensity_without_noise():
    spec = DatasetSpec(n_samples=20, image_size=8, test_size=0, noise_sigma=0.0, seed=2)
    for sample in generate_dataset(spec):
        centre = sample.image[:, 2:6, 2:6]
        if sample.process_labels[1]:
            assert centre.min() >= spec.blob_intensity - 1e-6


def test_coherent_frames_share_background_without_noise():
    spec = DatasetSpec(n_samples=30, image_size=8, test_size=0, noise_sigma=0.0, seed=3)
    for sample in generate_dataset(spec):
        same = np.array_equal(sample.image[0], sample.image[1])
        assert same == bool(sample.process_labels[3])


def test_text_pool_follows_originality(tiny_samples):
    for sample in tiny_samples:
        pool = SUBJECTIVE_TEXTS if sample.process_labels[2] else FLAT_TEXTS
        assert any(sample.text.startswith(t) for t in pool)


def test_samples_are_valid(tiny_spec, tiny_samples):
    assert len(tiny_samples) == tiny_spec.n_samples
    for sample in tiny_samples:
        assert sample.image.shape == (2, 8, 8)
        assert sample.image.dtype == np.float32
        assert 0.0 <= sample.image.min() and sample.image.max() <= 1.0
        assert len(sample.process_labels) == 4
        assert all(label in (0, 1) for label in sample.process_labels)
    assert len({s.id for s in tiny_samples}) == len(tiny_samples)


def test_generation_is_deterministic(tiny_spec, tiny_samples):
    again = generate_dataset(tiny_spec)
    assert [encode_sample(s) for s in again] == [encode_sample(s) for s in tiny_samples]


def test_distinct_seeds_give_distinct_datasets():
    a = generate_dataset(DatasetSpec(n_samples=1000, image_size=8, test_size=0, seed=0))
    b = generate_dataset(DatasetSpec(n_samples=1000, image_size=8, test_size=0, seed=1))
    assert dataset_digest(a) != dataset_digest(b)


def test_sample_depends_only_on_seed_and_index(tiny_spec, tiny_samples):
    root = nx.Rng(tiny_spec.seed)
    sample = generate_sample(7, tiny_samples[7].final_label, tiny_spec, root)
    assert encode_sample(sample) == encode_sample(tiny_samples[7])


def test_exact_class_balance():
    spec = DatasetSpec(n_samples=1000, image_size=8, test_size=0, class_balance=0.3, seed=4)
    samples = generate_dataset(spec)
    assert sum(s.final_label for s in samples) == 300


@pytest.mark.slow
def test_balance_on_large_dataset():
    spec = DatasetSpec(n_samples=10000, image_size=8, test_size=0, seed=5)
    rate = np.mean([s.final_label for s in generate_dataset(spec)])
    assert 0.48 <= rate <= 0.52


def test_fewer_questions_truncate_process_labels():
    spec = DatasetSpec(n_samples=10, image_size=8, test_size=0, n_questions=2, seed=6)
    assert all(len(s.process_labels) == 2 for s in generate_dataset(spec))


def test_generator_has_four_attributes_at_most():
    spec = DatasetSpec(n_samples=10, image_size=8, test_size=0, n_questions=6, seed=6)
    with pytest.raises(ConfigError):
        generate_dataset(spec)


def test_split_keeps_the_tail_for_testing(tiny_samples):
    train, test = split_dataset(tiny_samples, 12)
    assert len(train) == 36 and len(test) == 12
    assert [s.id for s in test] == [s.id for s in tiny_samples[36:]]
    assert not {s.id for s in train} & {s.id for s in test}


def test_split_rejects_duplicate_ids(tiny_samples):
    with pytest.raises(ConfigError):
        split_dataset([*tiny_samples, tiny_samples[0]], 5)
    with pytest.raises(ConfigError):
        split_dataset(tiny_samples, len(tiny_samples))


def test_subsample_keeps_order(tiny_samples):
    chosen = subsample(tiny_samples, 10, nx.Rng(0))
    positions = [int(s.id.split("-")[1]) for s in chosen]
    assert len(chosen) == 10
    assert positions == sorted(positions)
    with pytest.raises(ConfigError):
        subsample(tiny_samples, 0, nx.Rng(0))


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------


def test_empty_round_trip(tmp_path):
    path = tmp_path / "empty.jsonl"
    write_jsonl([], path)
    assert path.read_text(encoding="utf-8") == ""
    assert read_jsonl(path) == []


def test_round_trip(tmp_path):
    samples = generate_dataset(DatasetSpec(n_samples=100, image_size=8, test_size=0, seed=8))
    path = tmp_path / "data.jsonl"
    write_jsonl(samples, path)
    loaded = read_jsonl(path)
    assert [s.id for s in loaded] == [s.id for s in samples]
    for original, restored in zip(samples, loaded):
        assert restored.process_labels == original.process_labels
        assert restored.final_label == original.final_label
        assert restored.text == original.text
        np.testing.assert_allclose(restored.image, original.image, atol=1e-6)


def test_lines_are_lf_terminated_json(tmp_path, tiny_samples):
    path = tmp_path / "data.jsonl"
    write_jsonl(tiny_samples[:3], path)
    raw = path.read_bytes()
    assert b"\r\n" not in raw
    for line in raw.decode("utf-8").splitlines():
        assert set(json.loads(line)) == {"id", "image", "text", "process_labels", "final_label"}


def test_truncated_last_line_is_parse_error(tmp_path, tiny_samples):
    path = tmp_path / "data.jsonl"
    write_jsonl(tiny_samples[:3], path)
    text = path.read_text(encoding="utf-8")
    path.write_text(text[: len(text) - 40], encoding="utf-8")
    with pytest.raises(ParseError) as info:
        read_jsonl(path)
    assert info.value.line == 3


def test_missing_field_is_schema_error(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text(json.dumps({"id": "x", "image": [[[0.0]]], "text": "", "process_labels": []}) + "\n")
    with pytest.raises(SchemaError) as info:
        read_jsonl(path)
    assert info.value.field == "final_label"


def test_out_of_range_pixels_are_schema_error(tmp_path):
    record = {"id": "x", "image": [[[2.0, 0.0], [0.0, 0.0]]], "text": "", "process_labels": [], "final_label": 0}
    path = tmp_path / "data.jsonl"
    path.write_text(json.dumps(record) + "\n")
    with pytest.raises(SchemaError) as info:
        read_jsonl(path)
    assert info.value.field == "image"


def test_golden_example_file():
    samples = read_jsonl(DOCS / "examples" / "sample.jsonl")
    assert [s.id for s in samples] == ["syn-000000", "syn-000001"]
    assert all(isinstance(s, Sample) and s.image.shape == (2, 4, 4) for s in samples)
    for sample in samples:
        assert sample.final_label == final_label_rule(sample.process_labels)
    assert samples[0].image[0, 0, 0] == pytest.approx(0.8)
