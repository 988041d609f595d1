import math

import numpy as np
import pytest

from src.agentps import numerics as nx
from src.agentps.assembly import build_sequence, pad_batch
from src.agentps.errors import BudgetError, ContractError, ShapeError, VariantError
from src.agentps.network import ModelBundle, forward_variant, head_questions, parameter_shapes
from src.agentps.training import compute_loss
from tests.conftest import make_config, make_model, make_vocab

TEXT = "a cat sits on the old wooden table"


def _images(seed: int, frames: int = 2, side: int = 8) -> np.ndarray:
    return nx.Rng(seed).split("images").uniform(size=(frames, side, side)).astype(np.float32)


def _gelu(v):
    return 0.5 * v * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v**3)))


def _layer_norm(v, gamma, beta, eps=1e-5):
    centered = v - v.mean(axis=-1, keepdims=True)
    return centered / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps) * gamma + beta


def _state(model):
    return {name: p.data.astype(np.float64) for name, p in model.named_parameters()}


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def test_head_counts_per_variant():
    assert head_questions(make_config("agentps", 4)) == [1, 2, 3, 4, 5]
    assert head_questions(make_config("multitask", 4)) == [1, 2, 3, 4, 5]
    assert head_questions(make_config("vanilla", 4)) == [5]


def test_parameter_count_is_a_function_of_config():
    a = make_model("agentps", 4, seed=0)
    b = make_model("agentps", 4, seed=9)
    assert a.num_parameters() == b.num_parameters()
    assert list(dict(a.named_parameters())) == list(parameter_shapes(a.config))
    assert make_model("vanilla", 4).num_parameters() < a.num_parameters()


def test_bundle_rejects_mismatched_parameters():
    model = make_model()
    params = dict(model.named_parameters())
    params.pop("encoder.bias")
    with pytest.raises(ContractError):
        ModelBundle(model.config, params)


# ---------------------------------------------------------------------------
# Encoder and projector
# ---------------------------------------------------------------------------


def test_encode_zero_frames_gives_bias_rows():
    model = make_model()
    z = model.encode_frames(np.zeros((1, 8, 8)))
    assert z.shape == (4, 8)
    np.testing.assert_array_equal(z.data, np.zeros((4, 8), dtype=np.float32))


def test_patch_count():
    model = make_model(image_size=16, patch_size=4, max_seq_len=96)
    assert model.encode_frames(np.zeros((1, 16, 16))).shape[0] == 16


def test_encode_matches_per_patch_loop():
    model = make_model()
    model.params["encoder.bias"].data[:] = nx.Rng(5).normal(size=8)
    images = _images(1)
    z = model.encode_frames(images).data
    w = model.params["encoder.weight"].data.astype(np.float64)
    b = model.params["encoder.bias"].data.astype(np.float64)
    row = 0
    for frame in range(2):
        for r in range(2):
            for c in range(2):
                patch = images[frame, r * 4 : (r + 1) * 4, c * 4 : (c + 1) * 4].reshape(-1)
                np.testing.assert_allclose(z[row], patch @ w + b, atol=1e-6)
                row += 1


def test_encode_rejects_wrong_spatial_size():
    with pytest.raises(ShapeError):
        make_model().encode_frames(np.zeros((2, 6, 6)))


def test_project_zero_input_is_zero():
    model = make_model()
    out = model.project(nx.Tensor(np.zeros((3, 8))))
    assert out.shape == (3, 16)
    np.testing.assert_array_equal(out.data, np.zeros((3, 16), dtype=np.float32))


def test_project_matches_two_step_evaluation():
    model = make_model()
    for name in ("projector.fc1.bias", "projector.fc2.bias"):
        model.params[name].data[:] = nx.Rng(6).split(name).normal(size=16)
    z = nx.Rng(7).normal(size=(1, 8)).astype(np.float32)
    p = _state(model)
    hidden = _gelu(z @ p["projector.fc1.weight"] + p["projector.fc1.bias"])
    expected = hidden @ p["projector.fc2.weight"] + p["projector.fc2.bias"]
    np.testing.assert_allclose(model.project(nx.Tensor(z)).data, expected, atol=1e-6)


def test_project_rejects_wrong_width():
    with pytest.raises(ShapeError):
        make_model().project(nx.Tensor(np.zeros((2, 5))))


# ---------------------------------------------------------------------------
# Language model
# ---------------------------------------------------------------------------


def test_lm_with_no_layers_is_normalized_embeddings():
    model = make_model(n_layers=0)
    h_f = nx.Tensor(nx.Rng(1).normal(size=(3, 16)))
    ids = [5, 6, 7]
    out = model.lm_forward(h_f, ids).data
    p = _state(model)
    x = np.concatenate([h_f.data.astype(np.float64), p["lm.token_embedding"][ids]]) + p["lm.position_embedding"][:6]
    np.testing.assert_allclose(out, _layer_norm(x, p["lm.ln_f.gamma"], p["lm.ln_f.beta"]), atol=1e-5)


def test_lm_matches_naive_attention():
    with nx.precision(64):
        model = make_model(n_layers=1, n_heads=1)
        for name, param in model.named_parameters():
            if param.ndim == 1:
                param.data = param.data + 0.1 * nx.Rng(2).split(name).normal(size=param.shape)
        h_f = nx.Tensor(nx.Rng(3).normal(size=(2, 16)))
        ids = [9, 4]
        out = model.lm_forward(h_f, ids).data

    p = _state(model)
    blk = "lm.blocks.0"
    x = np.concatenate([h_f.data, p["lm.token_embedding"][ids]]) + p["lm.position_embedding"][:4]
    n = _layer_norm(x, p[f"{blk}.ln1.gamma"], p[f"{blk}.ln1.beta"])
    q = n @ p[f"{blk}.attn.wq"] + p[f"{blk}.attn.bq"]
    k = n @ p[f"{blk}.attn.wk"] + p[f"{blk}.attn.bk"]
    v = n @ p[f"{blk}.attn.wv"] + p[f"{blk}.attn.bv"]
    scores = q @ k.T / math.sqrt(16)
    scores = np.where(np.tril(np.ones((4, 4), dtype=bool)), scores, -np.inf)
    weights = np.exp(scores - scores.max(axis=1, keepdims=True))
    weights /= weights.sum(axis=1, keepdims=True)
    x = x + (weights @ v) @ p[f"{blk}.attn.wo"] + p[f"{blk}.attn.bo"]
    n = _layer_norm(x, p[f"{blk}.ln2.gamma"], p[f"{blk}.ln2.beta"])
    hidden = _gelu(n @ p[f"{blk}.mlp.fc1.weight"] + p[f"{blk}.mlp.fc1.bias"])
    x = x + hidden @ p[f"{blk}.mlp.fc2.weight"] + p[f"{blk}.mlp.fc2.bias"]
    expected = _layer_norm(x, p["lm.ln_f.gamma"], p["lm.ln_f.beta"])
    np.testing.assert_allclose(out, expected, atol=1e-5)


def test_lm_overflow_is_budget_error():
    model = make_model()
    with pytest.raises(BudgetError) as info:
        model.lm_forward(nx.Tensor(np.zeros((8, 16))), [5] * 57)
    assert info.value.length == 65
    assert info.value.max_seq_len == 64


def test_lm_rejects_out_of_vocabulary_ids():
    model = make_model()
    with pytest.raises(ContractError):
        model.lm_forward(nx.Tensor(np.zeros((2, 16))), [model.config.vocab_size])


@pytest.mark.parametrize("n_layers", [0, 1, 2])
def test_causality(n_layers):
    """Changing token j never changes hidden rows before j, bit for bit."""
    model = make_model(n_layers=n_layers)
    rng = nx.Rng(12).split(n_layers)
    h_f = nx.Tensor(rng.normal(size=(4, 16)))
    vocab_size = model.config.vocab_size
    for trial in range(20):
        ids = rng.integers(0, vocab_size, size=12)
        j = int(rng.integers(0, 12))
        changed = ids.copy()
        changed[j] = (changed[j] + 1 + int(rng.integers(0, vocab_size - 1))) % vocab_size
        a = model.lm_forward(h_f, ids).data
        b = model.lm_forward(h_f, changed).data
        position = 4 + j
        assert a[:position].tobytes() == b[:position].tobytes()
        assert not np.array_equal(a[position], b[position])


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------


def test_zero_hidden_state_gives_zero_logits():
    model = make_model()
    logits = model.classify_at(nx.Tensor(np.zeros((5, 16))), 2, 1)
    assert logits.shape == (2,)
    np.testing.assert_array_equal(logits.data, np.zeros(2, dtype=np.float32))


def test_classify_matches_unrolled_mlp():
    model = make_model()
    for name in ("heads.q3.fc1.bias", "heads.q3.fc2.bias"):
        param = model.params[name]
        param.data = nx.Rng(8).split(name).normal(size=param.shape).astype(np.float32)
    h = nx.Rng(9).normal(size=(6, 16)).astype(np.float32)
    p = _state(model)
    hidden = _gelu(h[4] @ p["heads.q3.fc1.weight"] + p["heads.q3.fc1.bias"])
    expected = hidden @ p["heads.q3.fc2.weight"] + p["heads.q3.fc2.bias"]
    np.testing.assert_allclose(model.classify_at(nx.Tensor(h), 4, 3).data, expected, atol=1e-6)


def test_classify_missing_head_is_variant_error():
    model = make_model("vanilla")
    with pytest.raises(VariantError):
        model.classify_at(nx.Tensor(np.zeros((3, 16))), 0, 1)


def test_classify_position_out_of_range():
    with pytest.raises(ContractError):
        make_model().classify_at(nx.Tensor(np.zeros((3, 16))), 3, 1)


# ---------------------------------------------------------------------------
# Whole-model forward
# ---------------------------------------------------------------------------


def test_forward_variant_head_counts():
    vocab = make_vocab(4)
    images = _images(2)
    for variant, expected in (("vanilla", [5]), ("multitask", [1, 2, 3, 4, 5]), ("agentps", [1, 2, 3, 4, 5])):
        model = make_model(variant)
        layout = build_sequence(TEXT, vocab, model.config)
        outputs = forward_variant(model, layout, images)
        assert [q for q, _ in outputs] == expected
        assert all(logits.shape == (2,) for _, logits in outputs)


def test_agentps_reads_five_distinct_positions():
    model = make_model("agentps")
    layout = build_sequence(TEXT, make_vocab(4), model.config)
    positions = [*layout.ans_positions, layout.final_position]
    assert len(set(positions)) == 5
    assert positions == sorted(positions)


def test_agentps_without_questions_matches_vanilla():
    vocab = make_vocab(0)
    images = _images(3)
    outputs = {}
    for variant in ("agentps", "vanilla"):
        model = make_model(variant, n_questions=0, seed=4)
        layout = build_sequence(TEXT, vocab, model.config)
        outputs[variant] = forward_variant(model, layout, images)
    (q_a, logits_a), = outputs["agentps"]
    (q_v, logits_v), = outputs["vanilla"]
    assert q_a == q_v == 1
    assert logits_a.data.tobytes() == logits_v.data.tobytes()


def test_head_logits_ignore_later_tokens():
    """Head i only sees positions up to its own <ans> token."""
    model = make_model("agentps")
    vocab = make_vocab(4)
    images = _images(5)
    layout = build_sequence(TEXT, vocab, model.config)
    baseline = dict(forward_variant(model, layout, images))
    rng = nx.Rng(13)
    for trial in range(20):
        j = int(rng.integers(layout.ans_positions[0] + 1, layout.final_position + 1))
        ids = list(layout.token_ids)
        offset = j - layout.n_visual
        ids[offset] = (ids[offset] + 1 + int(rng.integers(0, vocab.size - 1))) % vocab.size
        perturbed = dict(forward_variant(model, layout.model_copy(update={"token_ids": ids}), images))
        for question, position in enumerate(layout.ans_positions, start=1):
            if position < j:
                assert perturbed[question].data.tobytes() == baseline[question].data.tobytes()


def test_forward_rejects_layout_for_another_variant():
    vocab = make_vocab(4)
    layout = build_sequence(TEXT, vocab, make_config("multitask"))
    with pytest.raises(ContractError):
        forward_variant(make_model("agentps"), layout, _images(0))


def test_forward_rejects_wrong_frame_count():
    model = make_model()
    layout = build_sequence(TEXT, make_vocab(4), model.config)
    with pytest.raises(ShapeError):
        forward_variant(model, layout, _images(0, frames=3))


def test_batched_forward_matches_single_samples():
    model = make_model("agentps")
    vocab = make_vocab(4)
    texts = [TEXT, "short text", "the watermark is on the old image today"]
    layouts = [build_sequence(t, vocab, model.config) for t in texts]
    images = np.stack([_images(10 + i) for i in range(3)])
    batched = dict(forward_variant(model, pad_batch(layouts, vocab), images))
    for row, layout in enumerate(layouts):
        single = dict(forward_variant(model, layout, images[row]))
        for question, logits in single.items():
            np.testing.assert_allclose(batched[question].data[row], logits.data, atol=1e-5)


def test_every_parameter_receives_gradient():
    model = make_model("agentps")
    layout = build_sequence(TEXT, make_vocab(4), model.config)
    outputs = forward_variant(model, layout, _images(6))
    loss = compute_loss(outputs, {1: 1, 2: 0, 3: 1, 4: 0, 5: 1}, [0.1, 0.1, 0.1, 0.1, 1.0])
    nx.backward(loss)
    for name, param in model.named_parameters():
        assert param.grad is not None, name
        if name.endswith(".attn.bk"):
            continue  # a shared key bias shifts every score of a row equally
        assert np.any(param.grad != 0), name


def test_full_loss_matches_finite_differences():
    """Every coordinate of every parameter, in 64-bit mode, on a sequence filling max_seq_len."""
    with nx.precision(64):
        model = make_model("agentps", n_questions=2, seed=1, max_seq_len=32)
        layout = build_sequence("cat sits", make_vocab(2), model.config)
        assert layout.length == 32
        images = _images(7)
        labels = {1: 1, 2: 0, 3: 1}
        weights = [0.1, 0.1, 1.0]

        def loss_for(_):
            return compute_loss(forward_variant(model, layout, images), labels, weights)

        worst = {}
        for name, param in model.named_parameters():
            model.zero_grad()
            worst[name] = nx.grad_check(loss_for, param, eps=1e-5)
        assert max(worst.values()) < 1e-4, max(worst, key=worst.get)
