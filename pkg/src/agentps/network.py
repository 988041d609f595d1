"""Vision encoder, projector, decoder-only LM and per-question heads.

The three variants share every module except the heads:

* ``vanilla``: one head, on the last token.
* ``multitask``: N+1 heads, all on the last token.
* ``agentps``: head i on the i-th ``<ans>`` token, final head on the last token.

Question indices are 1-based; index N+1 is the final question.
"""

from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .assembly import PaddedBatch, PromptLayout
from .errors import BudgetError, ConfigError, ContractError, ShapeError, VariantError
from .models import ModelConfig
from .numerics import Rng, Tensor

HeadOutputs = list[tuple[int, Tensor]]


def head_key(question: int, n_questions: int) -> str:
    return "final" if question == n_questions + 1 else f"q{question}"


def head_questions(config: ModelConfig) -> list[int]:
    """Questions that own a head under ``config.variant``."""
    final = config.n_questions + 1
    if config.variant == "vanilla":
        return [final]
    return list(range(1, final + 1))


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every parameter, in a fixed order."""
    if config.vocab_size is None:
        raise ConfigError("model.vocab_size must be resolved before building a model")
    d = config.d_model
    hidden = config.mlp_ratio * d
    shapes: dict[str, tuple[int, ...]] = {
        "encoder.weight": (config.patch_dim, config.d_enc),
        "encoder.bias": (config.d_enc,),
        "projector.fc1.weight": (config.d_enc, d),
        "projector.fc1.bias": (d,),
        "projector.fc2.weight": (d, d),
        "projector.fc2.bias": (d,),
        "lm.token_embedding": (config.vocab_size, d),
        "lm.position_embedding": (config.max_seq_len, d),
    }
    for layer in range(config.n_layers):
        prefix = f"lm.blocks.{layer}"
        shapes[f"{prefix}.ln1.gamma"] = (d,)
        shapes[f"{prefix}.ln1.beta"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[f"{prefix}.attn.w{proj}"] = (d, d)
            shapes[f"{prefix}.attn.b{proj}"] = (d,)
        shapes[f"{prefix}.ln2.gamma"] = (d,)
        shapes[f"{prefix}.ln2.beta"] = (d,)
        shapes[f"{prefix}.mlp.fc1.weight"] = (d, hidden)
        shapes[f"{prefix}.mlp.fc1.bias"] = (hidden,)
        shapes[f"{prefix}.mlp.fc2.weight"] = (hidden, d)
        shapes[f"{prefix}.mlp.fc2.bias"] = (d,)
    shapes["lm.ln_f.gamma"] = (d,)
    shapes["lm.ln_f.beta"] = (d,)
    for question in head_questions(config):
        key = f"heads.{head_key(question, config.n_questions)}"
        n_classes = config.head_classes[question - 1]
        shapes[f"{key}.fc1.weight"] = (d, d)
        shapes[f"{key}.fc1.bias"] = (d,)
        shapes[f"{key}.fc2.weight"] = (d, n_classes)
        shapes[f"{key}.fc2.bias"] = (n_classes,)
    return shapes


def _init_parameter(name: str, shape: tuple[int, ...], rng: Rng) -> Tensor:
    if len(shape) == 2:
        return nx.glorot_uniform(rng.split(name), shape, name)
    if name.endswith(".gamma"):
        return nx.ones(shape, name)
    return nx.zeros(shape, name)


class ModelBundle:
    """Parameters of the whole architecture plus the forward pieces."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            raise ContractError("parameter names do not match the model config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"parameter {name} has the wrong shape", params[name].shape, shape)
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, rng: Rng) -> "ModelBundle":
        """Fresh parameters; each one is drawn from ``rng.split(name)``."""
        params = {name: _init_parameter(name, shape, rng) for name, shape in parameter_shapes(config).items()}
        return cls(config, params)

    # ------------------------------------------------------------------
    # Parameter bookkeeping
    # ------------------------------------------------------------------

    @property
    def variant(self) -> str:
        return self.config.variant

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            raise ContractError(f"state does not match the model; missing {missing[:3]}")
        for name, p in self.params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"state entry {name} has the wrong shape", value.shape, p.shape)
            p.data = np.ascontiguousarray(value.astype(p.data.dtype))

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    # ------------------------------------------------------------------
    # Forward pieces
    # ------------------------------------------------------------------

    def encode_frames(self, images: np.ndarray | Tensor) -> Tensor:
        """Patchify ``[..., F, S, S]`` frames and embed every patch: ``[..., F*P, d_enc]``."""
        pixels = images.data if isinstance(images, Tensor) else np.asarray(images)
        side, patch = self.config.image_size, self.config.patch_size
        if pixels.ndim < 3 or pixels.shape[-2:] != (side, side):
            raise ShapeError(f"frames must be {side}x{side}", pixels.shape)
        lead = pixels.shape[:-2]
        grid = side // patch
        patches = pixels.reshape(*lead, grid, patch, grid, patch)
        patches = np.swapaxes(patches, -3, -2)  # [..., F, row, col, p, p]
        patches = patches.reshape(*lead[:-1], lead[-1] * grid * grid, patch * patch)
        return nx.linear(Tensor(patches), self._p("encoder.weight"), self._p("encoder.bias"))

    def project(self, z: Tensor) -> Tensor:
        """Two-layer MLP into the LM width: ``W2 gelu(W1 z + b1) + b2``."""
        if z.shape[-1] != self.config.d_enc:
            raise ShapeError("projector input width disagrees with d_enc", z.shape, (self.config.d_enc,))
        hidden = nx.gelu(nx.linear(z, self._p("projector.fc1.weight"), self._p("projector.fc1.bias")))
        return nx.linear(hidden, self._p("projector.fc2.weight"), self._p("projector.fc2.bias"))

    def _attention(self, x: Tensor, prefix: str) -> Tensor:
        cfg = self.config
        length = x.shape[-2]
        split_shape = (*x.shape[:-1], cfg.n_heads, cfg.d_head)

        def heads(proj: str) -> Tensor:
            out = nx.linear(x, self._p(f"{prefix}.w{proj}"), self._p(f"{prefix}.b{proj}"))
            return nx.swapaxes(nx.reshape(out, split_shape), -3, -2)  # [..., H, L, dh]

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = nx.matmul(q, nx.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(cfg.d_head))
        weights = nx.masked_softmax(scores, nx.causal_mask(length))
        mixed = nx.swapaxes(nx.matmul(weights, v), -3, -2)  # [..., L, H, dh]
        merged = nx.reshape(mixed, (*x.shape[:-1], cfg.d_model))
        return nx.linear(merged, self._p(f"{prefix}.wo"), self._p(f"{prefix}.bo"))

    def _mlp(self, x: Tensor, prefix: str) -> Tensor:
        hidden = nx.gelu(nx.linear(x, self._p(f"{prefix}.fc1.weight"), self._p(f"{prefix}.fc1.bias")))
        return nx.linear(hidden, self._p(f"{prefix}.fc2.weight"), self._p(f"{prefix}.fc2.bias"))

    def lm_forward(self, h_f: Tensor, text_ids: Sequence[int] | np.ndarray) -> Tensor:
        """Causal pre-norm transformer over ``[visual tokens, text tokens]``.

        Returns one hidden row per input position (``[..., L, d_model]``).
        """
        cfg = self.config
        ids = np.asarray(text_ids, dtype=np.int64)
        if h_f.shape[-1] != cfg.d_model:
            raise ShapeError("visual tokens must have width d_model", h_f.shape, (cfg.d_model,))
        if ids.shape[:-1] != h_f.shape[:-2]:
            raise ShapeError("visual tokens and text ids disagree on batch shape", h_f.shape, ids.shape)
        length = h_f.shape[-2] + ids.shape[-1]
        if length > cfg.max_seq_len:
            raise BudgetError(length, cfg.max_seq_len)
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ContractError(f"token ids must lie in [0, {cfg.vocab_size})")

        tokens = nx.gather(self._p("lm.token_embedding"), ids)
        x = nx.concat([h_f, tokens], axis=-2)
        x = x + nx.gather(self._p("lm.position_embedding"), np.arange(length))
        for layer in range(cfg.n_layers):
            prefix = f"lm.blocks.{layer}"
            normed = nx.layer_norm(x, self._p(f"{prefix}.ln1.gamma"), self._p(f"{prefix}.ln1.beta"))
            x = x + self._attention(normed, f"{prefix}.attn")
            normed = nx.layer_norm(x, self._p(f"{prefix}.ln2.gamma"), self._p(f"{prefix}.ln2.beta"))
            x = x + self._mlp(normed, f"{prefix}.mlp")
        return nx.layer_norm(x, self._p("lm.ln_f.gamma"), self._p("lm.ln_f.beta"))

    def classify_at(self, h: Tensor, position: int | np.ndarray, question: int) -> Tensor:
        """Logits of ``question``'s head on the hidden row at ``position``.

        ``h`` is ``[L, d]`` with an int position (logits ``[C]``) or ``[B, L, d]``
        with one position per row (logits ``[B, C]``).
        """
        if question not in head_questions(self.config):
            raise VariantError(f"the {self.variant} variant has no head for question {question}")
        positions = np.asarray(position, dtype=np.int64)
        length = h.shape[-2]
        if positions.size and (positions.min() < 0 or positions.max() >= length):
            raise ContractError(f"position {position} outside a sequence of length {length}")
        if h.ndim == 2:
            row = nx.gather(h, positions.reshape(1))  # [1, d]
        else:
            row = nx.gather(h, (np.arange(h.shape[0]), positions))  # [B, d]

        key = f"heads.{head_key(question, self.config.n_questions)}"
        hidden = nx.gelu(nx.linear(row, self._p(f"{key}.fc1.weight"), self._p(f"{key}.fc1.bias")))
        logits = nx.linear(hidden, self._p(f"{key}.fc2.weight"), self._p(f"{key}.fc2.bias"))
        return nx.reshape(logits, (logits.shape[-1],)) if h.ndim == 2 else logits


def forward_variant(
    model: ModelBundle,
    layout: PromptLayout | PaddedBatch,
    images: np.ndarray | Tensor,
) -> HeadOutputs:
    """Run the whole model and apply every head where the variant places it."""
    cfg = model.config
    if layout.variant != cfg.variant or layout.n_questions != cfg.n_questions:
        raise ContractError(
            f"layout built for {layout.variant} with N={layout.n_questions}, "
            f"model is {cfg.variant} with N={cfg.n_questions}"
        )
    pixels = images.data if isinstance(images, Tensor) else np.asarray(images)
    if isinstance(layout, PaddedBatch):
        text_ids = layout.text_ids
        ans_positions = [layout.ans_positions[:, i] for i in range(layout.ans_positions.shape[1])]
        final_position: int | np.ndarray = layout.final_positions
        expected_images = (len(text_ids), cfg.n_frames)
    else:
        text_ids = np.asarray(layout.token_ids, dtype=np.int64)
        ans_positions = list(layout.ans_positions)
        final_position = layout.final_position
        expected_images = (cfg.n_frames,)
    if pixels.shape[:-2] != expected_images:
        raise ShapeError("images do not match the batch and frame count", pixels.shape[:-2], expected_images)

    hidden = model.lm_forward(model.project(model.encode_frames(pixels)), text_ids)
    final = cfg.n_questions + 1
    if cfg.variant == "vanilla":
        return [(final, model.classify_at(hidden, final_position, final))]
    if cfg.variant == "multitask":
        return [(q, model.classify_at(hidden, final_position, q)) for q in range(1, final + 1)]
    outputs = [(q, model.classify_at(hidden, ans_positions[q - 1], q)) for q in range(1, final)]
    outputs.append((final, model.classify_at(hidden, final_position, final)))
    return outputs
