"""Frozen dual-encoder abstraction and a deterministic toy backend.

The bundle exposes the adapter contract any real backbone must satisfy:
``tokenize``, ``embed_tokens``, ``text_forward_with_prompts``,
``image_forward_with_prompts``, ``projection``, and ``tau``. Encoder weights
are plain numpy constants, so gradients can only ever flow into the prompt
matrices and the projection bias — the backbone is frozen by construction.

The toy backend is a miniature mean-mixing transformer (token mixing via the
sequence mean, tanh nonlinearity) with a hashed-vocabulary whitespace
tokenizer. It is fully deterministic given the config seed and small enough
for finite-difference verification in float64.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import engine as eg

PATCH_DIM = 8
TOY_VOCAB = 512
TOY_CONTEXT = 64
TOY_TAU = 0.01
PROMPT_INIT_PHRASE = "a photo of a"
PROMPT_INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    """Shapes and seeding for one encoder pair."""

    d: int
    d_prime: int
    M: int
    n_tokens: int = 4
    prompt_depth: int = 1
    layers: int = 2
    seed: int = 0

    def __post_init__(self):
        if min(self.d, self.d_prime, self.M) < 1:
            raise ValueError("d, d_prime, and M must be >= 1")
        if self.n_tokens < 1:
            raise ValueError("n_tokens must be >= 1")
        if not 1 <= self.prompt_depth <= self.layers:
            raise ValueError("prompt_depth must satisfy 1 <= prompt_depth <= layers")


def config_hash(config: EncoderConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class PromptParameters:
    """The trainable set: per-layer prompt matrices plus the projection bias.

    ``text_prompts`` and ``visual_prompts`` have exactly ``prompt_depth``
    entries of shape ``(n_tokens, d_prime)``; ``proj_bias`` has length ``d``.
    Entries may be numpy arrays or autodiff tensors.
    """

    text_prompts: list
    visual_prompts: list
    proj_bias: object

    def copy(self) -> "PromptParameters":
        return PromptParameters(
            text_prompts=[np.array(eg.val(p)) for p in self.text_prompts],
            visual_prompts=[np.array(eg.val(p)) for p in self.visual_prompts],
            proj_bias=np.array(eg.val(self.proj_bias)),
        )

    def num_parameters(self) -> int:
        total = int(np.size(eg.val(self.proj_bias)))
        for p in list(self.text_prompts) + list(self.visual_prompts):
            total += int(np.size(eg.val(p)))
        return total


@dataclass
class ImageFeatures:
    """Global feature ``(d,)`` and per-patch local features ``(M, d)``."""

    global_feature: object
    local_features: object
    prompted: bool


@dataclass(frozen=True)
class EncoderBundle:
    """Frozen encoder pair behind the adapter contract (see module docstring)."""

    config: EncoderConfig
    tokenize: Callable
    embed_tokens: Callable
    text_forward_with_prompts: Callable
    image_forward_with_prompts: Callable
    projection: np.ndarray
    tau: float
    context_length: int = TOY_CONTEXT
    image_input_shape: tuple = field(default=None)


def encode_text(strings: list, bundle: EncoderBundle, prompts: PromptParameters | None = None):
    """Encode strings into L2-normalized rows of shape ``(k, d)``.

    With ``prompts`` the prompt tokens are injected at the first
    ``prompt_depth`` layers; without, the plain frozen encoder runs.
    """
    if not strings:
        raise ValueError("encode_text requires at least one string")
    text_prompts = prompts.text_prompts if prompts is not None else None
    n_extra = bundle.config.n_tokens if text_prompts is not None else 0
    rows = []
    for s in strings:
        tokens = bundle.tokenize(s)
        if len(tokens) + n_extra > bundle.context_length:
            raise ValueError(f"string exceeds context length after tokenization: {s!r}")
        rows.append(bundle.text_forward_with_prompts(tokens, text_prompts))
    matrix = eg.concat(rows, axis=0)
    return eg.l2_normalize(matrix, axis=-1)


def encode_image(image, bundle: EncoderBundle, prompts: PromptParameters | None = None) -> ImageFeatures:
    """Project encoder token states into the shared space.

    The cls token becomes the global feature (no bias); patch tokens get the
    learnable bias added after projection. Both are L2-normalized.
    """
    image = np.asarray(image, dtype=np.float64)
    if bundle.image_input_shape is not None and image.shape != bundle.image_input_shape:
        raise ValueError(
            f"image shape {image.shape} does not match encoder input {bundle.image_input_shape}"
        )
    visual_prompts = prompts.visual_prompts if prompts is not None else None
    cls_state, patch_states = bundle.image_forward_with_prompts(image, visual_prompts)
    global_feature = eg.l2_normalize(cls_state @ bundle.projection, axis=-1)
    locals_raw = patch_states @ bundle.projection
    if prompts is not None:
        locals_raw = locals_raw + prompts.proj_bias
    local_features = eg.l2_normalize(locals_raw, axis=-1)
    return ImageFeatures(
        global_feature=global_feature,
        local_features=local_features,
        prompted=prompts is not None,
    )


def init_prompt_parameters(config: EncoderConfig, bundle: EncoderBundle) -> PromptParameters:
    """App-recipe initialization: first text layer from the fixed phrase
    embeddings, everything else from N(0, 0.02), bias at zero."""
    phrase_tokens = bundle.tokenize(PROMPT_INIT_PHRASE)
    if config.n_tokens != len(phrase_tokens):
        raise ValueError(
            f"n_tokens={config.n_tokens} incompatible with the {len(phrase_tokens)}-token "
            f"init phrase {PROMPT_INIT_PHRASE!r}"
        )
    rng = np.random.default_rng(config.seed)
    text_prompts = [np.array(bundle.embed_tokens(phrase_tokens))]
    for _ in range(1, config.prompt_depth):
        text_prompts.append(rng.normal(0.0, PROMPT_INIT_STD, size=(config.n_tokens, config.d_prime)))
    visual_prompts = [
        rng.normal(0.0, PROMPT_INIT_STD, size=(config.n_tokens, config.d_prime))
        for _ in range(config.prompt_depth)
    ]
    return PromptParameters(
        text_prompts=text_prompts,
        visual_prompts=visual_prompts,
        proj_bias=np.zeros(config.d),
    )


# -- toy backend -------------------------------------------------------------


def _hash_token(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % TOY_VOCAB


def _mix_layer(h, w_token, w_pool, w_gate, bias):
    # the multiplicative term couples each token with the pooled context, so
    # injected prompts modulate tokens content-dependently (attention-like)
    pooled = eg.mean(h, axis=0, keepdims=True)
    return eg.tanh(h @ w_token + pooled @ w_pool + (h * pooled) @ w_gate + bias)


def build_toy_encoder(config: EncoderConfig) -> EncoderBundle:
    """Seeded miniature encoder pair for desk-scale verification.

    All weights are drawn once from the config seed; identical configs yield
    bundles with identical outputs on identical inputs.
    """
    rng = np.random.default_rng(config.seed)
    dp = config.d_prime
    scale = 1.0 / np.sqrt(dp)

    def layer_stack():
        return [
            (
                rng.normal(0.0, scale, size=(dp, dp)),
                rng.normal(0.0, scale, size=(dp, dp)),
                rng.normal(0.0, scale, size=(dp, dp)),
                rng.normal(0.0, 0.1, size=dp),
            )
            for _ in range(config.layers)
        ]

    tok_emb = rng.normal(0.0, 1.0, size=(TOY_VOCAB, dp))
    pos_emb = rng.normal(0.0, 0.3, size=(TOY_CONTEXT, dp))
    text_layers = layer_stack()
    text_proj = rng.normal(0.0, scale, size=(dp, config.d))

    patch_proj = rng.normal(0.0, 1.0 / np.sqrt(PATCH_DIM), size=(PATCH_DIM, dp))
    cls_token = rng.normal(0.0, 1.0, size=(1, dp))
    img_pos_emb = rng.normal(0.0, 0.3, size=(config.M, dp))
    image_layers = layer_stack()
    projection = rng.normal(0.0, scale, size=(dp, config.d))

    def tokenize(text: str) -> list:
        return [_hash_token(t) for t in text.split()]

    def embed_tokens(tokens: list) -> np.ndarray:
        return tok_emb[np.asarray(tokens, dtype=np.intp)]

    def text_forward(tokens: list, text_prompts):
        h = tok_emb[np.asarray(tokens, dtype=np.intp)] + pos_emb[: len(tokens)]
        if text_prompts is not None:
            h = eg.concat([text_prompts[0], h], axis=0)
        n = config.n_tokens
        for layer_index, (w_token, w_pool, w_gate, bias) in enumerate(text_layers):
            if text_prompts is not None and 0 < layer_index < config.prompt_depth:
                h = eg.concat([text_prompts[layer_index], h[n:]], axis=0)
            h = _mix_layer(h, w_token, w_pool, w_gate, bias)
        pooled = eg.mean(h, axis=0, keepdims=True)
        return pooled @ text_proj

    def image_forward(image, visual_prompts):
        patches = np.asarray(image, dtype=np.float64) @ patch_proj + img_pos_emb
        if visual_prompts is not None:
            h = eg.concat([cls_token, patches, visual_prompts[0]], axis=0)
        else:
            h = eg.concat([cls_token, patches], axis=0)
        body = 1 + config.M
        for layer_index, (w_token, w_pool, w_gate, bias) in enumerate(image_layers):
            if visual_prompts is not None and 0 < layer_index < config.prompt_depth:
                h = eg.concat([h[:body], visual_prompts[layer_index]], axis=0)
            h = _mix_layer(h, w_token, w_pool, w_gate, bias)
        return h[0], h[1:body]

    return EncoderBundle(
        config=config,
        tokenize=tokenize,
        embed_tokens=embed_tokens,
        text_forward_with_prompts=text_forward,
        image_forward_with_prompts=image_forward,
        projection=projection,
        tau=TOY_TAU,
        context_length=TOY_CONTEXT,
        image_input_shape=(config.M, PATCH_DIM),
    )
