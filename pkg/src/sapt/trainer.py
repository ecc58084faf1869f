"""SGD training loop for the prompt parameters.

The recipe: SGD with momentum and weight decay over exactly the prompt
matrices and the projection bias, linear warmup followed by cosine decay,
batch-mean losses. The update rule is ``v <- mu*v + g + wd*p; p <- p - lr*v``
(classical momentum, decay added to the gradient); gradient-check tests
disable momentum and decay so they see the raw objective gradient.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import engine as eg
from .alignment import (
    build_text_features,
    description_query_features,
    fused_image_feature,
    label_space_descriptions,
    score_against_classes,
    validate_variant,
)
from .catalog import DEFAULT_TEMPLATE, PromptTemplate
from .encoder import (
    EncoderBundle,
    EncoderConfig,
    PromptParameters,
    config_hash,
    encode_image,
    init_prompt_parameters,
)
from .objective import classification_loss, text_steering_loss, total_loss, visual_steering_loss

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


class CheckpointError(ValueError):
    """Unreadable, version-mismatched, or config-mismatched checkpoint."""


@dataclass
class TrainConfig:
    """Training recipe; defaults are the published fine-tuning values."""

    epochs: int = 20
    batch_size: int = 4
    lr: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 1
    lambda1: float = 10.0
    lambda2: float = 25.0
    prompt_depth: int = 9
    seed: int = 0
    variant: str = "sap"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ValueError("epochs/batch_size/warmup_epochs out of range")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr/momentum/weight_decay must be non-negative")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda weights must be non-negative")
        validate_variant(self.variant)


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    epoch_accuracy: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)

    def final_breakdown(self) -> dict | None:
        return self.steps[-1] if self.steps else None


def lr_at(step: int, steps_per_epoch: int, config: TrainConfig) -> float:
    """Linear warmup from zero, then cosine decay to zero."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warmup_steps = config.warmup_epochs * steps_per_epoch
    total_steps = config.epochs * steps_per_epoch
    if step < warmup_steps:
        return config.lr * step / warmup_steps
    t = step - warmup_steps
    horizon = max(total_steps - warmup_steps, 1)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * t / horizon))


def _lift(params: PromptParameters) -> PromptParameters:
    return PromptParameters(
        text_prompts=[eg.Tensor(p) for p in params.text_prompts],
        visual_prompts=[eg.Tensor(p) for p in params.visual_prompts],
        proj_bias=eg.Tensor(params.proj_bias),
    )


def _leaves(params: PromptParameters) -> list:
    return list(params.text_prompts) + list(params.visual_prompts) + [params.proj_bias]


def batch_objective(
    images: list,
    label_indices: list,
    label_space: list,
    catalog,
    bundle: EncoderBundle,
    params: PromptParameters,
    config: TrainConfig,
    template: PromptTemplate,
    queries: np.ndarray,
    unprompted_text: dict,
    unprompted_globals: np.ndarray,
):
    """Forward pass for one batch; differentiable when ``params`` holds tensors."""
    text_features = build_text_features(label_space, catalog, bundle, params, config.variant, template)
    rows, prompted_globals = [], []
    for image in images:
        feats = encode_image(image, bundle, params)
        fused, _ = fused_image_feature(feats, queries, config.variant)
        rows.append(eg.stack(score_against_classes(fused, label_space, text_features, config.variant)))
        prompted_globals.append(feats.global_feature)
    score_matrix = eg.stack(rows)
    if not np.isfinite(eg.val(score_matrix)).all():
        raise FloatingPointError("non-finite alignment scores")
    l_ce = classification_loss(score_matrix, label_indices, bundle.tau)
    l_v = visual_steering_loss(eg.stack(prompted_globals), unprompted_globals)
    l_t = text_steering_loss(text_features, unprompted_text)
    return total_loss(l_ce, l_v, l_t, config.lambda1, config.lambda2)


def _predict_all(samples, label_space, catalog, bundle, params, config, template, queries):
    text_features = build_text_features(label_space, catalog, bundle, params, config.variant, template)
    correct = 0
    for sample in samples:
        feats = encode_image(sample.image, bundle, params)
        fused, _ = fused_image_feature(feats, queries, config.variant)
        scores = np.asarray(score_against_classes(fused, label_space, text_features, config.variant))
        if label_space[int(np.argmax(scores))] == sample.label:
            correct += 1
    return correct / len(samples)


def train(
    samples: list,
    catalog,
    bundle: EncoderBundle,
    config: TrainConfig,
    template: PromptTemplate = DEFAULT_TEMPLATE,
    label_space: list | None = None,
    initial_params: PromptParameters | None = None,
) -> tuple:
    """Optimize prompts on labeled samples; returns ``(params, history)``.

    Deterministic given ``config.seed`` (data order) and the bundle's config
    seed (initialization); two identical runs produce bit-identical loss
    traces.
    """
    if not samples:
        raise ValueError("training dataset is empty")
    if label_space is None:
        label_space = list(dict.fromkeys(s.label for s in samples))
    index_of = {name: i for i, name in enumerate(label_space)}
    for s in samples:
        if s.label not in index_of:
            raise ValueError(f"sample label {s.label!r} not in the training label space")

    params = (initial_params or init_prompt_parameters(bundle.config, bundle)).copy()
    velocity = [np.zeros_like(p) for p in _leaves(params)]

    union, _ = label_space_descriptions(catalog, label_space)
    queries = description_query_features(union, bundle)
    unprompted_text = build_text_features(label_space, catalog, bundle, None, config.variant, template)
    unprompted_globals = np.stack(
        [eg.val(encode_image(s.image, bundle, None).global_feature) for s in samples]
    )

    n = len(samples)
    steps_per_epoch = math.ceil(n / config.batch_size)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    logger.info("training %d parameters on %d samples", params.num_parameters(), n)

    step = 0
    for epoch in range(config.epochs):
        started = time.perf_counter()
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            lr = lr_at(step, steps_per_epoch, config)
            lifted = _lift(params)
            try:
                breakdown = batch_objective(
                    [samples[i].image for i in batch],
                    [index_of[samples[i].label] for i in batch],
                    label_space,
                    catalog,
                    bundle,
                    lifted,
                    config,
                    template,
                    queries,
                    unprompted_text,
                    unprompted_globals[batch],
                )
            except FloatingPointError as exc:
                raise NonFiniteLossError(step) from exc
            record = breakdown.as_floats()
            if not math.isfinite(record.total):
                raise NonFiniteLossError(step)
            eg.backward(breakdown.total)
            for leaf, vel, target in zip(_leaves(lifted), velocity, _leaves(params)):
                grad = leaf.grad if leaf.grad is not None else np.zeros_like(target)
                vel *= config.momentum
                vel += grad + config.weight_decay * target
                target -= lr * vel
            history.steps.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "l_ce": record.l_ce,
                    "l_steer_v": record.l_steer_v,
                    "l_steer_t": record.l_steer_t,
                    "total": record.total,
                }
            )
            step += 1
        history.epoch_accuracy.append(
            _predict_all(samples, label_space, catalog, bundle, params, config, template, queries)
        )
        history.epoch_seconds.append(time.perf_counter() - started)
    return params, history


def write_history(history: TrainHistory, path: str | Path) -> None:
    """One JSON line per step: step, epoch, lr, loss components, total."""
    with open(path, "w", encoding="utf-8") as handle:
        for record in history.steps:
            handle.write(json.dumps(record, sort_keys=True) + "\n")


# -- checkpointing -------------------------------------------------------------


def save_checkpoint(
    params: PromptParameters,
    config: TrainConfig,
    path: str | Path,
    encoder_config: EncoderConfig,
    template: PromptTemplate = DEFAULT_TEMPLATE,
) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": config_hash(encoder_config),
        "seed": config.seed,
        "train_config": asdict(config),
        "template": {
            "base_pattern": template.base_pattern,
            "description_joiner": template.description_joiner,
        },
        "text_prompts": [np.asarray(eg.val(p)).tolist() for p in params.text_prompts],
        "visual_prompts": [np.asarray(eg.val(p)).tolist() for p in params.visual_prompts],
        "proj_bias": np.asarray(eg.val(params.proj_bias)).tolist(),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class Checkpoint:
    params: PromptParameters
    train_config: TrainConfig
    template: PromptTemplate
    config_hash: str
    seed: int


def load_checkpoint(path: str | Path, encoder_config: EncoderConfig | None = None) -> Checkpoint:
    """Load a checkpoint; verifies the encoder config hash when one is given."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version!r} != {CHECKPOINT_VERSION}")
    if encoder_config is not None:
        expected = config_hash(encoder_config)
        if payload["config_hash"] != expected:
            raise CheckpointError(
                f"encoder config hash mismatch: checkpoint {payload['config_hash']} vs expected {expected}"
            )
    params = PromptParameters(
        text_prompts=[np.asarray(p, dtype=np.float64) for p in payload["text_prompts"]],
        visual_prompts=[np.asarray(p, dtype=np.float64) for p in payload["visual_prompts"]],
        proj_bias=np.asarray(payload["proj_bias"], dtype=np.float64),
    )
    return Checkpoint(
        params=params,
        train_config=TrainConfig(**payload["train_config"]),
        template=PromptTemplate(**payload["template"]),
        config_hash=payload["config_hash"],
        seed=payload["seed"],
    )
