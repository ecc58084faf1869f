"""Run configuration: JSON config file, preset, and ``--set`` overrides.

Resolution order is file values, then preset adjustments, then explicit
``--set key=value`` overrides (applied last, in the order given). The
resolved mapping is canonicalized (sorted keys) and hashed; every artifact a
run produces embeds that hash so results trace back to an exact
configuration.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .catalog import PromptTemplate
from .datasets import TOY_TRAIN_SCALING
from .encoder import EncoderConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Malformed config file, unknown key, or unparsable override."""


DEFAULTS = {
    "preset": None,
    "dataset": {
        "manifest": None,
        "test_manifest": None,
        "catalog": None,
        "train_per_class": 16,
        "test_per_class": 8,
        "noise": 0.25,
    },
    "encoder": {
        "d": 16,
        "d_prime": 12,
        "M": 9,
        "n_tokens": 4,
        "prompt_depth": None,
        "layers": 2,
        "seed": 0,
    },
    "train": {
        "epochs": 20,
        "batch_size": 4,
        "lr": 0.0025,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "warmup_epochs": 1,
        "lambda1": 10.0,
        "lambda2": 25.0,
        "prompt_depth": None,
        "seed": 0,
        "variant": "sap",
    },
    "eval": {
        "protocol": "b2n",
        "k_shots": 16,
        "workers": 1,
        "split_file": None,
        "seed": 0,
    },
    "template": {
        "base_pattern": "a photo of a {class}",
        "description_joiner": ", which {description}",
    },
    "llm": {
        "endpoint": None,
        "model": None,
    },
}

#: recipe depths by protocol: shallow prompts transfer better across datasets
PROMPT_DEPTH_BY_PROTOCOL = {"xdataset": 3}
PROMPT_DEPTH_DEFAULT = 9


def _deep_update(target: dict, patch: dict, path: str = "") -> None:
    for key, value in patch.items():
        where = f"{path}.{key}" if path else key
        if key not in target:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(target[key], dict) and isinstance(value, dict):
            _deep_update(target[key], value, where)
        else:
            target[key] = value


def _parse_override(item: str) -> tuple:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _apply_override(config: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = config
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    node[parts[-1]] = value


@dataclass
class RunConfig:
    """Fully resolved configuration plus its canonical hash."""

    values: dict
    config_hash: str

    @property
    def protocol(self) -> str:
        return self.values["eval"]["protocol"]

    def encoder_config(self) -> EncoderConfig:
        enc = dict(self.values["encoder"])
        if enc["prompt_depth"] is None:
            enc["prompt_depth"] = min(self.train_prompt_depth(), enc["layers"])
        return EncoderConfig(**enc)

    def train_prompt_depth(self) -> int:
        depth = self.values["train"]["prompt_depth"]
        if depth is None:
            depth = PROMPT_DEPTH_BY_PROTOCOL.get(self.protocol, PROMPT_DEPTH_DEFAULT)
        return depth

    def train_config(self) -> TrainConfig:
        raw = dict(self.values["train"])
        raw["prompt_depth"] = self.train_prompt_depth()
        return TrainConfig(**raw)

    def template(self) -> PromptTemplate:
        return PromptTemplate(**self.values["template"])


def resolve_config(
    config_path: str | Path | None = None,
    sets: list | None = None,
    preset: str | None = None,
    seed: int | None = None,
    variant: str | None = None,
    protocol: str | None = None,
    workers: int | None = None,
) -> RunConfig:
    """Merge defaults, file, preset, and overrides into a hashed RunConfig."""
    values = copy.deepcopy(DEFAULTS)
    if config_path is not None:
        try:
            file_values = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config file {config_path}: {exc}") from exc
        if not isinstance(file_values, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object")
        _deep_update(values, file_values)
    if preset is not None:
        if preset != "toy":
            raise ConfigError(f"unknown preset {preset!r}; only 'toy' is bundled")
        values["preset"] = "toy"
        values["encoder"].update({"d": 16, "d_prime": 12, "M": 9, "layers": 2, "prompt_depth": 2})
        values["train"].update(TOY_TRAIN_SCALING)
    for item in sets or []:
        key, value = _parse_override(item)
        _apply_override(values, key, value)
    if seed is not None:
        values["encoder"]["seed"] = seed
        values["train"]["seed"] = seed
        values["eval"]["seed"] = seed
    if variant is not None:
        values["train"]["variant"] = variant
    if protocol is not None:
        values["eval"]["protocol"] = protocol
    if workers is not None:
        values["eval"]["workers"] = workers
    canonical = json.dumps(values, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(canonical.encode("utf-8")).hexdigest()
    return RunConfig(values=values, config_hash=digest)
