"""Evaluation protocols: base-to-novel, generalized zero-shot,
out-of-vocabulary, cross-dataset, and few-shot.

All protocols share one scoring engine: encode the image once, score it
against a label space, take the argmax (ties break to the lowest label-space
index). Accuracies are micro-averaged over images and reported as
percentages. Reports are timestamp-free JSON, so identical inputs produce
byte-identical files.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import (
    build_text_features,
    class_template_strings,
    description_query_features,
    fused_image_feature,
    label_space_descriptions,
    score_against_classes,
    validate_variant,
)
from .catalog import DEFAULT_TEMPLATE, DescriptionCatalog, PromptTemplate, catalog_hash
from .datasets import DatasetManifest, sample_k_shot  # noqa: F401  (sample_k_shot is part of this surface)
from .encoder import EncoderBundle, PromptParameters, encode_image

logger = logging.getLogger(__name__)

PROTOCOLS = ("gzs", "b2n", "ovc", "xdataset", "fewshot")


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint base/novel halves of a label space plus shot count."""

    base_classes: tuple
    novel_classes: tuple
    k_shots: int = 16
    seed: int = 0

    def __post_init__(self):
        if set(self.base_classes) & set(self.novel_classes):
            raise ValueError("base and novel classes overlap")


@dataclass
class EvalReport:
    protocol: str
    metrics: dict
    counts: dict
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "protocol": self.protocol,
            "metrics": self.metrics,
            "counts": self.counts,
            "metadata": self.metadata,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def save_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(report.to_json(), encoding="utf-8")


def harmonic_mean(a: float, b: float) -> float:
    """2ab/(a+b) on percentages; zero when both operands vanish."""
    if a < 0 or b < 0:
        raise ValueError("harmonic_mean expects non-negative inputs")
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


def split_base_novel(label_space: list, seed: int = 0) -> SplitSpec:
    """First ⌈|Y|/2⌉ classes (dataset-canonical order) become the base half.

    The seed is recorded for report metadata but does not influence the
    split; published splits can be injected via :func:`load_split_file`.
    """
    if len(label_space) < 2:
        raise ValueError("need at least 2 classes to split")
    cut = math.ceil(len(label_space) / 2)
    return SplitSpec(base_classes=tuple(label_space[:cut]), novel_classes=tuple(label_space[cut:]), seed=seed)


def load_split_file(path: str | Path, label_space: list, seed: int = 0, k_shots: int = 16) -> SplitSpec:
    """Explicit override: JSON ``{"base": [...], "novel": [...]}``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    base, novel = list(data["base"]), list(data["novel"])
    if set(base) | set(novel) != set(label_space):
        raise ValueError("split file does not cover the label space exactly")
    return SplitSpec(base_classes=tuple(base), novel_classes=tuple(novel), seed=seed, k_shots=k_shots)


@dataclass
class EvalContext:
    """Frozen model snapshot plus caches shared across one evaluation run."""

    catalog: DescriptionCatalog
    bundle: EncoderBundle
    params: PromptParameters | None
    variant: str = "sap"
    template: PromptTemplate = DEFAULT_TEMPLATE
    workers: int = 1
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        validate_variant(self.variant)
        self._queries = {}
        self._text_features = {}

    def queries_for(self, label_space: tuple) -> np.ndarray:
        if label_space not in self._queries:
            union, _ = label_space_descriptions(self.catalog, list(label_space))
            self._queries[label_space] = description_query_features(union, self.bundle)
        return self._queries[label_space]

    def text_features_for(self, label_space: tuple, ovc: bool) -> dict:
        key = (label_space, ovc)
        if key not in self._text_features:
            self._text_features[key] = build_text_features(
                list(label_space), self.catalog, self.bundle, self.params, self.variant, self.template, ovc
            )
        return self._text_features[key]


def _score_sample(image, label_space, ctx: EvalContext, ovc: bool) -> np.ndarray:
    queries = ctx.queries_for(tuple(label_space))
    text_features = ctx.text_features_for(tuple(label_space), ovc)
    feats = encode_image(image, ctx.bundle, ctx.params)
    fused, _ = fused_image_feature(feats, queries, ctx.variant)
    return np.asarray(score_against_classes(fused, list(label_space), text_features, ctx.variant))


def predict_class(image, label_space: list, catalog, bundle, prompts, variant: str = "sap",
                  template: PromptTemplate = DEFAULT_TEMPLATE) -> str:
    """Highest-alignment class; ties break to the lowest label-space index."""
    if not label_space:
        raise ValueError("label_space must be non-empty")
    ctx = EvalContext(catalog=catalog, bundle=bundle, params=prompts, variant=variant, template=template)
    scores = _score_sample(image, label_space, ctx, ovc=False)
    return label_space[int(np.argmax(scores))]


def _tally(samples, label_space, ctx: EvalContext, ovc: bool = False) -> dict:
    """Per-class correct/total over ``samples`` classified in ``label_space``."""
    if not samples:
        raise ValueError("empty test set")
    label_space = list(label_space)
    # resolve shared caches before fanning out
    ctx.queries_for(tuple(label_space))
    ctx.text_features_for(tuple(label_space), ovc)

    def judge(sample):
        scores = _score_sample(sample.image, label_space, ctx, ovc)
        return label_space[int(np.argmax(scores))] == sample.label

    if ctx.workers > 1:
        with ThreadPoolExecutor(max_workers=ctx.workers) as pool:
            verdicts = list(pool.map(judge, samples))
    else:
        verdicts = [judge(s) for s in samples]

    counts: dict[str, dict] = {}
    for sample, ok in zip(samples, verdicts):
        slot = counts.setdefault(sample.label, {"correct": 0, "total": 0})
        slot["total"] += 1
        slot["correct"] += int(ok)
    return counts


def _accuracy(counts: dict, classes=None) -> float:
    names = counts if classes is None else [c for c in classes if c in counts]
    total = sum(counts[c]["total"] for c in names)
    correct = sum(counts[c]["correct"] for c in names)
    return 100.0 * correct / total if total else 0.0


def _base_metadata(ctx: EvalContext, split: SplitSpec | None) -> dict:
    meta = {
        "catalog_hash": catalog_hash(ctx.catalog),
        "variant": ctx.variant,
        "accuracy_averaging": "micro",
    }
    if split is not None:
        meta["split_seed"] = split.seed
        meta["k_shots"] = split.k_shots
    meta.update(ctx.metadata)
    return meta


def evaluate_b2n(test_set: DatasetManifest, split: SplitSpec, ctx: EvalContext) -> EvalReport:
    """Base accuracy with base-only labels, novel accuracy with novel-only."""
    base, novel = list(split.base_classes), list(split.novel_classes)
    base_counts = _tally([s for s in test_set.samples if s.label in set(base)], base, ctx)
    novel_counts = _tally([s for s in test_set.samples if s.label in set(novel)], novel, ctx) if novel else {}
    base_acc = _accuracy(base_counts)
    novel_acc = _accuracy(novel_counts) if novel else 0.0
    metrics = {"Base": base_acc, "Novel": novel_acc, "HM": harmonic_mean(base_acc, novel_acc)}
    counts = {"base": base_counts, "novel": novel_counts}
    return EvalReport("b2n", metrics, counts, _base_metadata(ctx, split))


def evaluate_gzs(test_set: DatasetManifest, split: SplitSpec, ctx: EvalContext) -> EvalReport:
    """One pass against base ∪ novel; per-origin accuracies plus gHM."""
    joint = list(split.base_classes) + list(split.novel_classes)
    samples = [s for s in test_set.samples if s.label in set(joint)]
    counts = _tally(samples, joint, ctx)
    g_base = _accuracy(counts, split.base_classes)
    g_novel = _accuracy(counts, split.novel_classes)
    metrics = {"gBase": g_base, "gNovel": g_novel, "gHM": harmonic_mean(g_base, g_novel)}
    return EvalReport("gzs", metrics, {"joint": counts}, _base_metadata(ctx, split))


def evaluate_ovc(test_set: DatasetManifest, split: SplitSpec, ctx: EvalContext) -> EvalReport:
    """B2N with class names replaced by ``object`` in every template."""
    base, novel = list(split.base_classes), list(split.novel_classes)
    base_counts = _tally([s for s in test_set.samples if s.label in set(base)], base, ctx, ovc=True)
    novel_counts = _tally([s for s in test_set.samples if s.label in set(novel)], novel, ctx, ovc=True) if novel else {}
    base_acc = _accuracy(base_counts)
    novel_acc = _accuracy(novel_counts) if novel else 0.0
    metrics = {"Base": base_acc, "Novel": novel_acc, "HM": harmonic_mean(base_acc, novel_acc)}

    metadata = _base_metadata(ctx, split)
    degenerate = [c for c in base + novel if not ctx.catalog.descriptions_for(c)]
    if degenerate:
        metadata["degenerate_classes"] = sorted(degenerate)
        logger.warning("OVC: classes without descriptions score with the bare object template: %s", degenerate)
    all_clashes = []
    for group in (base, novel):
        rendered = {}
        for name in group:
            key = tuple(class_template_strings(name, ctx.catalog, ctx.variant, ctx.template, ovc=True))
            rendered.setdefault(key, []).append(name)
        all_clashes.extend(sorted(tuple(v) for v in rendered.values() if len(v) > 1))
    if all_clashes:
        metadata["indistinguishable_classes"] = [list(c) for c in all_clashes]
        logger.warning("OVC: classes share identical description templates: %s", all_clashes)
    return EvalReport("ovc", metrics, {"base": base_counts, "novel": novel_counts}, metadata)


def evaluate_cross_dataset(test_set: DatasetManifest, ctx: EvalContext) -> EvalReport:
    """Accuracy over the full target label space with a source-trained model."""
    label_space = list(test_set.classes)
    missing = [c for c in label_space if not ctx.catalog.descriptions_for(c)]
    if missing:
        logger.warning("target classes missing from catalog (plain-template fallback): %s", missing)
    counts = _tally(test_set.samples, label_space, ctx)
    metrics = {"accuracy": _accuracy(counts)}
    metadata = _base_metadata(ctx, None)
    metadata["target_dataset"] = test_set.dataset_id
    if missing:
        metadata["classes_without_descriptions"] = missing
    return EvalReport("xdataset", metrics, {"all": counts}, metadata)


def evaluate_fewshot(test_set: DatasetManifest, classes: list, ctx: EvalContext) -> EvalReport:
    """Full-label-space accuracy (base := all classes, no novel half)."""
    counts = _tally([s for s in test_set.samples if s.label in set(classes)], list(classes), ctx)
    metrics = {"accuracy": _accuracy(counts)}
    return EvalReport("fewshot", metrics, {"all": counts}, _base_metadata(ctx, None))
