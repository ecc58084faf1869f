"""Dataset manifests, k-shot sampling, and the seeded toy dataset.

Manifest files are JSON: ``{"dataset": id, "classes": [...], "split":
"train"|"test", "samples": [{"payload"|"path": ..., "label": ...}, ...]}``.
Toy samples embed their pixel payload directly; file-backed samples point at
``.npy`` arrays resolved relative to the manifest.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .catalog import DescriptionCatalog, build_catalog
from .encoder import PATCH_DIM, EncoderConfig


class ManifestError(ValueError):
    """Malformed dataset manifest."""


@dataclass
class Sample:
    image: np.ndarray
    label: str


@dataclass
class DatasetManifest:
    dataset_id: str
    classes: list
    samples: list = field(default_factory=list)
    split: str = "train"

    def by_class(self) -> dict:
        grouped: dict[str, list[Sample]] = {name: [] for name in self.classes}
        for sample in self.samples:
            grouped.setdefault(sample.label, []).append(sample)
        return grouped


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed manifest JSON in {path}: {exc}") from exc
    for key in ("dataset", "classes", "samples"):
        if key not in data:
            raise ManifestError(f"manifest {path} missing key {key!r}")
    classes = list(data["classes"])
    samples = []
    for record in data["samples"]:
        if "label" not in record:
            raise ManifestError(f"manifest {path}: sample without label")
        if record["label"] not in set(classes):
            raise ManifestError(f"manifest {path}: label {record['label']!r} not in classes")
        if "payload" in record:
            image = np.asarray(record["payload"], dtype=np.float64)
        elif "path" in record:
            image = np.load(path.parent / record["path"]).astype(np.float64)
        else:
            raise ManifestError(f"manifest {path}: sample needs 'payload' or 'path'")
        samples.append(Sample(image=image, label=record["label"]))
    return DatasetManifest(
        dataset_id=str(data["dataset"]),
        classes=classes,
        samples=samples,
        split=str(data.get("split", "train")),
    )


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    payload = {
        "dataset": manifest.dataset_id,
        "classes": list(manifest.classes),
        "split": manifest.split,
        "samples": [
            {"label": s.label, "payload": np.asarray(s.image).tolist()} for s in manifest.samples
        ],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")


def sample_k_shot(manifest: DatasetManifest, classes: list, k: int, seed: int) -> list:
    """Per class, ``min(k, available)`` samples drawn uniformly without
    replacement; deterministic in ``seed``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    grouped = manifest.by_class()
    rng = np.random.default_rng(seed)
    chosen: list[Sample] = []
    for name in classes:
        pool = grouped.get(name, [])
        if not pool:
            raise ValueError(f"class {name!r} has no samples in the dataset")
        take = min(k, len(pool))
        indices = rng.choice(len(pool), size=take, replace=False)
        chosen.extend(pool[i] for i in sorted(indices))
    return chosen


# -- toy dataset ---------------------------------------------------------------

TOY_CLASS_DESCRIPTIONS = {
    "ruby beetle": ["has a glossy red shell", "shows six thin legs"],
    "azure finch": ["has bright blue feathers", "shows a short pointed beak"],
    "golden snail": ["has a spiral amber shell", "leaves a shiny trail"],
    "ivory fox": ["has thick white fur", "shows a long bushy tail"],
    "violet moth": ["has wide purple wings", "shows feathered antennae"],
    "amber crab": ["has a hard orange carapace", "shows two large claws"],
}

TOY_DATASET_ID = "toy6"

#: Training-recipe scaling for the toy preset. The published learning rate
#: and steering weights presume a pretrained backbone with real zero-shot
#: competence; the toy backbone has none, so the preset raises the learning
#: rate and scales both steering weights down (ratio preserved).
TOY_TRAIN_SCALING = {"lr": 0.05, "lambda1": 0.1, "lambda2": 0.25, "epochs": 20}


def toy_encoder_config(seed: int = 0, prompt_depth: int = 2) -> EncoderConfig:
    return EncoderConfig(d=16, d_prime=12, M=9, n_tokens=4, prompt_depth=prompt_depth, layers=2, seed=seed)


def toy_catalog(classes: list | None = None) -> DescriptionCatalog:
    names = list(classes) if classes is not None else list(TOY_CLASS_DESCRIPTIONS)
    return build_catalog(TOY_DATASET_ID, {name: TOY_CLASS_DESCRIPTIONS[name] for name in names})


def generate_toy_dataset(
    seed: int = 0,
    classes: list | None = None,
    train_per_class: int = 16,
    test_per_class: int = 8,
    M: int = 9,
    noise: float = 0.25,
    bundle=None,
    catalog: DescriptionCatalog | None = None,
    margin: float = 0.02,
    max_candidates: int = 400,
) -> tuple:
    """Separable synthetic image pairs: one fixed pattern per class plus noise.

    Patterns are drawn once from ``seed`` so the task is identical across
    runs. With an encoder ``bundle``, each class pattern is additionally
    searched (seeded accept/reject) until its image feature aligns best with
    the class's own description templates under the frozen encoder — the toy
    images then visually encode their descriptions, so description-only
    classification beats chance even before prompt tuning.
    """
    names = list(classes) if classes is not None else list(TOY_CLASS_DESCRIPTIONS)
    rng = np.random.default_rng(seed)

    if bundle is None:
        patterns = {name: rng.normal(size=(M, PATCH_DIM)) for name in names}
    else:
        patterns = _search_description_encoding_patterns(
            rng, names, bundle, catalog or toy_catalog(names), margin, max_candidates
        )

    def draw(count, split):
        samples = []
        for name in names:
            for _ in range(count):
                samples.append(Sample(image=patterns[name] + noise * rng.normal(size=(M, PATCH_DIM)), label=name))
        return DatasetManifest(dataset_id=TOY_DATASET_ID, classes=names, samples=samples, split=split)

    return draw(train_per_class, "train"), draw(test_per_class, "test")


def _search_description_encoding_patterns(rng, names, bundle, catalog, margin, max_candidates):
    """Per class, draw patterns until the frozen encoder scores the class's
    own object-form description templates highest (by ``margin``)."""
    from .alignment import alignment_score, build_text_features, description_query_features, fused_image_feature, label_space_descriptions
    from .encoder import encode_image

    M = bundle.config.M
    union, _ = label_space_descriptions(catalog, names)
    queries = description_query_features(union, bundle)
    text_features = build_text_features(names, catalog, bundle, None, "sap", ovc=True)

    def scores_for(pattern):
        fused, _ = fused_image_feature(encode_image(pattern, bundle, None), queries, "sap")
        return {name: alignment_score(fused, text_features[name]) for name in names}

    def gap_of(scores, own):
        return scores[own] - max(scores[other] for other in names if other != own)

    patterns = {}
    for own in names:
        best, best_gap = None, -np.inf
        for _ in range(max_candidates):
            candidate = rng.normal(size=(M, PATCH_DIM))
            gap = gap_of(scores_for(candidate), own)
            if gap > best_gap:
                best, best_gap = candidate, gap
            if gap >= margin:
                break
        # local hill climb on the best draw until the margin holds
        step = 0.5
        for _ in range(max_candidates):
            if best_gap >= margin:
                break
            candidate = best + step * rng.normal(size=(M, PATCH_DIM))
            gap = gap_of(scores_for(candidate), own)
            if gap > best_gap:
                best, best_gap = candidate, gap
            else:
                step = max(0.9 * step, 0.05)
        if best_gap < margin:
            logging.getLogger(__name__).warning(
                "pattern search for %r stopped at margin %.4f < %.4f", own, best_gap, margin
            )
        patterns[own] = best
    return patterns
