"""Description-guided feature alignment.

Implements the scoring pipeline: parameter-free cross-attention from
description features onto image patches, relevance weighting, specificity,
global/local fusion, and the per-class alignment score (mean cosine between
the fused image feature and a class's description-guided text features).

Every operation accepts plain numpy arrays (evaluation) or autodiff tensors
(training) and follows the same math on both paths. On the numpy path,
reductions over the description axis use ``math.fsum`` so results are exactly
invariant to description order; attention itself reduces only over patches
and stays order-exact on either backend.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from math import fsum

import numpy as np

from . import engine as eg
from .catalog import DescriptionCatalog, PromptTemplate, DEFAULT_TEMPLATE, compose_class_templates, compose_ovc_templates
from .encoder import EncoderBundle, PromptParameters, encode_image, encode_text
from .kernels import cross_attention_backend

logger = logging.getLogger(__name__)

#: Tab-style ablation variants: `sap` is the full pipeline, the others
#: replace exactly one stage (text aggregation or image fusion).
VARIANTS = (
    "sap",
    "mean_text_feature",
    "aggregated_descriptions",
    "global_only",
    "global_local_avg",
    "no_text_guidance",
)


def validate_variant(name: str) -> str:
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return name


@dataclass
class AlignmentBundle:
    """Intermediate stages for one image against one label space.

    For the full pipeline ``fused_feature`` is the exact convex combination
    ``(1 - alpha) * global + alpha * mean_description_feature``; fusion
    variants override it (e.g. ``global_only`` stores the prompted global
    feature itself). When the label space carries no descriptions the
    attention stages are empty and ``alpha`` is 0.
    """

    attention_weights: np.ndarray
    description_image_features: np.ndarray
    relevance: np.ndarray
    alpha: float
    mean_description_feature: np.ndarray
    fused_feature: np.ndarray


# -- core operations ---------------------------------------------------------


def cross_attention(queries, keys, values):
    """Row-softmax(Q Kᵀ / √d) · V with no learned parameters.

    Returns ``(features (N, d), weights (N, M))``; each weight row lies on
    the simplex.
    """
    if eg.val(queries).shape[-1] != eg.val(keys).shape[-1]:
        raise ValueError("queries and keys must share the feature dimension")
    if eg.val(keys).shape != eg.val(values).shape:
        raise ValueError("keys and values must have identical shapes")
    if eg.is_tensor(queries) or eg.is_tensor(keys) or eg.is_tensor(values):
        d = eg.val(queries).shape[-1]
        logits = (queries @ keys.T) / np.sqrt(d)
        weights = eg.softmax(logits, axis=-1)
        return weights @ values, weights
    return cross_attention_backend()(np.asarray(queries, dtype=np.float64),
                                     np.asarray(keys, dtype=np.float64),
                                     np.asarray(values, dtype=np.float64))


def relevance_scores(description_features, global_feature):
    """Softmax over description-to-image similarities; sums to one."""
    n = eg.val(description_features).shape[0]
    if n == 0:
        raise ValueError("relevance_scores requires at least one description")
    if eg.is_tensor(description_features) or eg.is_tensor(global_feature):
        return eg.softmax(description_features @ global_feature, axis=-1)
    rows = np.asarray(description_features, dtype=np.float64)
    g = np.asarray(global_feature, dtype=np.float64)
    # per-row dots keep each entry independent of row order (exact
    # description-permutation invariance)
    dots = np.array([np.dot(row, g) for row in rows])
    shifted = np.exp(dots - dots.max())
    return shifted / fsum(shifted)


def mean_description_feature(description_image_features, relevance):
    """Relevance-weighted combination of the description image features."""
    feats_v = eg.val(description_image_features)
    if feats_v.shape[0] != eg.val(relevance).shape[0]:
        raise ValueError("relevance length must match the number of description features")
    if eg.is_tensor(description_image_features) or eg.is_tensor(relevance):
        return description_image_features.T @ relevance
    weighted = feats_v * np.asarray(relevance)[:, None]
    return np.array([fsum(weighted[:, c]) for c in range(feats_v.shape[1])])


def specificity_alpha(attention_weights):
    """Mean over descriptions of the per-description max patch weight."""
    w = eg.val(attention_weights)
    if w.size == 0:
        raise ValueError("specificity_alpha requires non-empty attention weights")
    if eg.is_tensor(attention_weights):
        return eg.mean(eg.max(attention_weights, axis=1))
    return fsum(w.max(axis=1)) / w.shape[0]


def fuse_features(global_feature, mean_desc, alpha, renormalize=True):
    """Convex combination of global and mean description features.

    ``renormalize`` rescales to unit norm for cosine use; scores are
    unaffected either way since the alignment score is scale invariant.
    """
    alpha_v = float(eg.val(alpha))
    if not 0.0 <= alpha_v <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha_v}")
    fused = (1.0 - alpha) * global_feature + alpha * mean_desc
    if renormalize:
        return eg.l2_normalize(fused, axis=-1)
    return fused


def cosine(u, v):
    """Cosine similarity; callers guarantee non-zero operands."""
    dot = eg.sum(u * v)
    return dot / (eg.sqrt(eg.sum(u * u)) * eg.sqrt(eg.sum(v * v)))


def alignment_score(fused, description_text_features):
    """Mean cosine between the fused feature and each text feature row."""
    rows = description_text_features
    k = eg.val(rows).shape[0]
    if k == 0:
        raise ValueError("alignment_score requires at least one text feature row")
    if eg.is_tensor(fused) or eg.is_tensor(rows):
        sims = [cosine(fused, rows[a]) for a in range(k)]
        total = sims[0]
        for s in sims[1:]:
            total = total + s
        return total / float(k)
    fused_v = np.asarray(fused, dtype=np.float64)
    rows_v = np.asarray(rows, dtype=np.float64)
    fused_norm = np.sqrt(np.dot(fused_v, fused_v))
    sims = [np.dot(row, fused_v) / (fused_norm * np.sqrt(np.dot(row, row))) for row in rows_v]
    return fsum(sims) / k


# -- label-space assembly ----------------------------------------------------


def label_space_descriptions(catalog: DescriptionCatalog, label_space: list) -> tuple[list, dict]:
    """Union of descriptions over ``label_space`` plus per-class indices.

    Order is first occurrence scanning the label space; classes missing from
    the catalog contribute nothing.
    """
    union: list[str] = []
    position: dict[str, int] = {}
    per_class: dict[str, list[int]] = {}
    for name in label_space:
        indices = []
        for text in catalog.descriptions_for(name):
            if text not in position:
                position[text] = len(union)
                union.append(text)
            indices.append(position[text])
        per_class[name] = indices
    return union, per_class


def class_template_strings(
    class_name: str,
    catalog: DescriptionCatalog,
    variant: str = "sap",
    template: PromptTemplate = DEFAULT_TEMPLATE,
    ovc: bool = False,
) -> list:
    """Template strings whose encodings form a class's text features."""
    descriptions = list(catalog.descriptions_for(class_name))
    if variant == "no_text_guidance":
        descriptions = []
    elif variant == "aggregated_descriptions" and descriptions:
        if ovc:
            base = compose_ovc_templates([], template)[0]
        else:
            base = compose_class_templates(class_name, [], template)[0]
        joined = "".join(template.description_joiner.replace("{description}", d) for d in descriptions)
        return [base + joined]
    if ovc:
        return compose_ovc_templates(descriptions, template)
    return compose_class_templates(class_name, descriptions, template)


def build_text_features(
    label_space: list,
    catalog: DescriptionCatalog,
    bundle: EncoderBundle,
    prompts: PromptParameters | None,
    variant: str = "sap",
    template: PromptTemplate = DEFAULT_TEMPLATE,
    ovc: bool = False,
) -> dict:
    """Per-class description-guided text feature matrices ``(k_y, d)``."""
    features = {}
    for name in label_space:
        if name in features:
            continue
        strings = class_template_strings(name, catalog, variant, template, ovc)
        features[name] = encode_text(strings, bundle, prompts)
    return features


def description_query_features(
    union_descriptions: list,
    bundle: EncoderBundle,
) -> np.ndarray:
    """Unprompted encodings of the raw description strings (the queries)."""
    if not union_descriptions:
        return np.zeros((0, bundle.config.d))
    return encode_text(list(union_descriptions), bundle, None)


def fused_image_feature(image_features, queries, variant: str = "sap"):
    """Image-side pipeline: attention, relevance, specificity, fusion.

    Returns ``(fused_for_scoring, AlignmentBundle)``. The bundle's
    ``fused_feature`` is kept pre-normalization so the convex-combination
    identity is assertable; the returned vector is renormalized.
    """
    global_feature = image_features.global_feature
    locals_ = image_features.local_features
    n = eg.val(queries).shape[0]
    d = eg.val(global_feature).shape[0]
    m = eg.val(locals_).shape[0]

    if n == 0:
        if variant not in ("no_text_guidance", "global_only"):
            logger.warning("label space has no descriptions; falling back to the global feature")
        bundle = AlignmentBundle(
            attention_weights=np.zeros((0, m)),
            description_image_features=np.zeros((0, d)),
            relevance=np.zeros(0),
            alpha=0.0,
            mean_description_feature=np.zeros(d),
            fused_feature=global_feature,
        )
        return eg.l2_normalize(global_feature, axis=-1), bundle

    desc_feats, weights = cross_attention(queries, locals_, locals_)
    relevance = relevance_scores(queries, global_feature)
    mean_desc = mean_description_feature(desc_feats, relevance)
    alpha = specificity_alpha(weights)
    fused_exact = (1.0 - alpha) * global_feature + alpha * mean_desc

    if variant == "global_only":
        fused_for_scoring = eg.l2_normalize(global_feature, axis=-1)
        stored = global_feature
    elif variant == "global_local_avg":
        patch_mean = eg.mean(locals_, axis=0)
        stored = 0.5 * global_feature + 0.5 * patch_mean
        fused_for_scoring = eg.l2_normalize(stored, axis=-1)
    else:
        stored = fused_exact
        fused_for_scoring = eg.l2_normalize(fused_exact, axis=-1)

    bundle = AlignmentBundle(
        attention_weights=weights,
        description_image_features=desc_feats,
        relevance=relevance,
        alpha=alpha,
        mean_description_feature=mean_desc,
        fused_feature=stored,
    )
    return fused_for_scoring, bundle


def score_against_classes(fused, label_space: list, text_features: dict, variant: str):
    """Per-class alignment scores for one fused image feature."""
    scores = []
    for name in label_space:
        rows = text_features[name]
        if variant == "mean_text_feature":
            scores.append(cosine(fused, eg.mean(rows, axis=0)))
        else:
            scores.append(alignment_score(fused, rows))
    return scores


def class_alignments(
    image,
    label_space: list,
    catalog: DescriptionCatalog,
    bundle: EncoderBundle,
    prompts: PromptParameters | None,
    variant: str = "sap",
    template: PromptTemplate = DEFAULT_TEMPLATE,
    ovc: bool = False,
    queries: np.ndarray | None = None,
    text_features: dict | None = None,
):
    """Full per-image pipeline: returns ``(scores over label_space, AlignmentBundle)``.

    ``queries`` (unprompted union description features) and ``text_features``
    (prompted per-class matrices) can be supplied to share work across calls;
    both are recomputed when omitted.
    """
    if not label_space:
        raise ValueError("label_space must be non-empty")
    validate_variant(variant)
    if queries is None:
        union, _ = label_space_descriptions(catalog, label_space)
        queries = description_query_features(union, bundle)
    if text_features is None:
        text_features = build_text_features(label_space, catalog, bundle, prompts, variant, template, ovc)
    feats = encode_image(image, bundle, prompts)
    fused, alignment_bundle = fused_image_feature(feats, queries, variant)
    scores = score_against_classes(fused, label_space, text_features, variant)
    if any(eg.is_tensor(s) for s in scores):
        return eg.stack(scores), alignment_bundle
    return np.asarray(scores, dtype=np.float64), alignment_bundle
