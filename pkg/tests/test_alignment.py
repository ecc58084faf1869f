"""Oracle and invariant tests for the alignment math.

The brute-force oracles here are deliberately naive (explicit python loops,
no shared code with the implementation) so they stay independent of the
paths they check.
"""

import math

import numpy as np
import pytest

from sapt import engine as eg
from sapt.alignment import (
    AlignmentBundle,
    alignment_score,
    build_text_features,
    class_alignments,
    class_template_strings,
    cosine,
    cross_attention,
    description_query_features,
    fuse_features,
    fused_image_feature,
    label_space_descriptions,
    mean_description_feature,
    relevance_scores,
    specificity_alpha,
    validate_variant,
)
from sapt.catalog import build_catalog
from sapt.encoder import EncoderConfig, PATCH_DIM, build_toy_encoder, encode_image, init_prompt_parameters
from sapt.kernels import cross_attention_numba, cross_attention_numpy, numba_enabled


# -- brute-force oracles ------------------------------------------------------


def oracle_cross_attention(queries, keys, values):
    n, d = queries.shape
    m = keys.shape[0]
    feats = np.zeros((n, d))
    weights = np.zeros((n, m))
    for i in range(n):
        logits = []
        for j in range(m):
            logits.append(sum(queries[i, c] * keys[j, c] for c in range(d)) / math.sqrt(d))
        exps = [math.exp(z - max(logits)) for z in logits]
        total = sum(exps)
        for j in range(m):
            weights[i, j] = exps[j] / total
        for c in range(d):
            feats[i, c] = sum(weights[i, j] * values[j, c] for j in range(m))
    return feats, weights


def oracle_mean_feature(rows, r):
    d = rows.shape[1]
    out = np.zeros(d)
    for c in range(d):
        out[c] = sum(r[i] * rows[i, c] for i in range(len(r)))
    return out


def oracle_alignment_score(fused, rows):
    sims = []
    for row in rows:
        nf = math.sqrt(sum(x * x for x in fused))
        nr = math.sqrt(sum(x * x for x in row))
        sims.append(sum(a * b for a, b in zip(fused, row)) / (nf * nr))
    return sum(sims) / len(sims)


def random_unit_rows(rng, n, d):
    rows = rng.normal(size=(n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


# -- cross_attention -----------------------------------------------------------


def test_cross_attention_singleton_patch():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(3, 4))
    kv = rng.normal(size=(1, 4))
    feats, weights = cross_attention(q, kv, kv)
    np.testing.assert_allclose(weights, 1.0)
    for i in range(3):
        np.testing.assert_allclose(feats[i], kv[0])


def test_cross_attention_identical_keys_uniform():
    rng = np.random.default_rng(1)
    q = rng.normal(size=(2, 5))
    key = rng.normal(size=5)
    keys = np.tile(key, (4, 1))
    values = rng.normal(size=(4, 5))
    feats, weights = cross_attention(q, keys, values)
    np.testing.assert_allclose(weights, 0.25, atol=1e-12)
    np.testing.assert_allclose(feats, np.tile(values.mean(axis=0), (2, 1)), atol=1e-12)


def test_cross_attention_matches_oracle_seeded():
    rng = np.random.default_rng(42)
    q = rng.normal(size=(2, 3))
    k = rng.normal(size=(4, 3))
    v = rng.normal(size=(4, 3))
    feats, weights = cross_attention(q, k, v)
    ofeats, oweights = oracle_cross_attention(q, k, v)
    assert np.abs(feats - ofeats).max() < 1e-10
    assert np.abs(weights - oweights).max() < 1e-10


@pytest.mark.parametrize("backend_name", ["numpy", "numba"])
def test_cross_attention_backends_match_oracle(backend_name):
    if backend_name == "numba" and not numba_enabled():
        pytest.skip("numba disabled")
    backend = cross_attention_numpy if backend_name == "numpy" else cross_attention_numba
    rng = np.random.default_rng(7)
    for _ in range(25):
        n, m, d = rng.integers(1, 9), rng.integers(1, 17), rng.integers(1, 33)
        q, k, v = rng.normal(size=(n, d)), rng.normal(size=(m, d)), rng.normal(size=(m, d))
        feats, weights = backend(q, k, v)
        ofeats, oweights = oracle_cross_attention(q, k, v)
        assert np.abs(feats - ofeats).max() < 1e-10
        assert np.abs(weights - oweights).max() < 1e-10
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-9)


def test_cross_attention_shape_errors():
    with pytest.raises(ValueError):
        cross_attention(np.ones((2, 3)), np.ones((4, 5)), np.ones((4, 5)))
    with pytest.raises(ValueError):
        cross_attention(np.ones((2, 3)), np.ones((4, 3)), np.ones((5, 3)))


def test_cross_attention_tensor_path_matches_numpy():
    rng = np.random.default_rng(3)
    q, k, v = rng.normal(size=(3, 6)), rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    feats, weights = cross_attention(q, k, v)
    tfeats, tweights = cross_attention(eg.Tensor(q), eg.Tensor(k), eg.Tensor(v))
    np.testing.assert_allclose(eg.val(tfeats), feats, atol=1e-12)
    np.testing.assert_allclose(eg.val(tweights), weights, atol=1e-12)


# -- relevance -----------------------------------------------------------------


def test_relevance_uniform_and_singleton():
    rows = np.eye(4)[:3]
    np.testing.assert_allclose(relevance_scores(rows, np.zeros(4)), 1.0 / 3, atol=1e-12)
    np.testing.assert_allclose(relevance_scores(np.ones((1, 2)) / np.sqrt(2), np.ones(2)), [1.0])


def test_relevance_frozen_oracle_values():
    # softmax of dots [0.1, 0.2, 0.3], computed with an independent scalar oracle
    rows = np.array([[0.1], [0.2], [0.3]])
    r = relevance_scores(rows, np.array([1.0]))
    np.testing.assert_allclose(
        r,
        [0.3006096053557273, 0.3322249935333472, 0.36716540111092544],
        atol=1e-12,
    )
    assert abs(r.sum() - 1.0) < 1e-12


def test_relevance_rejects_empty():
    with pytest.raises(ValueError):
        relevance_scores(np.zeros((0, 3)), np.zeros(3))


# -- mean description feature ---------------------------------------------------


def test_mean_feature_one_hot_and_constant():
    rng = np.random.default_rng(5)
    rows = rng.normal(size=(4, 3))
    r = np.array([0.0, 0.0, 1.0, 0.0])
    np.testing.assert_allclose(mean_description_feature(rows, r), rows[2], atol=1e-15)
    same = np.tile(rows[0], (4, 1))
    r = np.array([0.1, 0.2, 0.3, 0.4])
    np.testing.assert_allclose(mean_description_feature(same, r), rows[0], atol=1e-12)


def test_mean_feature_matches_oracle():
    rng = np.random.default_rng(11)
    rows = rng.normal(size=(3, 2))
    r = rng.dirichlet(np.ones(3))
    out = mean_description_feature(rows, r)
    assert np.abs(out - oracle_mean_feature(rows, r)).max() < 1e-12


def test_mean_feature_length_mismatch():
    with pytest.raises(ValueError):
        mean_description_feature(np.ones((3, 2)), np.ones(4))


# -- specificity ----------------------------------------------------------------


def test_alpha_bounds_and_forced_values():
    one_hot = np.eye(5)[[0, 2, 4]]
    assert specificity_alpha(one_hot) == 1.0
    uniform = np.full((3, 8), 1.0 / 8)
    assert abs(specificity_alpha(uniform) - 1.0 / 8) < 1e-12
    two = np.array([[0.7, 0.2, 0.1], [0.5, 0.3, 0.2]])
    assert abs(specificity_alpha(two) - 0.6) < 1e-12
    with pytest.raises(ValueError):
        specificity_alpha(np.zeros((0, 3)))


# -- fusion ----------------------------------------------------------------------


def test_fuse_endpoints_and_symmetry():
    e1, e2 = np.eye(2)
    np.testing.assert_allclose(fuse_features(e1, e2, 0.0), e1, atol=1e-9)
    np.testing.assert_allclose(fuse_features(e1, e2, 1.0), e2, atol=1e-9)
    np.testing.assert_allclose(fuse_features(e1, e2, 0.5), (e1 + e2) / np.sqrt(2), atol=1e-9)
    raw = fuse_features(e1, e2, 0.25, renormalize=False)
    np.testing.assert_array_equal(raw, 0.75 * e1 + 0.25 * e2)
    with pytest.raises(ValueError):
        fuse_features(e1, e2, 1.5)


# -- alignment score --------------------------------------------------------------


def test_alignment_score_trivial_cases():
    v = np.array([1.0, 0.0, 0.0])
    assert abs(alignment_score(v, v[None, :]) - 1.0) < 1e-12
    rows = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    assert abs(alignment_score(v, rows) - 0.5) < 1e-12


def test_alignment_score_matches_oracle():
    rng = np.random.default_rng(13)
    fused = rng.normal(size=4)
    rows = random_unit_rows(rng, 3, 4)
    out = alignment_score(fused, rows)
    assert abs(out - oracle_alignment_score(fused, rows)) < 1e-12


def test_alignment_score_scale_invariance():
    rng = np.random.default_rng(17)
    fused = rng.normal(size=6)
    rows = random_unit_rows(rng, 4, 6)
    base = alignment_score(fused, rows)
    for c in (1e-3, 0.5, 7.0, 1e3):
        assert abs(alignment_score(c * fused, rows) - base) < 1e-9


def test_alignment_score_rejects_empty():
    with pytest.raises(ValueError):
        alignment_score(np.ones(3), np.zeros((0, 3)))


# -- label-space assembly ----------------------------------------------------------


@pytest.fixture
def toy_setup():
    cfg = EncoderConfig(d=12, d_prime=10, M=4, n_tokens=4, prompt_depth=2, layers=2, seed=9)
    bundle = build_toy_encoder(cfg)
    catalog = build_catalog(
        "toy",
        {
            "cat": ["has whiskers", "has a large tail"],
            "dog": ["barks loudly"],
            "lynx": ["has whiskers"],
        },
    )
    params = init_prompt_parameters(cfg, bundle)
    return cfg, bundle, catalog, params


def test_label_space_union_order(toy_setup):
    _, _, catalog, _ = toy_setup
    union, per_class = label_space_descriptions(catalog, ["dog", "cat", "lynx"])
    assert union == ["barks loudly", "has whiskers", "has a large tail"]
    assert per_class["lynx"] == [1]
    # subsetting the label space shrinks the union
    union2, _ = label_space_descriptions(catalog, ["lynx"])
    assert union2 == ["has whiskers"]


def test_template_strings_variants(toy_setup):
    _, _, catalog, _ = toy_setup
    assert class_template_strings("cat", catalog) == [
        "a photo of a cat, which has whiskers",
        "a photo of a cat, which has a large tail",
    ]
    assert class_template_strings("cat", catalog, variant="no_text_guidance") == ["a photo of a cat"]
    assert class_template_strings("cat", catalog, variant="aggregated_descriptions") == [
        "a photo of a cat, which has whiskers, which has a large tail"
    ]
    assert class_template_strings("cat", catalog, ovc=True) == [
        "a photo of an object, which has whiskers",
        "a photo of an object, which has a large tail",
    ]
    # class missing from the catalog falls back to the plain template
    assert class_template_strings("zebra", catalog) == ["a photo of a zebra"]


def test_validate_variant():
    assert validate_variant("sap") == "sap"
    with pytest.raises(ValueError):
        validate_variant("bogus")


# -- class_alignments ---------------------------------------------------------------


def sample_image(cfg, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(cfg.M, PATCH_DIM))


def test_class_alignments_recomposition_oracle(toy_setup):
    cfg, bundle, catalog, params = toy_setup
    image = sample_image(cfg)
    label_space = ["cat"]
    scores, ab = class_alignments(image, label_space, catalog, bundle, params)

    # recompose stage by stage with the public ops
    union, _ = label_space_descriptions(catalog, label_space)
    queries = description_query_features(union, bundle)
    feats = encode_image(image, bundle, params)
    desc_feats, weights = cross_attention(queries, feats.local_features, feats.local_features)
    r = relevance_scores(queries, feats.global_feature)
    mean_desc = mean_description_feature(desc_feats, r)
    alpha = specificity_alpha(weights)
    fused = fuse_features(feats.global_feature, mean_desc, alpha)
    text = build_text_features(label_space, catalog, bundle, params)
    expected = alignment_score(fused, text["cat"])
    assert abs(scores[0] - expected) < 1e-12
    np.testing.assert_allclose(ab.attention_weights, weights, atol=1e-15)
    assert abs(ab.alpha - alpha) < 1e-15


def test_class_alignments_duplicate_class_purity(toy_setup):
    cfg, bundle, catalog, params = toy_setup
    scores, _ = class_alignments(sample_image(cfg), ["cat", "dog", "cat"], catalog, bundle, params)
    assert scores[0] == scores[2]


def test_class_alignments_global_only_fused_is_global(toy_setup):
    cfg, bundle, catalog, params = toy_setup
    image = sample_image(cfg, seed=4)
    _, ab = class_alignments(image, ["cat", "dog"], catalog, bundle, params, variant="global_only")
    feats = encode_image(image, bundle, params)
    np.testing.assert_array_equal(ab.fused_feature, feats.global_feature)


def test_class_alignments_empty_label_space(toy_setup):
    cfg, bundle, catalog, params = toy_setup
    with pytest.raises(ValueError):
        class_alignments(sample_image(cfg), [], catalog, bundle, params)


def test_class_alignments_description_permutation_exact(toy_setup):
    cfg, bundle, _, params = toy_setup
    image = sample_image(cfg, seed=8)
    forward = build_catalog("toy", {"cat": ["has whiskers", "has a large tail"], "dog": ["barks loudly"]})
    reversed_ = build_catalog("toy", {"cat": ["has a large tail", "has whiskers"], "dog": ["barks loudly"]})
    s1, _ = class_alignments(image, ["cat", "dog"], forward, bundle, params)
    s2, _ = class_alignments(image, ["cat", "dog"], reversed_, bundle, params)
    np.testing.assert_array_equal(s1, s2)


def test_class_alignments_label_space_permutation_equivariance(toy_setup):
    cfg, bundle, catalog, params = toy_setup
    image = sample_image(cfg, seed=2)
    s1, _ = class_alignments(image, ["cat", "dog", "lynx"], catalog, bundle, params)
    s2, _ = class_alignments(image, ["lynx", "cat", "dog"], catalog, bundle, params)
    np.testing.assert_array_equal(s1, [s2[1], s2[2], s2[0]])


def test_class_alignments_all_variants_run(toy_setup):
    cfg, bundle, catalog, params = toy_setup
    image = sample_image(cfg, seed=3)
    outputs = {}
    for variant in ("sap", "mean_text_feature", "aggregated_descriptions", "global_only", "global_local_avg", "no_text_guidance"):
        scores, ab = class_alignments(image, ["cat", "dog"], catalog, bundle, params, variant=variant)
        assert scores.shape == (2,)
        assert np.isfinite(scores).all()
        assert isinstance(ab, AlignmentBundle)
        outputs[variant] = scores
    # the fused-path variants genuinely change the scores
    assert not np.allclose(outputs["sap"], outputs["global_only"])
    assert not np.allclose(outputs["sap"], outputs["mean_text_feature"])


def test_class_alignments_catalog_without_descriptions_degenerates(toy_setup):
    cfg, bundle, _, params = toy_setup
    empty_catalog = build_catalog("toy", {"cat": [], "dog": []})
    image = sample_image(cfg, seed=6)
    scores, ab = class_alignments(image, ["cat", "dog"], empty_catalog, bundle, params)
    plain, _ = class_alignments(image, ["cat", "dog"], empty_catalog, bundle, params, variant="no_text_guidance")
    np.testing.assert_allclose(scores, plain, atol=1e-15)
    feats = encode_image(image, bundle, params)
    np.testing.assert_array_equal(ab.fused_feature, feats.global_feature)


def test_simplex_invariants_randomized():
    rng = np.random.default_rng(99)
    for _ in range(100):
        n, m, d = rng.integers(1, 8), rng.integers(1, 12), rng.integers(2, 16)
        q = random_unit_rows(rng, n, d)
        kv = random_unit_rows(rng, m, d)
        feats, weights = cross_attention(q, kv, kv)
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-9)
        assert (weights > 0).all() and (weights <= 1.0).all()
        r = relevance_scores(q, random_unit_rows(rng, 1, d)[0])
        assert abs(r.sum() - 1.0) < 1e-9
        alpha = specificity_alpha(weights)
        assert 1.0 / m - 1e-12 <= alpha <= 1.0 + 1e-12


def test_cosine_generic_paths():
    rng = np.random.default_rng(21)
    u, v = rng.normal(size=5), rng.normal(size=5)
    plain = cosine(u, v)
    lifted = cosine(eg.Tensor(u), v)
    assert abs(float(eg.val(lifted)) - plain) < 1e-12
