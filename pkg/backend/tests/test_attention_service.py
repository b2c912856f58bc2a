import math

import numpy as np
import pytest

from models.schemas import AttentionConfig
from services import attention_service as attn
from services import verification_service
from services.errors import ConfigError, ContractError, DimensionError, NumericDomainError
from services.tensor_service import ParameterStore, constant


def _weights(rng, cfg):
    store = ParameterStore()
    return attn.init_attention_weights(store, "", cfg, rng)


def test_split_and_merge_heads_are_inverse(rng):
    x = rng.normal(size=(2, 5, 8))
    heads = attn.split_heads(constant(x), 2)
    assert heads.shape == (2, 2, 5, 4)
    np.testing.assert_array_equal(heads.values[:, 1], x[..., 4:])
    np.testing.assert_array_equal(attn.merge_heads(heads).values, x)


def test_split_heads_needs_divisible_width():
    with pytest.raises(DimensionError):
        attn.split_heads(constant(np.ones((3, 7))), 2)


def test_euclidean_map_is_scaled_dot_product(rng):
    q, k = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    out = attn.euclidean_distance_map(constant(q), constant(k)).values
    np.testing.assert_allclose(out, q @ k.T / 2.0, atol=1e-12)


def test_token_covariance_example():
    x = constant([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]])
    np.testing.assert_allclose(attn.token_covariance(x).values, [[1.0, 2.0], [2.0, 4.0]], atol=1e-12)


def test_token_covariance_of_constant_rows_is_zero():
    x = constant(np.tile(np.array([[5.0], [-1.0], [2.0]]), (1, 4)))
    np.testing.assert_array_equal(attn.token_covariance(x).values, np.zeros((3, 3)))


def test_token_covariance_needs_two_features():
    with pytest.raises(ConfigError):
        attn.token_covariance(constant(np.ones((4, 1))))


def test_token_covariance_matches_loop_oracle(rng):
    x = rng.uniform(-1, 1, size=(7, 5))
    got = attn.token_covariance(constant(x)).values
    np.testing.assert_allclose(got, verification_service.covariance_oracle(x), atol=1e-12)


def test_spd_map_of_identical_inputs_is_exactly_zero(rng):
    c = attn.token_covariance(constant(rng.normal(size=(2, 6, 4))))
    assert np.all(attn.spd_distance_map(c, c, 4).values == 0.0)


def test_spd_map_is_symmetric_and_nonnegative(rng):
    c_q = attn.token_covariance(constant(rng.normal(size=(6, 4))))
    c_k = attn.token_covariance(constant(rng.normal(size=(6, 4))))
    out = attn.spd_distance_map(c_q, c_k, 4).values
    assert out.min() >= 0
    np.testing.assert_allclose(out, out.T, atol=1e-15)


def test_qr_identity_input():
    g, r = attn.gram_schmidt_thin_qr(constant(np.eye(4, 3)))
    np.testing.assert_allclose(g.values, np.eye(4, 3), atol=1e-15)
    np.testing.assert_allclose(r.values, np.eye(3), atol=1e-15)


def test_qr_reconstructs_and_is_orthonormal(rng):
    x = rng.normal(size=(3, 10, 4))
    g, r = attn.gram_schmidt_thin_qr(constant(x))
    for i in range(3):
        np.testing.assert_allclose(g.values[i].T @ g.values[i], np.eye(4), atol=1e-12)
        np.testing.assert_allclose(g.values[i] @ r.values[i], x[i], atol=1e-12)
        assert np.allclose(np.tril(r.values[i], -1), 0.0)
        assert np.all(np.diag(r.values[i]) > 0)


def test_qr_duplicate_column_gives_zero_pivot():
    x = np.array([[1.0, 1.0], [0.0, 0.0], [1.0, 1.0]])
    g, r = attn.gram_schmidt_thin_qr(constant(x))
    s = 1 / math.sqrt(2)
    np.testing.assert_allclose(g.values[:, 0], [s, 0.0, s], atol=1e-15)
    np.testing.assert_array_equal(g.values[:, 1], [0.0, 0.0, 0.0])
    assert r.values[1, 1] == 0.0
    p = attn.grassmann_projector(g).values
    assert abs(np.trace(p) - 1.0) < 1e-12
    assert attn.deficient_count(r) == 1


def test_qr_rejects_non_finite():
    with pytest.raises(NumericDomainError):
        attn.gram_schmidt_thin_qr(constant([[np.inf, 0.0], [1.0, 1.0]]))


def test_qr_agrees_with_classical_oracle(rng):
    x = rng.normal(size=(12, 4))
    g, _ = attn.gram_schmidt_thin_qr(constant(x))
    g_c, _ = verification_service.classical_gs_qr_oracle(x)
    np.testing.assert_allclose(g.values @ g.values.T, g_c @ g_c.T, atol=1e-8)


def test_grassmann_map_zero_for_same_subspace(rng):
    x = rng.normal(size=(8, 3))
    g, _ = attn.gram_schmidt_thin_qr(constant(x))
    assert np.all(attn.grassmann_distance_map(g, g).values == 0.0)
    a = np.array([[2.0, 1.0, 0.0], [0.0, 1.0, 0.5], [1.0, 0.0, 3.0]])
    g_a, _ = attn.gram_schmidt_thin_qr(constant(x @ a))
    assert np.abs(attn.grassmann_distance_map(g_a, g).values).max() < 1e-8


def test_grassmann_map_matches_projector_oracle(rng):
    q, k = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    g_q, _ = attn.gram_schmidt_thin_qr(constant(q))
    g_k, _ = attn.gram_schmidt_thin_qr(constant(k))
    got = attn.grassmann_distance_map(g_q, g_k).values
    np.testing.assert_allclose(got, verification_service.projector_difference_oracle(q, k), atol=1e-8)


def test_distance_maps_follow_enabled_manifolds(rng, small_attention):
    q = attn.split_heads(constant(rng.normal(size=(6, 8))), 2)
    k = attn.split_heads(constant(rng.normal(size=(6, 8))), 2)
    trace = attn.AttentionTrace()
    maps = attn.distance_maps(q, k, small_attention, trace)
    assert list(maps) == ["euclidean", "spd", "grassmann"]
    assert all(m.shape == (2, 6, 6) for m in maps.values())
    assert [e.kind for e in trace.entries] == ["euclidean", "spd", "grassmann"]


def test_early_fusion_with_euclidean_selector_reduces_to_vanilla(rng, small_attention):
    weights = _weights(rng, small_attention)
    selected = attn.AttentionWeights(weights.w_q, weights.w_k, weights.w_v, weights.w_o, weights.b_o,
                                     attn.euclidean_selector(2, 3))
    x = constant(rng.normal(size=(3, 6, 8)))
    fused = attn.mma_attention_forward(x, selected, small_attention).values
    vanilla = attn.vanilla_mhsa_forward(x, weights, 2).values
    assert np.abs(fused - vanilla).max() <= 1e-10


def test_euclidean_only_early_fusion_is_vanilla(rng):
    cfg = AttentionConfig(heads=2, model_dim=8, manifolds="e")
    weights = _weights(rng, cfg)
    assert weights.mix is None
    x = constant(rng.normal(size=(6, 8)))
    np.testing.assert_array_equal(attn.mma_attention_forward(x, weights, cfg).values,
                                  attn.vanilla_mhsa_forward(x, weights, 2).values)


def test_fusion_mix_initialised_near_selector(rng, small_attention):
    weights = _weights(rng, small_attention)
    selector, _ = attn.selector_mix_values(2, 3)
    assert weights.mix.weight.shape == (2, 6)
    assert np.abs(weights.mix.weight.values - selector).max() <= attn.MIX_NOISE
    np.testing.assert_array_equal(weights.mix.bias.values, np.zeros(2))


def test_fuse_early_needs_every_enabled_map(rng, small_attention):
    weights = _weights(rng, small_attention)
    v = constant(rng.normal(size=(2, 6, 4)))
    with pytest.raises(ContractError):
        attn.fuse_early({"euclidean": constant(np.zeros((2, 6, 6)))}, weights.mix, v, small_attention.manifolds)


def test_fuse_early_checks_mix_shape(rng, small_attention):
    v = constant(rng.normal(size=(2, 6, 4)))
    maps = {m: constant(np.zeros((2, 6, 6))) for m in small_attention.manifolds}
    bad = attn.FusionMix(constant(np.zeros((2, 4))), constant(np.zeros(2)))
    with pytest.raises(DimensionError):
        attn.fuse_early(maps, bad, v, small_attention.manifolds)


def test_attention_rows_are_stochastic(rng, small_attention):
    trace = attn.AttentionTrace()
    attn.mma_attention_forward(constant(rng.normal(size=(2, 6, 8))), _weights(rng, small_attention),
                               small_attention, trace)
    (entry,) = trace.select("attention")
    assert entry.values.shape == (2, 2, 6, 6)
    np.testing.assert_allclose(entry.values.sum(axis=-1), 1.0, atol=1e-12)


def test_late_fusion_concatenates_towers(rng):
    cfg = AttentionConfig(heads=2, model_dim=8, manifolds="e,g", fusion="late")
    towers = {m: _weights(rng, cfg.for_tower(m)) for m in cfg.manifolds}
    x = constant(rng.normal(size=(6, 8)))
    out = attn.mma_attention_forward(x, towers, cfg).values
    assert out.shape == (6, 16)
    alone = attn.tower_attention_forward(x, towers["grassmann"], cfg, "grassmann").values
    np.testing.assert_array_equal(out[:, 8:], alone)


def test_late_fusion_single_tower_and_negation(rng):
    cfg = AttentionConfig(heads=2, model_dim=8, manifolds="s", fusion="late")
    weights = _weights(rng, cfg)
    x = constant(rng.normal(size=(6, 8)))
    plain = attn.mma_attention_forward(x, weights, cfg).values
    negated = attn.mma_attention_forward(x, weights, cfg.model_copy(update={"negate_distances": True})).values
    assert plain.shape == (6, 8)
    assert not np.allclose(plain, negated)


def test_negation_leaves_euclidean_tower_alone(rng):
    cfg = AttentionConfig(heads=2, model_dim=8, manifolds="e", fusion="late")
    weights = _weights(rng, cfg)
    x = constant(rng.normal(size=(6, 8)))
    a = attn.mma_attention_forward(x, weights, cfg).values
    b = attn.mma_attention_forward(x, weights, cfg.model_copy(update={"negate_distances": True})).values
    np.testing.assert_array_equal(a, b)


def test_fuse_late_accepts_two_or_three_towers():
    t = constant(np.ones((4, 8)))
    assert attn.fuse_late([t, t]).shape == (4, 16)
    assert attn.fuse_late([t, t, t]).shape == (4, 24)
    with pytest.raises(ContractError):
        attn.fuse_late([t])
    with pytest.raises(DimensionError):
        attn.fuse_late([t, constant(np.ones((5, 8)))])


def test_late_fusion_needs_tower_mapping(rng):
    cfg = AttentionConfig(heads=2, model_dim=8, manifolds="e,s", fusion="late")
    with pytest.raises(ContractError):
        attn.mma_attention_forward(constant(rng.normal(size=(6, 8))), _weights(rng, cfg.for_tower("spd")), cfg)


def test_nan_input_is_rejected(rng, small_attention):
    x = rng.normal(size=(6, 8))
    x[2, 3] = np.nan
    with pytest.raises(NumericDomainError):
        attn.mma_attention_forward(constant(x), _weights(rng, small_attention), small_attention)


def test_config_rejects_spd_with_one_dim_heads():
    with pytest.raises(ValueError):
        AttentionConfig(heads=8, model_dim=8, manifolds="e,s")
    with pytest.raises(ValueError):
        AttentionConfig(heads=3, model_dim=8)
