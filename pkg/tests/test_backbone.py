import numpy as np
import pytest

from weckd.backbone import (
    BackboneConfig,
    Model,
    build_model,
    copy_attention_weights,
    forward,
    forward_attended,
    forward_base,
    param_digest,
)
from weckd.tensor import ContractError, ShapeError, attention_scores


def test_build_is_deterministic():
    a = build_model(BackboneConfig(init_seed=7))
    b = build_model(BackboneConfig(init_seed=7))
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])


def test_default_head_shape():
    model = build_model(BackboneConfig())
    assert model.params["w2"].shape == (128, 4)


def test_linear_biases_start_at_zero():
    model = build_model(BackboneConfig(init_seed=3))
    for name in ("conv0_b", "conv1_b", "conv2_b", "b1", "b2"):
        assert np.all(model.params[name] == 0.0)


def test_attention_gate_starts_near_pass_through():
    model = build_model(BackboneConfig(init_seed=3))
    assert float(model.params["b_att"]) == 2.0
    assert np.all(np.abs(model.params["w_att"]) < 0.1)


def test_spatial_collapse_rejected():
    with pytest.raises(ShapeError):
        BackboneConfig(input_size=(4, 4, 1), conv_blocks=(8, 8, 8))


def test_probability_rows_sum_to_one():
    model = build_model(BackboneConfig(init_seed=0))
    batch = np.random.default_rng(0).uniform(0, 1, size=(3, 3, 32, 32))
    _, probs, _ = forward_base(model, batch)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_zero_parameters_give_uniform_probs():
    model = build_model(BackboneConfig(init_seed=0))
    model = Model(model.config, {k: np.zeros_like(v) for k, v in model.params.items()})
    _, probs, _ = forward_base(model, np.ones((2, 3, 32, 32)))
    np.testing.assert_allclose(probs, 0.25, atol=1e-12)


def test_feature_map_shape_default_config():
    model = build_model(BackboneConfig(init_seed=0))
    f_base, _, logits = forward_base(model, np.zeros((2, 3, 32, 32)))
    assert f_base.shape == (2, 64, 4, 4)
    assert np.all(np.isfinite(logits))


def test_wrong_input_size_rejected():
    model = build_model(BackboneConfig())
    with pytest.raises(ShapeError):
        forward_base(model, np.zeros((1, 3, 16, 16)))


def test_attention_scores_zero_weights():
    scores = attention_scores(np.random.default_rng(0).normal(size=(2, 5, 3, 3)),
                              np.zeros(5), np.zeros(()))
    np.testing.assert_array_equal(scores, np.full((2, 3, 3), 0.5))


def test_attention_scores_saturate_with_large_bias():
    scores = attention_scores(np.zeros((1, 4, 2, 2)), np.zeros(4), np.array(50.0))
    assert np.all(scores > 1 - 1e-9)


def test_attention_scores_single_location_value():
    scores = attention_scores(np.full((1, 1, 1, 1), 2.0), np.ones(1), np.zeros(()))
    assert scores[0, 0, 0] == pytest.approx(0.880797, abs=1e-6)


def test_attention_scores_channel_mismatch():
    with pytest.raises(ShapeError):
        attention_scores(np.zeros((1, 4, 2, 2)), np.zeros(3), np.zeros(()))


def _attended_model(seed=0):
    return build_model(BackboneConfig(attention_enabled=True, init_seed=seed))


def test_saturated_attention_equals_base_path():
    model = _attended_model()
    model.params["w_att"] = np.zeros_like(model.params["w_att"])
    model.params["b_att"] = np.array(800.0)  # sigmoid underflows to exactly 1.0
    batch = np.random.default_rng(1).uniform(0, 1, size=(2, 3, 32, 32))
    _, probs_att, logits_att = forward_attended(model, batch)
    _, probs_base, logits_base = forward_base(model, batch)
    np.testing.assert_array_equal(logits_att, logits_base)
    np.testing.assert_array_equal(probs_att, probs_base)


def test_constant_half_attention_scales_gap():
    model = _attended_model()
    model.params["w_att"] = np.zeros_like(model.params["w_att"])
    model.params["b_att"] = np.array(0.0)  # every score exactly 0.5
    batch = np.random.default_rng(2).uniform(0, 1, size=(1, 3, 32, 32))
    f_base, _, _ = forward_base(model, batch)
    f_att, _, _ = forward_attended(model, batch)
    np.testing.assert_allclose(f_att.mean(axis=(2, 3)), 0.5 * f_base.mean(axis=(2, 3)),
                               atol=1e-12)


def test_attention_scores_strictly_inside_unit_interval():
    model = _attended_model(seed=5)
    batch = np.random.default_rng(5).uniform(0, 1, size=(2, 3, 32, 32))
    f_att, _, _ = forward_attended(model, batch)
    scores = attention_scores(forward_base(model, batch)[0],
                              model.params["w_att"], model.params["b_att"])
    assert np.all(scores > 0) and np.all(scores < 1)
    assert np.all(np.isfinite(f_att))


def test_forward_attended_requires_flag():
    model = build_model(BackboneConfig(attention_enabled=False))
    with pytest.raises(ContractError):
        forward_attended(model, np.zeros((1, 3, 32, 32)))


def test_forward_routes_by_flag():
    batch = np.random.default_rng(3).uniform(0, 1, size=(1, 3, 32, 32))
    plain = build_model(BackboneConfig(init_seed=4))
    gated = build_model(BackboneConfig(attention_enabled=True, init_seed=4))
    np.testing.assert_array_equal(forward(plain, batch)[2], forward_base(plain, batch)[2])
    np.testing.assert_array_equal(forward(gated, batch)[2], forward_attended(gated, batch)[2])


def test_copy_attention_weights():
    teacher = _attended_model(seed=10)
    teacher.params["w_att"] = np.arange(64, dtype=np.float64)
    student = _attended_model(seed=11)
    before_conv = student.params["conv0_w"].copy()
    out = copy_attention_weights(teacher, student)
    np.testing.assert_array_equal(out.params["w_att"], teacher.params["w_att"])
    np.testing.assert_array_equal(out.params["b_att"], teacher.params["b_att"])
    np.testing.assert_array_equal(out.params["conv0_w"], before_conv)


def test_copy_attention_weights_self_is_noop():
    model = _attended_model(seed=12)
    out = copy_attention_weights(model, model.copy())
    for name in model.params:
        np.testing.assert_array_equal(out.params[name], model.params[name])


def test_copy_attention_channel_mismatch():
    teacher = build_model(BackboneConfig(conv_blocks=(8, 16), attention_enabled=True))
    student = _attended_model()
    with pytest.raises(ShapeError):
        copy_attention_weights(teacher, student)


def test_param_digest_tracks_changes():
    model = build_model(BackboneConfig(init_seed=0))
    d1 = param_digest(model)
    assert d1 == param_digest(model)
    model.params["w1"][0, 0] += 1e-9
    assert param_digest(model) != d1
