from dataclasses import replace

import numpy as np
import pytest

from config import VARIANTS
from errors import ContractError, ShapeError, ValidationError
from model_han import VARIANT_STRUCTURE, HanConfig, HanModel, build_variant, predict
from tensor_autodiff import Graph, gradient_check


def _batch(cfg: HanConfig, n: int = 2, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.random((n, cfg.windows_per_sample, cfg.channels, cfg.height, cfg.width)).astype(np.float32)


def test_every_variant_has_a_structure():
    assert set(VARIANT_STRUCTURE) == set(VARIANTS)


@pytest.mark.parametrize("variant", VARIANTS)
def test_variants_forward_shapes(variant, tiny_model_cfg):
    cfg = replace(tiny_model_cfg, variant=variant)
    model = build_variant(cfg, seed=1)
    out = model.forward(Graph(), _batch(cfg, n=3))
    assert out.probability.shape == (3,)
    assert out.embedding.shape == (3, cfg.recording_embedding_dim)
    assert np.all((out.probability.data > 0) & (out.probability.data < 1))


def test_full_variant_has_the_most_parameters(tiny_model_cfg):
    full = build_variant(tiny_model_cfg).parameter_count()
    for variant in VARIANTS:
        if variant in ("full", "no_conv_extractor"):
            continue
        assert build_variant(replace(tiny_model_cfg, variant=variant)).parameter_count() < full, variant


def test_lstm_and_attention_layer_counts(tiny_model_cfg):
    assert (tiny_model_cfg.lstm_layers, tiny_model_cfg.attention_layers) == (2, 2)
    no_recurrent = replace(tiny_model_cfg, variant="no_recurrent")
    assert (no_recurrent.lstm_layers, no_recurrent.attention_layers) == (0, 2)
    no_attention = replace(tiny_model_cfg, variant="no_hierarchical_attention")
    assert no_attention.attention_layers == 0


def test_default_config_conv_output():
    cfg = HanConfig()
    assert cfg.conv_output_hw() == (5, 31)
    assert cfg.window_feature_dim == 64 * 5
    assert cfg.sequence_length == 31


def test_collapsed_hierarchy_sees_concatenated_windows(tiny_model_cfg):
    cfg = replace(tiny_model_cfg, variant="collapsed_hierarchy")
    assert cfg.sequence_length == cfg.windows_per_sample * cfg.width // 4
    out = build_variant(cfg).forward(Graph(), _batch(cfg))
    assert out.window_weights.shape == (2, cfg.sequence_length)
    assert out.sequence_weights is None


def test_validate_rejects_even_kernel_and_collapsing_pools(tiny_model_cfg):
    with pytest.raises(ValidationError):
        build_variant(replace(tiny_model_cfg, kernel_size=4))
    with pytest.raises(ValidationError):
        build_variant(replace(tiny_model_cfg, conv_filters=(2, 2, 2)))
    with pytest.raises(ValidationError):
        build_variant(replace(tiny_model_cfg, variant="transformer"))


def test_wrong_input_shape_and_window_count(tiny_model_cfg):
    model = build_variant(tiny_model_cfg)
    with pytest.raises(ShapeError):
        model.forward(Graph(), np.zeros((1, 10, 3, 4, 4), dtype=np.float32))
    with pytest.raises(ContractError):
        model.forward(Graph(), np.zeros((1, 9, 2, 4, 4), dtype=np.float32))
    with pytest.raises(ContractError):
        model.sequence_encoder(Graph(), np.zeros((1, 4, tiny_model_cfg.lstm_hidden), dtype=np.float32))


def test_zero_input_gives_uniform_attention(tiny_model_cfg):
    model = build_variant(tiny_model_cfg)
    out = model.forward(Graph(), np.zeros((1, 10, 2, 4, 4), dtype=np.float32))
    np.testing.assert_allclose(out.sequence_weights.data, np.full((1, 10), 0.1), rtol=1e-5)


def test_eval_forward_is_deterministic_and_batch_independent(tiny_model_cfg):
    model = build_variant(tiny_model_cfg, seed=5)
    batch = _batch(tiny_model_cfg, n=4)
    full, _ = predict(model, batch)
    chunked, _ = predict(model, batch, chunk=1)
    np.testing.assert_allclose(full, chunked, rtol=1e-5, atol=1e-6)


def test_build_is_reproducible_per_seed(tiny_model_cfg):
    a, b, c = build_variant(tiny_model_cfg, 3), build_variant(tiny_model_cfg, 3), build_variant(tiny_model_cfg, 4)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params)


def test_forget_gate_bias_starts_at_one(tiny_model_cfg):
    b = build_variant(tiny_model_cfg).params["window_lstm.b"].data
    h = tiny_model_cfg.lstm_hidden
    np.testing.assert_array_equal(b[h:2 * h], np.ones(h))
    np.testing.assert_array_equal(b[:h], np.zeros(h))


def test_encoder_and_head_partition(tiny_model_cfg):
    model = build_variant(tiny_model_cfg)
    assert set(model.head_params) == {"projector.w", "projector.b", "classifier.w", "classifier.b"}
    assert set(model.encoder_params) | set(model.head_params) == set(model.params)
    assert not set(model.encoder_params) & set(model.head_params)


def test_save_and_load_restore_predictions(tiny_model_cfg, tmp_path):
    model = build_variant(tiny_model_cfg, seed=2)
    model.buffers["bn0.mean"][...] = 0.25
    path = str(tmp_path / "model.npz")
    model.save(path)
    loaded = HanModel.load(path)
    assert loaded.cfg == tiny_model_cfg
    batch = _batch(tiny_model_cfg)
    np.testing.assert_array_equal(predict(model, batch)[0], predict(loaded, batch)[0])
    assert loaded.inputs == {}


def test_save_keeps_recorded_inputs(tiny_model_cfg, tmp_path):
    model = build_variant(tiny_model_cfg)
    model.inputs = {"representation": "multiview", "tfr": {"n_scales": 4, "n_time_bins": 4, "omega0": 5.0}}
    path = str(tmp_path / "model.npz")
    model.save(path)
    assert HanModel.load(path).inputs == model.inputs
    assert model.copy().inputs == model.inputs


def test_training_forward_updates_running_stats_only_on_commit(tiny_model_cfg):
    model = build_variant(tiny_model_cfg)
    g = Graph(training=True)
    model.forward(g, _batch(tiny_model_cfg))
    np.testing.assert_array_equal(model.buffers["bn0.mean"], np.zeros(3))
    g.commit_buffers()
    assert np.any(model.buffers["bn0.mean"] != 0)


@pytest.mark.parametrize("variant", ["full", "collapsed_hierarchy", "no_conv_extractor"])
def test_end_to_end_gradient_check(variant, tiny_model_cfg):
    from objectives import bce_loss

    cfg = replace(tiny_model_cfg, variant=variant, width=8, windows_per_sample=3)
    model = build_variant(cfg, seed=7, dtype=np.float64)
    batch = _batch(cfg, n=2, seed=3).astype(np.float64)
    labels = np.array([0, 1])

    def fn(g):
        return bce_loss(g, model.forward(g, batch).probability, labels)
    assert gradient_check(fn, list(model.params.values()), step=1e-5) <= 1e-3
