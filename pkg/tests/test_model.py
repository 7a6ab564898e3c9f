import numpy as np
import pytest

from stconv import autograd as ad
from stconv.conv import flops_decomposed, flops_full
from stconv.gradcheck import check_gradients
from stconv.model import (ModelConfig, ParamStore, build, count_model_flops, dense_counterpart, forward,
                          load_checkpoint, predict_logits, save_checkpoint)
from stconv.tensor import ShapeError
from stconv.training import total_loss


def test_build_is_seed_deterministic():
    cfg = ModelConfig(init_filters=8)
    a, b = build(cfg, 3), build(cfg, 3)
    assert a.names() == b.names()
    for (_, x), (_, y) in zip(a.items(), b.items()):
        np.testing.assert_array_equal(x, y)
    c = build(cfg, 4)
    assert any(not np.array_equal(x, y) for (_, x), (_, y) in zip(a.items(), c.items()))


def test_width_doubling_scales_parameters_about_four_times():
    small = build(ModelConfig(init_filters=32)).num_params()
    large = build(ModelConfig(init_filters=64)).num_params()
    assert 3.5 <= large / small <= 4.5


def test_fewer_parameters_than_dense_unet():
    for c in (16, 32):
        cfg = ModelConfig(init_filters=c)
        assert build(cfg).num_params() < build(dense_counterpart(cfg)).num_params()


@pytest.mark.parametrize("kw", [dict(t_out=33), dict(group_count=3, init_filters=32), dict(arch="transformer"),
                                dict(dropout_rate=1.0), dict(dtype="float16")])
def test_invalid_configs(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_forward_shapes_and_eval_determinism():
    cfg = ModelConfig(init_filters=8)
    p = build(cfg, 0)
    x = np.random.default_rng(0).standard_normal((2, 11, 4, 48, 48)).astype(np.float32)
    early, final = forward(x, p, cfg, "eval")
    assert early.shape == final.shape == (2, 1, 32, 8, 8)
    np.testing.assert_array_equal(forward(x, p, cfg, "eval")[1].data, final.data)
    a = forward(x, p, cfg, "train", 1)[1].data
    b = forward(x, p, cfg, "train", 2)[1].data
    assert not np.array_equal(a, b)


@pytest.mark.parametrize("hw,levels", [(24, 3), (48, 3), (96, 3), (36, 2)])
def test_shape_contract_sweep(hw, levels):
    cfg = ModelConfig(init_filters=4, levels=levels)
    x = np.zeros((1, 11, 4, hw, hw), dtype=np.float32)
    assert predict_logits(x, build(cfg), cfg).shape == (1, 1, 32, hw // 6, hw // 6)


def test_bad_inputs_name_both_shapes():
    cfg = ModelConfig(init_filters=4)
    with pytest.raises(ShapeError, match="11"):
        forward(np.zeros((1, 10, 4, 48, 48)), build(cfg), cfg)
    with pytest.raises(ShapeError):
        forward(np.zeros((1, 11, 4, 50, 48)), build(cfg), cfg)


def test_end_to_end_gradient(tiny_cfg, rng):
    params = build(tiny_cfg, 0)
    pv = params.as_vars()
    for v in pv.values():
        v.data = v.data + 0.05 * rng.standard_normal(v.data.shape)
    x = rng.standard_normal((2, 11, 4, 12, 12))
    y = (rng.random((2, 1, 8, 2, 2)) < 0.4).astype(np.float64)

    def loss(tape):
        early, final = forward(x, pv, tiny_cfg, "train", [0, 1], tape)
        return total_loss(final, early, y, 0.2, 4.0, tape)

    names = sorted(pv)
    picked = {n: pv[n] for n in rng.choice(names, size=20, replace=False)}
    errs = check_gradients(loss, picked, samples=1, rng=rng)
    assert max(errs.values()) < 1e-3


def test_zeroing_a_skip_changes_the_output():
    cfg = ModelConfig(init_filters=4)
    p = build(cfg, 0)
    x = np.random.default_rng(1).standard_normal((1, 11, 4, 24, 24)).astype(np.float32)
    a = forward(x, p, cfg)[0].data
    b = forward(x, p, cfg, zero_skips=True)[0].data
    assert not np.array_equal(a, b)


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(init_filters=4, str_norm="sigmoid")
    p = build(cfg, 5)
    save_checkpoint(tmp_path / "m.star", p, cfg)
    q, cfg2 = load_checkpoint(tmp_path / "m.star")
    assert cfg2 == cfg
    x = np.random.default_rng(2).standard_normal((1, 11, 4, 24, 24)).astype(np.float32)
    np.testing.assert_array_equal(predict_logits(x, p, cfg), predict_logits(x, q, cfg2))


def test_param_store_state_dict_is_a_copy():
    p = ParamStore({"a": np.ones(3)})
    state = p.state_dict()
    state["a"][:] = 5
    assert p["a"].sum() == 3
    with pytest.raises(KeyError):
        p.add("a", np.ones(1))


def test_single_layer_flops_equal_closed_form():
    cfg = ModelConfig(arch="single", init_filters=3)
    report = count_model_flops(cfg, (1, 11, 4, 48, 48))
    body = report.layers[0]
    assert body.name == "body"
    assert body.macs == 4 * flops_full(48, 48, 11, 3, 3, 3, 3)
    (d,) = report.decompositions
    assert d.tap_ratio == "12/27" and d.decomposed_macs == 4 * flops_decomposed(48, 48, 11, 3, 3, 3, 3)


def test_flops_report_bookkeeping():
    cfg = ModelConfig(init_filters=16)
    report = count_model_flops(cfg, (1, 11, 4, 48, 48))
    total_macs = total_params = 0
    for layer in report.layers:
        total_macs += layer.macs
        total_params += layer.params
    assert report.total_macs == total_macs
    assert report.total_params == total_params == build(cfg).num_params()
    assert len(report.decompositions) == 10
    for d in report.decompositions:
        assert d.decomposed_macs < d.dense_macs
    assert report.dense_equivalent_macs > report.total_macs
