import numpy as np
import pytest

from stconv import autograd as ad
from stconv.blocks import (LcamConfig, StrConfig, channel_split, composed_attention_kernel, init_lcam, init_str,
                           lcam_forward, lcam_param_count, residual_block, str_attention, str_forward)
from stconv.conv import ConvSpec, conv3d_forward, param_count
from stconv.gradcheck import check_gradients
from stconv.tensor import ShapeError


def _lcam_params(cfg, seed=0, dtype=np.float64):
    p = {}
    init_lcam(p, "", cfg, np.random.default_rng(seed), dtype)
    return {k: ad.Var(v) for k, v in p.items()}


def _delta(spec):
    w = np.zeros(spec.weight_shape)
    kt, kh, kw = spec.kernel
    for o in range(spec.c_out):
        w[o, o % (spec.c_in // spec.groups), kt // 2, kh // 2, kw // 2] = 1.0
    return w


@pytest.mark.parametrize("c", [8, 16, 32])
@pytest.mark.parametrize("g", [2, 4])
def test_lcam_preserves_shape(c, g):
    cfg = LcamConfig(c, g)
    x = ad.Var(np.random.default_rng(c + g).standard_normal((1, c, 4, 16, 16)).astype(np.float32))
    out = lcam_forward(x, _lcam_params(cfg, dtype=np.float32), cfg)
    assert out.shape == x.shape


def test_channel_split_cases():
    F = np.random.default_rng(0).standard_normal((1, 16, 2, 3, 3))
    parts = channel_split(F, 4)
    assert [p.shape[1] for p in parts] == [4, 4, 4, 4]
    assert len(channel_split(F[:, :8], 4)) == 4
    v = ad.Var(F)
    assert channel_split(v, 1) == [v]
    np.testing.assert_array_equal(np.concatenate(channel_split(F, 4), axis=1), F)
    with pytest.raises(ShapeError):
        channel_split(F[:, :10], 4)


def test_lcam_with_delta_kernels_only_applies_activations():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 4, 3, 6, 6))
    for residual in (True, False):
        cfg = LcamConfig(4, 2, residual=residual)
        p = {}
        for name, spec in cfg.conv_specs().items():
            p[name + ".weight"] = ad.Var(_delta(spec))
            p[name + ".bias"] = ad.Var(np.zeros(spec.c_out))
        out = lcam_forward(ad.Var(x), p, cfg).data
        expected = x + np.maximum(x, 0) if residual else np.maximum(x, 0)
        np.testing.assert_allclose(out, expected, atol=1e-15)


def test_lcam_cheaper_than_two_dense_convs():
    for c in (32, 64):
        dense = 2 * param_count(ConvSpec(c, c, (3, 3, 3)))
        assert lcam_param_count(LcamConfig(c, 2)) < dense
        assert lcam_param_count(LcamConfig(c, 4)) < dense


def test_lcam_gradients_and_no_dead_parameters():
    rng = np.random.default_rng(2)
    cfg = LcamConfig(4, 4)
    p = {k: ad.Var(v.data + 0.05 * rng.standard_normal(v.shape)) for k, v in _lcam_params(cfg).items()}
    x = ad.Var(rng.standard_normal((1, 4, 3, 9, 9)))
    r = rng.standard_normal(x.shape)
    build = lambda tape: ad.weighted_sum(lcam_forward(x, p, cfg, tape, "", "train", 0.4, [1, 2]), r, tape)
    errs = check_gradients(build, {"x": x, **p}, samples=4, rng=rng)
    assert max(errs.values()) < 1e-4
    tape = ad.Tape()
    ad.backward(tape, build(tape))
    for name, v in p.items():
        assert np.abs(v.grad).max() > 0, name


def test_str_shape_and_neutral_gate():
    cfg = StrConfig()
    y = ad.Var(np.random.default_rng(3).standard_normal((1, 1, 32, 8, 8)))
    p = {}
    init_str(p, "", cfg, np.random.default_rng(0), np.float64)
    pv = {k: ad.Var(v) for k, v in p.items()}
    assert str_forward(y, pv, cfg).shape == (1, 1, 32, 8, 8)
    for k in pv:
        pv[k] = ad.Var(np.zeros_like(p[k]))
    pv["attn.mix.bias"] = ad.Var(np.ones(1))
    np.testing.assert_array_equal(str_forward(y, pv, cfg).data, y.data)


@pytest.mark.parametrize("norm", ["softmax", "sigmoid"])
def test_str_mean_gradient(norm):
    rng = np.random.default_rng(4)
    cfg = StrConfig(1, norm)
    p = {}
    init_str(p, "", cfg, rng, np.float64)
    pv = {k: ad.Var(v + 0.05 * rng.standard_normal(v.shape)) for k, v in p.items()}
    y = ad.Var(rng.standard_normal((1, 1, 8, 5, 5)))
    w = np.full(y.shape, 1.0 / y.data.size)
    errs = check_gradients(lambda tape: ad.weighted_sum(str_forward(y, pv, cfg, tape), w, tape), {"y": y, **pv},
                           samples=6, rng=rng)
    assert max(errs.values()) < 1e-4


def test_residual_block_definition():
    rng = np.random.default_rng(5)
    x = ad.Var(rng.standard_normal((1, 2, 3, 5, 5)))
    spec = ConvSpec(2, 2, (3, 3, 3))
    zero = {"r.weight": ad.Var(np.zeros(spec.weight_shape)), "r.bias": ad.Var(np.zeros(2))}
    np.testing.assert_array_equal(residual_block(x, zero, "r").data, x.data)
    w = rng.standard_normal(spec.weight_shape)
    p = {"r.weight": ad.Var(w), "r.bias": ad.Var(np.zeros(2))}
    branch = np.maximum(conv3d_forward(x.data, w, np.zeros(2), spec), 0)
    np.testing.assert_allclose(residual_block(x, p, "r").data - x.data, branch, rtol=1e-12, atol=1e-12)
    errs = check_gradients(lambda tape: ad.weighted_sum(residual_block(x, p, "r", tape), np.ones(x.shape), tape),
                           {"x": x, **p}, samples=8, rng=rng)
    assert max(errs.values()) < 1e-4


def _impulse_reach(fn, shape, at):
    rng = np.random.default_rng(6)
    x = rng.standard_normal(shape)
    base = fn(x)
    x2 = x.copy()
    x2[(0, 0) + at] += 1.0
    changed = np.argwhere(np.abs(fn(x2) - base) > 0)[:, 2:]
    return np.abs(changed - np.array(at)).max(axis=0)


def test_str_attention_reach_is_nine_cubed():
    cfg = StrConfig(1, "sigmoid")
    p = {}
    init_str(p, "", cfg, np.random.default_rng(7), np.float64)
    pv = {k: ad.Var(v) for k, v in p.items()}
    reach = _impulse_reach(lambda a: str_attention(ad.Var(a), pv, cfg).data, (1, 1, 20, 20, 20), (10, 10, 10))
    assert tuple(reach) == (4, 4, 4) == (cfg.attention_reach,) * 3
    # the two residual 3x3x3 convs widen the full block by one cell each
    reach = _impulse_reach(lambda a: str_forward(ad.Var(a), pv, cfg).data, (1, 1, 20, 20, 20), (10, 10, 10))
    assert max(reach) <= cfg.attention_reach + cfg.residual_blocks


def test_composed_kernel_matches_two_stage_attention_inside():
    rng = np.random.default_rng(8)
    local, dilated = rng.standard_normal((2, 1, 1, 3, 3, 3))
    x = rng.standard_normal((1, 1, 13, 13, 13))
    two = conv3d_forward(conv3d_forward(x, local, None, ConvSpec(1, 1, (3, 3, 3))), dilated, None,
                         ConvSpec(1, 1, (3, 3, 3), dilation=3))
    one = conv3d_forward(x, composed_attention_kernel(local, dilated), None, ConvSpec(1, 1, (9, 9, 9)))
    inner = (slice(None), slice(None)) + (slice(4, -4),) * 3
    np.testing.assert_allclose(two[inner], one[inner], rtol=1e-10, atol=1e-10)


def test_config_validation():
    with pytest.raises(ValueError):
        LcamConfig(10, 4)
    with pytest.raises(ValueError):
        StrConfig(norm="spatial")
    assert LcamConfig(8, 4).kernel_ladder == (3, 5, 7, 9)
