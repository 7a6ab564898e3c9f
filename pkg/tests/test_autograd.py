import numpy as np
import pytest

from stconv import autograd as ad
from stconv.conv import ConvSpec
from stconv.gradcheck import check_gradients


def test_tape_is_single_use():
    x = ad.Var(np.ones((1, 1, 1, 2, 2)), requires_grad=True)
    tape = ad.Tape()
    loss = ad.weighted_sum(ad.relu(x, tape), np.ones((1, 1, 1, 2, 2)), tape)
    ad.backward(tape, loss)
    with pytest.raises(ad.TapeError):
        ad.backward(tape, loss)
    with pytest.raises(ad.TapeError):
        ad.relu(x, tape)


def test_fan_out_accumulates():
    x = ad.Var(np.full((1, 1, 1, 1, 2), 3.0), requires_grad=True)
    tape = ad.Tape()
    y = ad.mul(x, x, tape)
    loss = ad.weighted_sum(ad.add(y, x, tape), np.ones((1, 1, 1, 1, 2)), tape)
    ad.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [[[[[7.0, 7.0]]]]])


def test_constants_get_no_gradient_and_nothing_is_recorded():
    c = ad.Var(np.ones((1, 1, 1, 1, 1)))
    tape = ad.Tape()
    ad.relu(c, tape)
    assert len(tape) == 0
    assert c.grad is None


def test_intermediate_gradients_are_released():
    x = ad.Var(np.ones((1, 1, 1, 2, 2)), requires_grad=True)
    tape = ad.Tape()
    h = ad.scale(x, 2.0, tape)
    loss = ad.weighted_sum(h, np.ones((1, 1, 1, 2, 2)), tape)
    ad.backward(tape, loss)
    assert h.grad is None and x.grad is not None


def test_corrupted_weight_gradient_is_caught(monkeypatch):
    rng = np.random.default_rng(0)
    spec = ConvSpec(1, 1, (3, 3, 3))
    x = ad.Var(rng.standard_normal((1, 1, 3, 4, 4)))
    w = ad.Var(rng.standard_normal(spec.weight_shape))
    r = rng.standard_normal((1, 1, 3, 4, 4))

    def build(tape):
        return ad.weighted_sum(ad.conv3d(x, w, None, spec, tape), r, tape)

    assert check_gradients(build, {"w": w}, samples=5)["w"] < 1e-6
    monkeypatch.setattr(ad, "_CONV_WEIGHT_GRAD_SCALE", 1.01)
    assert check_gradients(build, {"w": w}, samples=5)["w"] > 1e-3


def test_bce_gradient_through_both_heads(rng):
    from stconv.training import total_loss

    a = ad.Var(rng.standard_normal((1, 1, 4, 2, 2)) * 2)
    b = ad.Var(rng.standard_normal((1, 1, 4, 2, 2)) * 2)
    y = (rng.random((1, 1, 4, 2, 2)) < 0.5).astype(np.float64)
    errs = check_gradients(lambda tape: total_loss(a, b, y, 0.2, 4.0, tape), {"final": a, "early": b})
    assert max(errs.values()) < 1e-4


def test_shape_mismatch_in_binary_ops():
    a, b = ad.Var(np.ones((1, 1, 1, 1, 2))), ad.Var(np.ones((1, 1, 1, 2, 1)))
    with pytest.raises(ValueError):
        ad.add(a, b)
    with pytest.raises(ValueError):
        ad.weighted_sum(a, np.ones(3))
