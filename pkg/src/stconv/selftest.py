"""Release checks: gradient suite, decomposition oracle, FLOPs closed forms, fold round trip.

Every check returns a :class:`CheckResult`; the CLI prints one CSV row per
check and exits nonzero when any fails.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autograd as ad
from .blocks import LcamConfig, StrConfig, init_lcam, init_str, lcam_forward, str_forward
from .conv import ConvSpec, conv3d_forward, conv3d_reference, flops_decomposed, flops_full, spatial_conv, temporal_conv
from .gradcheck import check_gradients, relative_error
from .model import ModelConfig, build, forward
from .tensor import fold_channels_into_time, unfold_time_into_channels

OP_TOL = 1e-4
MODEL_TOL = 1e-3
ORACLE_TOL = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tol: float
    passed: bool

    def row(self) -> str:
        return f"{self.name},{'PASS' if self.passed else 'FAIL'},{self.value:.3e},{self.tol:.0e}"


REPORT_HEADER = "check,status,value,tol"


def _result(name, value, tol):
    value = float(value)
    return CheckResult(name, value, tol, bool(np.isfinite(value) and value < tol))


def _var(rng, shape, scale=1.0):
    return ad.Var(rng.standard_normal(shape) * scale, requires_grad=True)


def _projected(fn, out_shape, rng):
    """Loss builder sum(fn(tape) * R) for a fixed random R."""
    r = rng.standard_normal(out_shape)
    return lambda tape: ad.weighted_sum(fn(tape), r, tape)


def _op_cases(rng):
    """(name, loss builder, leaves) for every differentiable op."""
    cases = []

    def add(name, fn, leaves, out_shape):
        cases.append((name, _projected(fn, out_shape, rng), leaves))

    shape = (2, 3, 3, 4, 4)
    for label, spec in (("conv3d.3x3x3", ConvSpec(3, 2, (3, 3, 3))),
                        ("conv3d.spatial_grouped", ConvSpec(4, 4, (1, 3, 3), groups=2)),
                        ("conv3d.temporal", ConvSpec(3, 3, (3, 1, 1))),
                        ("conv3d.dilated", ConvSpec(1, 1, (3, 3, 3), dilation=(1, 2, 2))),
                        ("conv3d.strided", ConvSpec(2, 3, (3, 3, 3), stride=(1, 2, 2)))):
        x = _var(rng, (2, spec.c_in, 3, 5, 5))
        w = _var(rng, spec.weight_shape, 0.5)
        b = _var(rng, (spec.c_out,))
        out = (2, spec.c_out) + spec.output_extents(3, 5, 5)
        add(label, lambda tape, x=x, w=w, b=b, spec=spec: ad.conv3d(x, w, b, spec, tape), {"x": x, "w": w, "b": b},
            out)

    x = _var(rng, shape)
    add("relu", lambda tape, x=x: ad.relu(x, tape), {"x": x}, shape)
    x = _var(rng, shape)
    add("sigmoid", lambda tape, x=x: ad.sigmoid(x, tape), {"x": x}, shape)
    for axis in ("T", "C"):
        x = _var(rng, shape)
        add(f"softmax.{axis}", lambda tape, x=x, axis=axis: ad.softmax(x, axis, tape), {"x": x}, shape)
    a, b = _var(rng, shape), _var(rng, shape)
    add("add", lambda tape: ad.add(a, b, tape), {"a": a, "b": b}, shape)
    a2, b2 = _var(rng, shape), _var(rng, shape)
    add("mul", lambda tape: ad.mul(a2, b2, tape), {"a": a2, "b": b2}, shape)
    x = _var(rng, shape)
    add("scale", lambda tape, x=x: ad.scale(x, -1.7, tape), {"x": x}, shape)
    x = _var(rng, shape)
    add("dropout", lambda tape, x=x: ad.dropout(x, 0.4, "train", [7, 1], tape), {"x": x}, shape)
    x = _var(rng, shape)
    add("max_pool_hw", lambda tape, x=x: ad.max_pool_hw(x, tape), {"x": x}, (2, 3, 3, 2, 2))
    x = _var(rng, shape)
    add("upsample_hw", lambda tape, x=x: ad.upsample_hw(x, tape), {"x": x}, (2, 3, 3, 8, 8))
    a3, b3 = _var(rng, shape), _var(rng, (2, 1, 3, 4, 4))
    add("concat_channels", lambda tape: ad.concat_channels([a3, b3], tape), {"a": a3, "b": b3}, (2, 4, 3, 4, 4))
    x = _var(rng, shape)
    add("channel_slice", lambda tape, x=x: ad.channel_slice(x, 1, 3, tape), {"x": x}, (2, 2, 3, 4, 4))
    x = _var(rng, (1, 2, 2, 12, 12))
    add("crop_center", lambda tape, x=x: ad.crop_center(x, 6, tape), {"x": x}, (1, 2, 2, 2, 2))
    x = _var(rng, (2, 4, 3, 2, 2))
    add("fold_time", lambda tape, x=x: ad.fold_time(x, tape), {"x": x}, (2, 1, 12, 2, 2))
    a4, b4 = _var(rng, shape), _var(rng, shape)
    add("linear_combination", lambda tape: ad.linear_combination([(0.3, a4), (-2.0, b4)], tape),
        {"a": a4, "b": b4}, shape)

    z = _var(rng, shape, 2.0)
    y = (rng.random(shape) < 0.3).astype(np.float64)
    cases.append(("bce_with_logits", lambda tape: ad.bce_with_logits(z, y, 4.0, tape), {"z": z}))
    return cases


def _block_cases(rng):
    cases = []
    for g in (2, 4):
        cfg = LcamConfig(4, g)
        p = {}
        init_lcam(p, "", cfg, rng, np.float64)
        pv = {k: ad.Var(v + 0.05 * rng.standard_normal(v.shape), requires_grad=True) for k, v in p.items()}
        x = _var(rng, (1, 4, 3, 9, 9))
        leaves = {"x": x, **pv}
        fn = lambda tape, cfg=cfg, pv=pv, x=x: lcam_forward(x, pv, cfg, tape, "", "train", 0.4, [3, 0])
        cases.append((f"lcam.g{g}", _projected(fn, x.shape, rng), leaves))
    for norm, attention in (("softmax", "decomposed"), ("sigmoid", "dense")):
        cfg = StrConfig(1, norm, attention)
        p = {}
        init_str(p, "", cfg, rng, np.float64)
        pv = {k: ad.Var(v + 0.05 * rng.standard_normal(v.shape), requires_grad=True) for k, v in p.items()}
        y = _var(rng, (1, 1, 8, 5, 5))
        leaves = {"y_early": y, **pv}
        fn = lambda tape, cfg=cfg, pv=pv, y=y: str_forward(y, pv, cfg, tape)
        cases.append((f"str.{norm}.{attention}", _projected(fn, y.shape, rng), leaves))
    return cases


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(init_filters=4, levels=2, t_out=8, dropout_rate=0.4, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def _model_case(rng, seed):
    from .training import total_loss

    cfg = tiny_model_config()
    params = build(cfg, seed)
    pv = params.as_vars(requires_grad=True)
    for v in pv.values():
        v.data = v.data + 0.05 * rng.standard_normal(v.data.shape)  # break zero biases off relu kinks
    x = rng.standard_normal((2, cfg.in_channels, cfg.t_in, 12, 12))
    y = (rng.random(cfg.output_shape(x.shape)) < 0.4).astype(np.float64)

    def build_loss(tape):
        y_early, y_final = forward(x, pv, cfg, "train", [seed, 9], tape)
        return total_loss(y_final, y_early, y, 0.2, 4.0, tape)

    return build_loss, pv


def gradient_checks(seed: int = 0, samples: int = 6) -> list[CheckResult]:
    """Finite-difference checks for every op, both blocks and a tiny model (float64)."""
    rng = np.random.default_rng(seed)
    results = []
    for name, build_loss, leaves in _op_cases(rng) + _block_cases(rng):
        errs = check_gradients(build_loss, leaves, samples=samples, rng=rng)
        results.append(_result(f"grad.{name}", max(errs.values()), OP_TOL))
    build_loss, pv = _model_case(rng, seed)
    errs = check_gradients(build_loss, pv, samples=2, rng=rng)
    results.append(_result("grad.model", max(errs.values()), MODEL_TOL))
    return results


def separable_oracle_checks(seed: int = 0, count: int = 20) -> list[CheckResult]:
    """Spatial then temporal conv equals the dense conv with the composed kernel."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        c_in, c_mid, c_out = (int(v) for v in rng.integers(1, 4, size=3))
        k_t = int(rng.choice((1, 3, 5)))
        k_h, k_w = (int(v) for v in rng.choice((1, 3, 5, 7), size=2))
        x = rng.standard_normal((int(rng.integers(1, 3)), c_in, int(rng.integers(3, 7)),
                                 int(rng.integers(6, 12)), int(rng.integers(6, 12))))
        ws = rng.standard_normal((c_mid, c_in, 1, k_h, k_w))
        wt = rng.standard_normal((c_out, c_mid, k_t, 1, 1))
        bt = rng.standard_normal(c_out)
        dense_w = np.einsum("omt,mihw->oithw", wt[:, :, :, 0, 0], ws[:, :, 0])
        dense = conv3d_forward(x, dense_w, bt, ConvSpec(c_in, c_out, (k_t, k_h, k_w)))
        piped = temporal_conv(spatial_conv(x, ws, None, k_h, k_w), wt, bt, k_t)
        worst = max(worst, relative_error(piped, dense))
    return [_result("oracle.separable", worst, ORACLE_TOL)]


def attention_oracle_check(seed: int = 0) -> CheckResult:
    """Local then dilated depthwise conv equals one 9x9x9 kernel away from the borders."""
    from .blocks import composed_attention_kernel

    rng = np.random.default_rng(seed)
    local = rng.standard_normal((1, 1, 3, 3, 3))
    dilated = rng.standard_normal((1, 1, 3, 3, 3))
    x = rng.standard_normal((1, 1, 14, 14, 14))
    two = conv3d_forward(conv3d_forward(x, local, None, ConvSpec(1, 1, (3, 3, 3))), dilated, None,
                         ConvSpec(1, 1, (3, 3, 3), dilation=3))
    one = conv3d_forward(x, composed_attention_kernel(local, dilated), None, ConvSpec(1, 1, (9, 9, 9)))
    inner = (slice(None), slice(None)) + (slice(4, -4),) * 3
    return _result("oracle.attention_kernel", relative_error(two[inner], one[inner]), ORACLE_TOL)


def reference_conv_check(seed: int = 0) -> CheckResult:
    """Fast engine against the nested-loop reference."""
    rng = np.random.default_rng(seed)
    spec = ConvSpec(4, 2, (3, 3, 3), dilation=(1, 2, 1), stride=(1, 1, 2), groups=2)
    x = rng.standard_normal((2, 4, 4, 7, 8))
    w = rng.standard_normal(spec.weight_shape)
    b = rng.standard_normal(2)
    return _result("oracle.reference_conv", relative_error(conv3d_forward(x, w, b, spec),
                                                           conv3d_reference(x, w, b, spec)), ORACLE_TOL)


def flops_checks(seed: int = 0, count: int = 50) -> list[CheckResult]:
    """Closed forms against exact big-integer products, plus the 3x3x3 savings ratio."""
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(count):
        h, w = (int(v) for v in rng.integers(1, 512, size=2))
        c_in, c_out = (int(v) for v in rng.integers(1, 1025, size=2))
        k_t, k_h, k_w = (int(v) for v in rng.integers(1, 12, size=3))
        full = h * w * c_in * c_out * k_t * k_h * k_w
        dec = h * w * c_in * c_out * (k_t + k_h * k_w)
        mismatches += flops_full(h, w, c_in, c_out, k_t, k_h, k_w) != full
        mismatches += flops_decomposed(h, w, c_in, c_out, k_t, k_h, k_w) != dec
    ratio = Fraction(flops_decomposed(48, 48, 16, 16, 3, 3, 3), flops_full(48, 48, 16, 16, 3, 3, 3))
    # the instrumented reference counts every MAC, padded taps included
    counter = [0]
    spec = ConvSpec(2, 3, (3, 3, 3))
    conv3d_reference(np.zeros((1, 2, 2, 4, 5)), np.zeros(spec.weight_shape), None, spec, counter)
    counted = counter[0] == 2 * flops_full(4, 5, 2, 3, 3, 3, 3)
    return [
        _result("flops.closed_forms", mismatches, 0.5),
        _result("flops.ratio_3x3x3", abs(ratio - Fraction(12, 27)), 1e-12),
        _result("flops.instrumented_count", 0 if counted else 1, 0.5),
    ]


def fold_check(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 8, 4, 3, 5)).astype(np.float32)
    back = unfold_time_into_channels(fold_channels_into_time(x), 8)
    return _result("fold.round_trip", 0 if np.array_equal(back, x) else 1, 0.5)


def run_selftest(seed: int = 0) -> list[CheckResult]:
    results = gradient_checks(seed)
    results += separable_oracle_checks(seed)
    results.append(attention_oracle_check(seed))
    results.append(reference_conv_check(seed))
    results += flops_checks(seed)
    results.append(fold_check(seed))
    return results


def format_report(results) -> str:
    return "\n".join([REPORT_HEADER] + [r.row() for r in results]) + "\n"


def all_passed(results) -> bool:
    return all(r.passed for r in results)
