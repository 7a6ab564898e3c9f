"""3D convolution kernels and their cost accounting.

The forward pass is a cross-correlation (no kernel flip). For each temporal
tap, one GEMM per channel group applies every spatial tap at once to the
frames that tap reads; a shifted accumulation over the flattened zero-padded
planes then sums the taps: the spatial tap at offset (b, c) contributes to
output cell ``i`` the product computed at flat index ``i + b*Wp + c``. Batch
items sit side by side along the flat axis, which is safe because a valid
output cell never reads past the end of its own block.

The backward pass is the exact transpose of that loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(e) for e in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values (t, h, w), got {v}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    kernel: tuple = (3, 3, 3)
    dilation: tuple = (1, 1, 1)
    stride: tuple = (1, 1, 1)
    padding: tuple | str = "same"
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "dilation", _triple(self.dilation))
        object.__setattr__(self, "stride", _triple(self.stride))
        if self.padding == "same":
            if any(k % 2 == 0 for k in self.kernel):
                raise ValueError(f"'same' padding needs odd kernel extents, got {self.kernel}")
            pad = tuple(d * (k - 1) // 2 for k, d in zip(self.kernel, self.dilation))
        else:
            pad = _triple(self.padding)
        object.__setattr__(self, "padding", pad)
        if min(self.c_in, self.c_out, self.groups) < 1:
            raise ValueError("channels and groups must be positive")
        if self.c_in % self.groups or self.c_out % self.groups:
            raise ValueError(f"groups={self.groups} must divide c_in={self.c_in} and c_out={self.c_out}")
        if min(self.kernel + self.dilation + self.stride) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid kernel/dilation/stride/padding in {self}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int, int]:
        return (self.c_out, self.c_in // self.groups) + self.kernel

    @property
    def taps(self) -> int:
        return math.prod(self.kernel)

    def output_extents(self, t: int, h: int, w: int) -> tuple[int, int, int]:
        out = []
        for n, k, d, s, p in zip((t, h, w), self.kernel, self.dilation, self.stride, self.padding):
            span = d * (k - 1) + 1
            if span > n + 2 * p:
                raise ShapeError(f"effective kernel extent {span} exceeds padded input extent {n + 2 * p}")
            out.append((n + 2 * p - span) // s + 1)
        return tuple(out)


@dataclass
class ConvContext:
    """Intermediates a forward pass keeps for its backward pass."""

    spec: ConvSpec
    in_shape: tuple
    padded: np.ndarray  # (C, N, Tp, Hp, Wp) zero-padded input
    dense: tuple  # stride-1 output extents
    out: tuple  # strided output extents


def _plane_offsets(spec: ConvSpec, wp: int) -> list[int]:
    dh, dw = spec.dilation[1:]
    kh, kw = spec.kernel[1:]
    return [b * dh * wp + c * dw for b in range(kh) for c in range(kw)]


def _check_inputs(x, weight, spec: ConvSpec):
    if x.ndim != 5:
        raise ShapeError(f"conv input must have 5 axes, got {x.shape}")
    if x.shape[1] != spec.c_in:
        raise ShapeError(f"conv input has {x.shape[1]} channels, spec expects {spec.c_in}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} does not match spec {spec.weight_shape}")


def _slab(buf: np.ndarray, a: int, spec: ConvSpec, td: int, groups: int) -> np.ndarray:
    """Frames read by temporal tap ``a``, flattened to (G, C/G, N*td*Hp*Wp)."""
    start = a * spec.dilation[0]
    c = buf.shape[0]
    if start == 0 and td == buf.shape[2]:
        return buf.reshape(groups, c // groups, -1)
    return np.ascontiguousarray(buf[:, :, start:start + td]).reshape(groups, c // groups, -1)


def conv3d_forward(x, weight, bias, spec: ConvSpec, keep_context: bool = False):
    """Cross-correlate ``x`` (N, C_in, T, H, W) with ``weight``.

    Returns the output, or ``(output, ConvContext)`` with ``keep_context``.
    """
    x = np.asarray(x)
    weight = np.asarray(weight, dtype=x.dtype)
    _check_inputs(x, weight, spec)
    n, c, t, h, w = x.shape
    pt, ph, pw = spec.padding
    tp, hp, wp = t + 2 * pt, h + 2 * ph, w + 2 * pw
    out_ext = spec.output_extents(t, h, w)
    kt, kh, kw = spec.kernel
    dt, dh, dw = spec.dilation
    td, hd, wd = tp - dt * (kt - 1), hp - dh * (kh - 1), wp - dw * (kw - 1)
    g, cg, og = spec.groups, c // spec.groups, spec.c_out // spec.groups
    k2 = kh * kw
    q = td * hp * wp  # flat extent of one sample's output planes

    buf = np.zeros((c, n, tp, hp, wp), dtype=x.dtype)
    buf[:, :, pt:pt + t, ph:ph + h, pw:pw + w] = x.transpose(1, 0, 2, 3, 4)

    # (G, Kt, Kh*Kw*og, cg): rows ordered (plane tap, out-channel)
    wstack = np.ascontiguousarray(
        weight.reshape(g, og, cg, kt, k2).transpose(0, 3, 4, 1, 2)).reshape(g, kt, k2 * og, cg)
    offsets = _plane_offsets(spec, wp)
    span = (n - 1) * q + (hd - 1) * wp + wd + (td - 1) * hp * wp
    acc = np.zeros((g, og, n * q), dtype=x.dtype)
    head = acc[:, :, :span]
    for a in range(kt):
        y = np.matmul(wstack[:, a], _slab(buf, a, spec, td, g)).reshape(g, k2, og, n * q)
        for j, off in enumerate(offsets):
            head += y[:, j, :, off:off + span]
        del y

    st, sh, sw = spec.stride
    out = acc.reshape(spec.c_out, n, td, hp, wp)[:, :, ::st, :hd:sh, :wd:sw]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))
    assert out.shape[2:] == out_ext
    if bias is not None:
        out += np.asarray(bias, dtype=x.dtype).reshape(1, -1, 1, 1, 1)
    if keep_context:
        return out, ConvContext(spec, x.shape, buf, (td, hd, wd), out_ext)
    return out


def conv3d_backward(grad_out, weight, ctx: ConvContext, need_input_grad: bool = True):
    """Gradients of a conv w.r.t. input, weight and bias.

    Returns ``(grad_x, grad_weight, grad_bias)``; ``grad_x`` is None when not
    requested.
    """
    spec = ctx.spec
    grad_out = np.asarray(grad_out)
    buf = ctx.padded
    dtype = buf.dtype
    n, c, t, h, w = ctx.in_shape
    _, _, tp, hp, wp = buf.shape
    td, hd, wd = ctx.dense
    kt, kh, kw = spec.kernel
    g, cg, og = spec.groups, c // spec.groups, spec.c_out // spec.groups
    k2 = kh * kw
    q = td * hp * wp
    span = (n - 1) * q + (hd - 1) * wp + wd + (td - 1) * hp * wp
    st, sh, sw = spec.stride
    if grad_out.shape != (n, spec.c_out) + tuple(ctx.out):
        raise ShapeError(f"upstream gradient shape {grad_out.shape} does not match conv output")

    gbuf = np.zeros((spec.c_out, n, td, hp, wp), dtype=dtype)
    gbuf[:, :, ::st, :hd:sh, :wd:sw] = grad_out.transpose(1, 0, 2, 3, 4)
    gf = gbuf.reshape(g, og, n * q)[:, :, :span]
    grad_b = grad_out.sum(axis=(0, 2, 3, 4))

    offsets = _plane_offsets(spec, wp)
    gw = np.empty((g, og, cg, kt, k2), dtype=dtype)
    if need_input_grad:
        weight = np.asarray(weight, dtype=dtype)
        # (G, Kt, Kh*Kw*cg, og): rows ordered (plane tap, in-channel)
        wt = np.ascontiguousarray(
            weight.reshape(g, og, cg, kt, k2).transpose(0, 3, 4, 2, 1)).reshape(g, kt, k2 * cg, og)
        gx = np.zeros((c, n, tp, hp, wp), dtype=dtype)
    for a in range(kt):
        xs = _slab(buf, a, spec, td, g)
        for j, off in enumerate(offsets):
            gw[:, :, :, a, j] = np.matmul(gf, xs[:, :, off:off + span].transpose(0, 2, 1))
        if need_input_grad:
            z = np.matmul(wt[:, a], gf).reshape(g, k2, cg, span)
            gs = np.zeros((g, cg, n * q), dtype=dtype)
            for j, off in enumerate(offsets):
                gs[:, :, off:off + span] += z[:, j]
            del z
            start = a * spec.dilation[0]
            gx[:, :, start:start + td] += gs.reshape(c, n, td, hp, wp)
    grad_w = gw.reshape(spec.weight_shape)

    grad_x = None
    if need_input_grad:
        pt, ph, pw = spec.padding
        grad_x = np.ascontiguousarray(gx[:, :, pt:pt + t, ph:ph + h, pw:pw + w].transpose(1, 0, 2, 3, 4))
    return grad_x, grad_w, grad_b


def spatial_conv(x, weight, bias, k_h: int, k_w: int, dilation: int = 1, groups: int = 1):
    """1 x k_h x k_w conv with 'same' padding; each time slice is filtered alone."""
    weight = np.asarray(weight)
    spec = ConvSpec(weight.shape[1] * groups, weight.shape[0], (1, k_h, k_w),
                    dilation=(1, dilation, dilation), groups=groups)
    return conv3d_forward(x, weight, bias, spec)


def temporal_conv(x, weight, bias, k_t: int, padding="same"):
    """k_t x 1 x 1 conv; every pixel's time series is filtered alone.

    With ``padding=0`` and kernel ``[1, -1]`` the output at step t is
    ``x[t] - x[t + 1]`` (cross-correlation convention).
    """
    weight = np.asarray(weight)
    pad = "same" if padding == "same" else (padding, 0, 0)
    spec = ConvSpec(weight.shape[1], weight.shape[0], (k_t, 1, 1), padding=pad)
    return conv3d_forward(x, weight, bias, spec)


def conv3d_reference(x, weight, bias, spec: ConvSpec, counter: list | None = None):
    """Direct nested-loop convolution; slow, used as an audit oracle.

    When ``counter`` is given, ``counter[0]`` is incremented once per
    multiply-accumulate, padded taps included.
    """
    x = np.asarray(x)
    _check_inputs(x, np.asarray(weight), spec)
    n, c, t, h, w = x.shape
    pt, ph, pw = spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    to, ho, wo = spec.output_extents(t, h, w)
    kt, kh, kw = spec.kernel
    dt, dh, dw = spec.dilation
    st, sh, sw = spec.stride
    cg, og = c // spec.groups, spec.c_out // spec.groups
    out = np.zeros((n, spec.c_out, to, ho, wo), dtype=x.dtype)
    macs = 0
    for b in range(n):
        for o in range(spec.c_out):
            grp = o // og
            for i in range(to):
                for j in range(ho):
                    for l in range(wo):
                        acc = 0.0 if bias is None else float(bias[o])
                        for ci in range(cg):
                            for a in range(kt):
                                for bb in range(kh):
                                    for cc in range(kw):
                                        acc += weight[o, ci, a, bb, cc] * xp[
                                            b, grp * cg + ci, i * st + a * dt, j * sh + bb * dh, l * sw + cc * dw]
                                        macs += 1
                        out[b, o, i, j, l] = acc
    if counter is not None:
        counter[0] += macs
    return out


_U64_MAX = 2**64 - 1


def _checked_product(*terms: int) -> int:
    if any(int(v) < 1 for v in terms):
        raise ValueError(f"all arguments must be positive, got {terms}")
    total = math.prod(int(v) for v in terms)
    if total > _U64_MAX:
        raise OverflowError(f"count {total} overflows 64 bits")
    return total


def flops_full(h, w, c_in, c_out, k_t, k_h, k_w) -> int:
    """Multiply-accumulates of a dense K_t x K_h x K_w conv on an H x W frame."""
    _checked_product(k_t, k_h, k_w)
    return _checked_product(h, w, c_in, c_out, k_t * k_h * k_w)


def flops_decomposed(h, w, c_in, c_out, k_t, k_h, k_w) -> int:
    """Multiply-accumulates of the same conv split into spatial + temporal passes."""
    _checked_product(k_t, k_h, k_w)
    return _checked_product(h, w, c_in, c_out, k_t + k_h * k_w)


def param_count(spec: ConvSpec, with_bias: bool = True) -> int:
    return (spec.c_in // spec.groups) * spec.c_out * spec.taps + (spec.c_out if with_bias else 0)


def conv_macs(spec: ConvSpec, in_shape) -> int:
    """Multiply-accumulates one forward pass spends (batch of one)."""
    _, _, t, h, w = in_shape
    to, ho, wo = spec.output_extents(t, h, w)
    return to * ho * wo * (spec.c_in // spec.groups) * spec.c_out * spec.taps
