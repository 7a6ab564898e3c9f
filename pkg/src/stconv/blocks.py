"""LCAM and STR blocks assembled from the tape ops.

Parameters live in a flat ``{name: Var}`` mapping; every block reads its
tensors under a dotted prefix (``enc.0.lcam0.spatial.weight``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ad
from .conv import ConvSpec, param_count
from .tensor import ShapeError

KERNEL_LADDER = (3, 5, 7, 9)

# fan-in scaled uniform init: U(-b, b) with b = sqrt(INIT_GAIN / fan_in)
INIT_GAIN = 3.0


@dataclass(frozen=True)
class LcamConfig:
    channels: int
    group_count: int = 2
    dilation: int = 1
    residual: bool = True

    def __post_init__(self):
        if self.group_count not in (1, 2, 3, 4):
            raise ValueError(f"group_count must be between 1 and 4, got {self.group_count}")
        if self.channels % self.group_count:
            raise ValueError(f"{self.channels} channels cannot be split into group_count={self.group_count} even groups")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")

    @property
    def kernel_ladder(self) -> tuple[int, ...]:
        return KERNEL_LADDER[:self.group_count]

    def conv_specs(self) -> dict[str, ConvSpec]:
        c, g = self.channels, self.group_count
        specs = {"spatial": ConvSpec(c, c, (1, 3, 3))}
        for i, n in enumerate(self.kernel_ladder):
            specs[f"mksc.{i}"] = ConvSpec(c // g, c // g, (1, n, n), dilation=(1, self.dilation, self.dilation))
        specs["temporal"] = ConvSpec(c, c, (3, 1, 1))
        specs["aggregate"] = ConvSpec(c, c, (3, 3, 3))
        return specs


@dataclass(frozen=True)
class StrConfig:
    channels: int = 1
    norm: str = "softmax"  # softmax over time, or a pointwise "sigmoid" gate
    attention: str = "decomposed"  # "dense" swaps in one 7x7x7 kernel
    residual_blocks: int = 2

    def __post_init__(self):
        if self.norm not in ("softmax", "sigmoid"):
            raise ValueError(f"STR norm must be 'softmax' or 'sigmoid', got {self.norm!r}")
        if self.attention not in ("decomposed", "dense"):
            raise ValueError(f"STR attention must be 'decomposed' or 'dense', got {self.attention!r}")

    def conv_specs(self) -> dict[str, ConvSpec]:
        c = self.channels
        if self.attention == "decomposed":
            specs = {
                "attn.local": ConvSpec(c, c, (3, 3, 3), groups=c),
                "attn.dilated": ConvSpec(c, c, (3, 3, 3), dilation=(3, 3, 3), groups=c),
            }
        else:
            specs = {"attn.dense": ConvSpec(c, c, (7, 7, 7))}
        specs["attn.mix"] = ConvSpec(c, c, (1, 1, 1))
        for i in range(self.residual_blocks):
            specs[f"res.{i}"] = ConvSpec(c, c, (3, 3, 3))
        return specs

    @property
    def attention_reach(self) -> int:
        """Cells an impulse spreads to on each side through the attention convs."""
        if self.attention == "dense":
            return 3
        return 1 + 3  # (3-1)*1/2 + (3-1)*3/2


def init_conv(params: dict, name: str, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32,
              bias: bool = True) -> None:
    fan_in = (spec.c_in // spec.groups) * spec.taps
    bound = math.sqrt(INIT_GAIN / fan_in)
    params[f"{name}.weight"] = rng.uniform(-bound, bound, spec.weight_shape).astype(dtype)
    if bias:
        params[f"{name}.bias"] = np.zeros(spec.c_out, dtype=dtype)


def init_lcam(params: dict, prefix: str, cfg: LcamConfig, rng, dtype=np.float32) -> None:
    for name, spec in cfg.conv_specs().items():
        init_conv(params, prefix + name, spec, rng, dtype)


def init_str(params: dict, prefix: str, cfg: StrConfig, rng, dtype=np.float32) -> None:
    for name, spec in cfg.conv_specs().items():
        init_conv(params, prefix + name, spec, rng, dtype)
    # gate starts close to identity
    params[prefix + "attn.mix.bias"][:] = 1.0


def lcam_param_count(cfg: LcamConfig) -> int:
    return sum(param_count(s) for s in cfg.conv_specs().values())


def str_param_count(cfg: StrConfig) -> int:
    return sum(param_count(s) for s in cfg.conv_specs().values())


def _conv(x, p, name, spec, tape):
    return ad.conv3d(x, p[name + ".weight"], p.get(name + ".bias"), spec, tape)


def channel_split(F, g: int, tape=None) -> list:
    """Split channels into ``g`` contiguous, equally sized, order-preserving groups.

    Accepts a Var (recorded on ``tape``) or a plain array.
    """
    is_var = isinstance(F, ad.Var)
    c = F.shape[1]
    if g < 1 or c % g:
        raise ShapeError(f"cannot divide {c} channels into {g} even groups")
    size = c // g
    if not is_var:
        return [np.ascontiguousarray(F[:, i * size:(i + 1) * size]) for i in range(g)]
    if g == 1:
        return [F]
    return [ad.channel_slice(F, i * size, (i + 1) * size, tape) for i in range(g)]


def lcam_forward(F, p: dict, cfg: LcamConfig, tape=None, prefix: str = "", mode: str = "eval",
                 dropout_rate: float = 0.0, rng_seed=None):
    """Large spatial context aggregation block; output shape equals input shape.

    spatial 1x3x3 + ReLU -> even channel split -> per-group 1xn xn conv
    (n from 3, 5, 7, 9) -> concat -> temporal 3x1x1 -> 3x3x3 + ReLU ->
    dropout -> optional residual add of the block input.
    """
    if F.shape[1] != cfg.channels:
        raise ShapeError(f"LCAM expects {cfg.channels} channels, got {F.shape[1]}")
    specs = cfg.conv_specs()
    x = ad.relu(_conv(F, p, prefix + "spatial", specs["spatial"], tape), tape)
    parts = channel_split(x, cfg.group_count, tape)
    parts = [_conv(part, p, f"{prefix}mksc.{i}", specs[f"mksc.{i}"], tape) for i, part in enumerate(parts)]
    x = parts[0] if len(parts) == 1 else ad.concat_channels(parts, tape)
    x = _conv(x, p, prefix + "temporal", specs["temporal"], tape)
    x = ad.relu(_conv(x, p, prefix + "aggregate", specs["aggregate"], tape), tape)
    x = ad.dropout(x, dropout_rate, mode, rng_seed, tape)
    if cfg.residual:
        x = ad.add(F, x, tape)
    return x


def residual_block(x, p: dict, name: str, tape=None, spec: ConvSpec | None = None):
    """x + relu(conv3x3x3(x))."""
    spec = spec or ConvSpec(x.shape[1], x.shape[1], (3, 3, 3))
    return ad.add(x, ad.relu(_conv(x, p, name, spec, tape), tape), tape)


def str_attention(y_early, p: dict, cfg: StrConfig, tape=None, prefix: str = ""):
    """Large-kernel spatiotemporal gate computed from the normalized early logits."""
    specs = cfg.conv_specs()
    if cfg.norm == "softmax":
        a = ad.softmax(y_early, "T", tape)
    else:
        a = ad.sigmoid(y_early, tape)
    if cfg.attention == "decomposed":
        a = _conv(a, p, prefix + "attn.local", specs["attn.local"], tape)
        a = _conv(a, p, prefix + "attn.dilated", specs["attn.dilated"], tape)
    else:
        a = _conv(a, p, prefix + "attn.dense", specs["attn.dense"], tape)
    return _conv(a, p, prefix + "attn.mix", specs["attn.mix"], tape)


def str_forward(y_early, p: dict, cfg: StrConfig, tape=None, prefix: str = ""):
    """Refine early logits: gate them by the attention map, then residual blocks."""
    if y_early.shape[1] != cfg.channels:
        raise ShapeError(f"STR expects {cfg.channels} channel(s), got shape {y_early.shape}")
    attn = str_attention(y_early, p, cfg, tape, prefix)
    y = ad.mul(y_early, attn, tape)
    specs = cfg.conv_specs()
    for i in range(cfg.residual_blocks):
        y = residual_block(y, p, f"{prefix}res.{i}", tape, specs[f"res.{i}"])
    return y


def composed_attention_kernel(local: np.ndarray, dilated: np.ndarray) -> np.ndarray:
    """Dense 9x9x9 kernel equal to a 3x3x3 conv followed by a dilation-3 3x3x3 conv.

    Both inputs are single-channel weights shaped (1, 1, 3, 3, 3).
    """
    out = np.zeros((1, 1, 9, 9, 9), dtype=np.result_type(local, dilated))
    for a in range(3):
        for b in range(3):
            for c in range(3):
                out[0, 0, 3 * a:3 * a + 3, 3 * b:3 * b + 3, 3 * c:3 * c + 3] += dilated[0, 0, a, b, c] * local[0, 0]
    return out
